"""Stage-1 (compression + style block) and stage-2 (latent denoiser) training loops."""

from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import Tensor, no_grad
from .autodiff import functional as F
from .autoencoder import Encoder, hinge_d_loss, hinge_g_loss
from .checkpoint import Checkpoint, CheckpointError, save_checkpoint, tensor_table_hash
from .config import RunConfig
from .data.manifest import DatasetManifest
from .data.source import DirectorySource, PhantomSource, directory_manifest, phantom_manifest
from .nn import AdamW
from .pipeline import CompressionModel, Translator, build_discriminator, build_diffusion, phantom_spec
from .unet import one_hot


class NonFiniteLossError(ArithmeticError):
    def __init__(self, step: int, name: str = "total"):
        super().__init__(f"non-finite {name} loss at step {step}")
        self.step = step


def deterministic(enabled: bool = True):
    """Pin BLAS to one thread so repeated runs agree bitwise."""
    return threadpool_limits(1) if enabled else contextlib.nullcontext()


def build_dataset(cfg: RunConfig):
    ds = cfg.dataset
    if ds.kind == "phantom":
        spec = phantom_spec(cfg)
        manifest = phantom_manifest(spec, ds.n_subjects, ds.train_fraction, ds.split_seed)
        return manifest, PhantomSource(spec, manifest)
    manifest = directory_manifest(ds.data_dir, ds.modalities, ds.train_fraction, ds.split_seed)
    return manifest, DirectorySource(ds.data_dir, manifest)


@dataclass
class LossReport:
    recon: float
    quant: float
    adversarial: float
    perceptual: float
    cycle: float
    total: float
    weights: tuple[float, float, float, float, float]
    disc: float = 0.0

    TERMS = ("recon", "quant", "adversarial", "perceptual", "cycle")

    def components(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in self.TERMS)

    def weighted_total(self) -> float:
        return float(sum(w * v for w, v in zip(self.weights, self.components())))

    def row(self, step: int) -> dict:
        out = {"step": step}
        out.update({k: getattr(self, k) for k in self.TERMS})
        out["total"] = self.total
        out["disc"] = self.disc
        out.update({f"w_{k}": w for k, w in zip(self.TERMS, self.weights)})
        return out


class LossLog:
    """Append-only CSV with a header row."""

    def __init__(self, path, columns):
        self.path = Path(path) if path else None
        self.columns = list(columns)
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in self.columns])


def read_loss_log(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


STAGE1_COLUMNS = ["step", *LossReport.TERMS, "total", "disc", *(f"w_{k}" for k in LossReport.TERMS)]
STAGE2_COLUMNS = ["step", "loss"]


def _features_mse(a: list[Tensor], b: list[np.ndarray]) -> Tensor:
    terms = [F.mse_loss(x, Tensor(y)) for x, y in zip(a, b)]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out * (1.0 / len(terms))


class Stage1Trainer:
    def __init__(self, cfg: RunConfig, manifest: DatasetManifest | None = None, source=None):
        self.cfg = cfg
        if manifest is None:
            manifest, source = build_dataset(cfg)
        self.manifest, self.source = manifest, source
        seed = cfg.run.seed
        self.model = CompressionModel(cfg, seed)
        self.disc = build_discriminator(cfg, seed)
        m = cfg.model
        self.critic = Encoder(m.channels, m.res_blocks, self.model.encoder.conv_out.weight.shape[0])
        for p in self.critic.parameters():
            p.requires_grad = False
        s1 = cfg.stage1
        codec = self.model.encoder.parameters() + self.model.decoder.parameters()
        self.opt_codec = AdamW(codec, s1.lr, weight_decay=s1.weight_decay, grad_clip=s1.grad_clip)
        self.opt_spade = None
        if self.model.spade is not None:
            self.opt_spade = AdamW(self.model.spade.parameters(), s1.lr, weight_decay=s1.weight_decay,
                                   grad_clip=s1.grad_clip)
        self.opt_disc = AdamW(self.disc.parameters(), s1.lr, betas=(0.5, 0.9), weight_decay=s1.weight_decay)
        self.rng = np.random.default_rng([seed, 100])
        self.step_count = 0
        self.train_subjects = manifest.train
        if not self.train_subjects:
            raise ValueError("manifest has no training subjects")

    def refresh_critic(self) -> None:
        self.critic.load_state_dict(self.model.encoder.state_dict())

    def sample_pair(self):
        mods = self.manifest.modalities
        subject = self.train_subjects[self.rng.integers(len(self.train_subjects))]
        src, tar = (mods[i] for i in self.rng.integers(len(mods), size=2))
        vols = self.source.volumes(subject)
        return vols[src], vols[tar], src, tar

    def phase(self) -> str:
        """'joint', or 'codec' / 'style' when the style block is trained after the codec."""
        s1 = self.cfg.stage1
        if self.model.spade is None or not s1.sequential_spade:
            return "joint"
        return "codec" if self.step_count < s1.steps // 2 else "style"

    def losses(self, x_src: np.ndarray, x_tar: np.ndarray, src: str, tar: str):
        """Forward pass for one pair: (total, component tensors, applied weights, fakes for the critic)."""
        for name in (src, tar):
            self.manifest.modality_index(name)
        cfg, s1, model = self.cfg, self.cfg.stage1, self.model
        step = self.step_count
        phase = self.phase()
        xs = Tensor(np.asarray(x_src, dtype=np.float32)[None, None])
        xt = Tensor(np.asarray(x_tar, dtype=np.float32)[None, None])

        h = model.encode_params(xs)
        z_dec, quant = model.regularize(h, update=phase != "style", rng=self.rng)
        z_src = h[:, : model.z_channels] if model.reg_type == "KL" else h
        x_rec = model.decode(z_dec)
        recon = F.l1_loss(x_rec, xs)
        fakes, reals = [x_rec], [xs]
        cycle = None
        translate = model.spade is not None and phase != "codec"
        if translate:
            z_t = model.restyle(z_src, tar)
            z_tq, q2 = model.snap(z_t)
            x_trans = model.decode(z_tq)
            recon = recon + F.l1_loss(x_trans, xt)
            if q2 is not None:
                quant = quant + q2
            if s1.latent_translation:
                with no_grad():
                    z_ref = model.encode(xt).data
                recon = recon + F.l1_loss(z_t, Tensor(z_ref))
            fakes.append(x_trans)
            reals.append(xt)
            if s1.w_cycle > 0 and step % max(s1.cycle_every, 1) == 0:
                z_back = model.restyle(model.encode(x_trans), src)
                x_cyc = model.decode(model.snap(z_back)[0])
                cycle = F.l1_loss(x_cyc, xs)

        adversarial = None
        if s1.w_adv > 0 and step >= s1.adv_warmup:
            adversarial = hinge_g_loss(self.disc(fakes[0]))
            for f in fakes[1:]:
                adversarial = adversarial + hinge_g_loss(self.disc(f))
            adversarial = adversarial * (1.0 / len(fakes))

        perceptual = None
        if s1.perceptual and s1.w_perceptual > 0:
            with no_grad():
                ref = [self.critic.forward_features(r)[1] for r in reals]
            perceptual = _features_mse(self.critic.forward_features(fakes[0])[1], [f.data for f in ref[0]])
            for f, r in zip(fakes[1:], ref[1:]):
                perceptual = perceptual + _features_mse(self.critic.forward_features(f)[1], [a.data for a in r])
            perceptual = perceptual * (1.0 / len(fakes))

        quant_w = cfg.stage1.kl_weight if model.reg_type == "KL" else s1.w_quant
        terms = [recon, quant, adversarial, perceptual, cycle]
        weights = [s1.w_recon, quant_w, s1.w_adv, s1.w_perceptual, s1.w_cycle]
        weights = tuple(float(w) if t is not None else 0.0 for w, t in zip(weights, terms))
        total = None
        for w, t in zip(weights, terms):
            if t is None or w == 0.0:
                continue
            total = t * w if total is None else total + t * w
        return total, terms, weights, fakes, reals

    def disc_step(self, fakes, reals) -> float:
        real_logits = [self.disc(r) for r in reals]
        fake_logits = [self.disc(Tensor(f.data)) for f in fakes]
        loss = hinge_d_loss(real_logits[0], fake_logits[0])
        for r, f in zip(real_logits[1:], fake_logits[1:]):
            loss = loss + hinge_d_loss(r, f)
        loss = loss * (1.0 / len(reals))
        self.opt_disc.zero_grad()
        loss.backward()
        self.opt_disc.step()
        return float(loss.data)

    def step(self, pair=None) -> LossReport:
        s1 = self.cfg.stage1
        if self.step_count % max(s1.perceptual_refresh, 1) == 0:
            self.refresh_critic()
        if pair is None:
            pair = self.sample_pair()
        total, terms, weights, fakes, reals = self.losses(*pair)
        value = float(total.data)
        if not math.isfinite(value):
            raise NonFiniteLossError(self.step_count)
        optimizers = {"joint": [self.opt_codec, self.opt_spade], "codec": [self.opt_codec],
                      "style": [self.opt_spade]}[self.phase()]
        optimizers = [o for o in optimizers if o is not None]
        for opt in (self.opt_codec, self.opt_spade):
            if opt is not None:
                opt.zero_grad()
        total.backward()
        for opt in optimizers:
            opt.step()
        disc = 0.0
        if terms[2] is not None:
            disc = self.disc_step(fakes, reals)
        self.step_count += 1
        comps = [0.0 if t is None else float(t.data) for t in terms]
        return LossReport(*comps, total=value, weights=weights, disc=disc)

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = dict(self.model.state_dict())
        tensors.update({f"disc.{k}": v for k, v in self.disc.state_dict().items()})
        return tensors

    def checkpoint(self) -> Checkpoint:
        return Checkpoint("stage1", self.cfg.model_spec(), self.state_tensors(), self.step_count, self.cfg.run.seed)

    def run(self, steps: int | None = None, log_path=None, checkpoint_path=None) -> list[LossReport]:
        s1 = self.cfg.stage1
        steps = s1.steps if steps is None else steps
        log = LossLog(log_path, STAGE1_COLUMNS)
        reports = []
        with deterministic(self.cfg.run.deterministic):
            for _ in range(steps):
                report = self.step()
                reports.append(report)
                if s1.log_every and (self.step_count - 1) % s1.log_every == 0:
                    log.append(report.row(self.step_count - 1))
                if checkpoint_path and s1.checkpoint_every and self.step_count % s1.checkpoint_every == 0:
                    save_checkpoint(self.checkpoint(), checkpoint_path)
        if checkpoint_path:
            save_checkpoint(self.checkpoint(), checkpoint_path)
        return reports


def load_compression_model(cfg: RunConfig, ckpt: Checkpoint) -> CompressionModel:
    model = CompressionModel(cfg, cfg.run.seed)
    state = {k: v for k, v in ckpt.tensors.items() if not k.startswith("disc.")}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"stage-1 checkpoint does not fit the configured model: {exc}") from None
    return model.eval()


class Stage2Trainer:
    """Trains only the denoiser; the stage-1 model is frozen and hash-checked."""

    def __init__(self, cfg: RunConfig, stage1: Checkpoint, manifest: DatasetManifest | None = None, source=None):
        if stage1.stage != "stage1":
            raise CheckpointError(f"stage-2 training needs a stage1 checkpoint, got stage {stage1.stage!r}")
        if not cfg.ablation.use_diffusion:
            raise ValueError("configuration has diffusion disabled; nothing to train in stage 2")
        self.cfg = cfg
        if manifest is None:
            manifest, source = build_dataset(cfg)
        self.manifest, self.source = manifest, source
        self.stage1 = stage1
        self.model = load_compression_model(cfg, stage1)
        self.frozen_hash = tensor_table_hash(self.model.state_dict())
        seed = cfg.run.seed
        self.diffusion = build_diffusion(cfg, seed)
        s2 = cfg.stage2
        self.opt = AdamW(self.diffusion.denoiser.parameters(), s2.lr, weight_decay=s2.weight_decay,
                         grad_clip=s2.grad_clip)
        self.rng = np.random.default_rng([seed, 200])
        self.train_subjects = manifest.train
        self._latents: dict[str, np.ndarray] = {}
        self._conditions: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.latent_scale = self.compute_latent_scale()

    def latents(self, subject: str) -> np.ndarray:
        """(M, C, d, h, w) encoder latents for every modality of one subject."""
        if subject not in self._latents:
            vols = self.source.volumes(subject)
            x = np.stack([vols[m] for m in self.manifest.modalities])[:, None].astype(np.float32)
            with no_grad():
                self._latents[subject] = self.model.encode(Tensor(x)).data
        return self._latents[subject]

    def conditions(self, subject: str) -> np.ndarray:
        """(M_src, M_tar, C, d, h, w) target-like latents (or source latents without the style block)."""
        if subject not in self._conditions:
            z = self.latents(subject)
            mods = self.manifest.modalities
            if self.model.spade is None:
                cond = np.repeat(z[:, None], len(mods), axis=1)
            else:
                with no_grad():
                    cond = np.stack([self.model.restyle(Tensor(z), t).data for t in mods], axis=1)
            self._conditions[subject] = cond
        return self._conditions[subject]

    def compute_latent_scale(self) -> float:
        subjects = self.train_subjects[: max(self.cfg.stage2.latent_scale_subjects, 1)]
        z = np.concatenate([self.latents(s).ravel() for s in subjects])
        std = float(np.std(z.astype(np.float64)))
        return 1.0 / std if std > 0 else 1.0

    def batch(self):
        s2 = self.cfg.stage2
        mods = self.manifest.modalities
        n = s2.batch_size
        subj = self.rng.integers(len(self.train_subjects), size=n)
        src = self.rng.integers(len(mods), size=n)
        tar = self.rng.integers(len(mods), size=n)
        z_tar, z_cond = [], []
        for s, i, j in zip(subj, src, tar):
            name = self.train_subjects[s]
            z_tar.append(self.latents(name)[j])
            z_cond.append(self.conditions(name)[i, j])
        scale = self.latent_scale
        z_tar = (np.stack(z_tar) * scale).astype(np.float32)
        z_cond = (np.stack(z_cond) * scale).astype(np.float32)
        t = self.rng.integers(1, s2.timesteps + 1, size=n)
        eps = self.rng.standard_normal(z_tar.shape).astype(np.float32)
        y = one_hot(tar, len(mods))
        return z_tar, (z_cond if self.diffusion.palette else None), t, y, eps

    def step(self) -> float:
        z_tar, z_cond, t, y, eps = self.batch()
        loss = self.diffusion.training_loss(z_tar, z_cond, t, y, eps)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLossError(self.step_count, "diffusion")
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.step_count += 1
        return value

    def assert_frozen(self) -> None:
        if tensor_table_hash(self.model.state_dict()) != self.frozen_hash:
            raise RuntimeError("stage-1 weights changed during stage-2 training")

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            "stage2",
            self.cfg.model_spec(),
            dict(self.diffusion.denoiser.state_dict()),
            self.step_count,
            self.cfg.run.seed,
            latent_scale=self.latent_scale,
            extra={"stage1_hash": self.frozen_hash},
        )

    def run(self, steps: int | None = None, log_path=None, checkpoint_path=None) -> list[float]:
        s2 = self.cfg.stage2
        steps = s2.steps if steps is None else steps
        log = LossLog(log_path, STAGE2_COLUMNS)
        losses = []
        with deterministic(self.cfg.run.deterministic):
            for _ in range(steps):
                value = self.step()
                losses.append(value)
                if s2.log_every and (self.step_count - 1) % s2.log_every == 0:
                    log.append({"step": self.step_count - 1, "loss": value})
                if checkpoint_path and s2.checkpoint_every and self.step_count % s2.checkpoint_every == 0:
                    save_checkpoint(self.checkpoint(), checkpoint_path)
        self.assert_frozen()
        if checkpoint_path:
            save_checkpoint(self.checkpoint(), checkpoint_path)
        return losses


def load_translator(cfg: RunConfig, stage1: Checkpoint, stage2: Checkpoint | None):
    model = load_compression_model(cfg, stage1)
    if not cfg.ablation.use_diffusion:
        return Translator(model, None)
    if stage2 is None:
        raise CheckpointError("missing stage2 checkpoint: diffusion is enabled in this configuration")
    if stage2.stage != "stage2":
        raise CheckpointError(f"expected a stage2 checkpoint, found stage {stage2.stage!r}")
    diffusion = build_diffusion(cfg, cfg.run.seed)
    try:
        diffusion.denoiser.load_state_dict(stage2.tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"stage-2 checkpoint does not fit the configured denoiser: {exc}") from None
    diffusion.denoiser.eval()
    return Translator(model, diffusion, float(stage2.latent_scale or 1.0))


__all__ = [
    "LossReport",
    "NonFiniteLossError",
    "Stage1Trainer",
    "Stage2Trainer",
    "build_dataset",
    "deterministic",
    "load_compression_model",
    "load_translator",
    "read_loss_log",
]
