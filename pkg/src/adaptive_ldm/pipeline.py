"""Model assembly from a run config, and the translation pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .autoencoder import Decoder, Encoder, PatchDiscriminator, QuantizeOutput, VectorQuantizer, kl_regularize
from .config import RunConfig
from .data.phantom import PhantomSpec
from .diffusion import LatentDiffusion, build_schedule
from .nn import Module
from .spade import StyleTransfer
from .unet import UNet3D, UNetSpec, one_hot

# extra lookup rows used when a config asks for more than the three default phantom contrasts
PHANTOM_LUT = (
    (0.0, 0.85, 0.55, 0.35),
    (0.0, 0.35, 0.60, 0.95),
    (0.0, 0.50, 0.75, 0.10),
    (0.0, 0.70, 0.40, 0.80),
    (0.0, 0.25, 0.80, 0.55),
)


def phantom_spec(cfg: RunConfig) -> PhantomSpec:
    ds = cfg.dataset
    m = len(ds.modalities)
    if m > len(PHANTOM_LUT):
        raise ValueError(f"phantom generator defines {len(PHANTOM_LUT)} contrasts, config asks for {m}")
    return PhantomSpec(extent=ds.extent, modalities=tuple(ds.modalities), lut=PHANTOM_LUT[:m],
                       smoothing=ds.smoothing, noise_std=ds.noise_std, seed=ds.phantom_seed)


class CompressionModel(Module):
    """Encoder, decoder, latent regularizer (VQ or KL) and, optionally, the style block."""

    def __init__(self, cfg: RunConfig, seed: int = 0):
        m = cfg.model
        self.reg_type = cfg.ablation.reg_type
        self.z_channels = m.z_channels
        self.modalities = list(cfg.dataset.modalities)
        rngs = [np.random.default_rng([seed, k]) for k in range(4)]
        enc_out = m.z_channels * (2 if self.reg_type == "KL" else 1)
        self.encoder = Encoder(m.channels, m.res_blocks, enc_out, rng=rngs[0])
        self.decoder = Decoder(m.channels, m.res_blocks, m.z_channels, rng=rngs[1])
        self.quantizer = None
        if self.reg_type == "VQ":
            self.quantizer = VectorQuantizer(m.codebook_size, m.z_channels, m.beta_commit, m.ema_decay,
                                             m.reseed_after, rng=rngs[2])
        self.spade = None
        if cfg.ablation.use_spade:
            self.spade = StyleTransfer(self.modalities, m.z_channels, m.spade_in, m.spade_res, m.spade_blocks,
                                       m.spade_hidden, rng=rngs[3])

    @property
    def factor(self) -> int:
        return self.encoder.factor

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"encoder expects (N, 1, D, H, W) volumes, got {x.shape}")
        bad = [s for s in x.shape[2:] if s % self.factor]
        if bad:
            pads = [(-s) % self.factor for s in x.shape[2:]]
            raise ValueError(
                f"extents {x.shape[2:]} must be divisible by {self.factor}; pad each axis by {pads}"
            )

    def encode_params(self, x: Tensor) -> Tensor:
        self.check_input(x)
        return self.encoder(x)

    def encode(self, x: Tensor) -> Tensor:
        """Continuous latent; the posterior mean in KL mode."""
        h = self.encode_params(x)
        if self.reg_type == "KL":
            return h[:, : self.z_channels]
        return h

    def regularize(self, h: Tensor, update: bool | None = None, rng=None) -> tuple[Tensor, Tensor]:
        """Encoder output -> (decodable latent, regularization loss)."""
        if self.reg_type == "KL":
            z, kl = kl_regularize(h[:, : self.z_channels], h[:, self.z_channels :], rng=rng)
            return z, kl * (1.0 / h.shape[0])
        out: QuantizeOutput = self.quantizer(h, update=update)
        return out.z_q, out.loss

    def snap(self, z: Tensor) -> tuple[Tensor, Tensor | None]:
        """Map a continuous latent onto the decoder's input space without codebook updates."""
        if self.reg_type == "KL":
            return z, None
        out = self.quantizer(z, update=False)
        return out.z_q, out.loss

    def decode(self, z_q: Tensor) -> Tensor:
        if z_q.ndim != 5 or z_q.shape[1] != self.z_channels:
            raise ValueError(f"decoder expects (N, {self.z_channels}, d, h, w) latents, got {z_q.shape}")
        return self.decoder(z_q)

    def decode_latent(self, z: Tensor) -> Tensor:
        return self.decode(self.snap(z)[0])

    def restyle(self, z: Tensor, target) -> Tensor:
        if self.spade is None:
            raise ValueError("style block disabled in this configuration")
        return self.spade(z, target)


def build_discriminator(cfg: RunConfig, seed: int = 0) -> PatchDiscriminator:
    return PatchDiscriminator(cfg.model.disc_channels, rng=np.random.default_rng([seed, 10]))


def unet_spec(cfg: RunConfig) -> UNetSpec:
    m = cfg.model
    return UNetSpec(
        z_channels=m.z_channels,
        channels=tuple(m.unet_channels),
        attention_levels=tuple(m.unet_attention_levels),
        res_blocks=m.unet_res_blocks,
        num_modalities=len(cfg.dataset.modalities),
        palette=cfg.ablation.use_palette,
        conditioning=cfg.stage2.conditioning,
        timesteps=cfg.stage2.timesteps,
    )


def build_diffusion(cfg: RunConfig, seed: int = 0) -> LatentDiffusion:
    s2 = cfg.stage2
    net = UNet3D(unet_spec(cfg), rng=np.random.default_rng([seed, 20]))
    return LatentDiffusion(net, build_schedule(s2.timesteps, s2.beta_start, s2.beta_end))


@dataclass
class Translator:
    """Source volume -> target volumes with one loaded model.

    Wiring follows the ablation flags: without diffusion the restyled latent
    is decoded directly; without the style block the palette latent is the
    source latent itself; without palette the sampler starts from noise only.
    """

    model: CompressionModel
    diffusion: LatentDiffusion | None
    latent_scale: float = 1.0
    sampling_calls: int = 0

    @property
    def modalities(self) -> list[str]:
        return self.model.modalities

    def _resolve(self, name: str) -> int:
        if name not in self.modalities:
            raise KeyError(f"unknown modality {name!r}; registered: {', '.join(self.modalities)}")
        return self.modalities.index(name)

    def condition(self, z_src: np.ndarray, target: str) -> np.ndarray:
        if self.model.spade is None:
            return z_src
        with no_grad():
            return self.model.restyle(Tensor(z_src), target).data

    def translate_batch(self, x_src: np.ndarray, targets, seed: int = 0) -> dict[str, np.ndarray]:
        """``x_src`` is (N, D, H, W) or (D, H, W); returns target name -> volumes of the same shape."""
        x = np.asarray(x_src, dtype=np.float32)
        single = x.ndim == 3
        if single:
            x = x[None]
        for name in targets:
            self._resolve(name)
        with no_grad():
            z_src = self.model.encode(Tensor(x[:, None])).data
        out = {}
        for k, name in enumerate(targets):
            z_cond = self.condition(z_src, name)
            if self.diffusion is None:
                z0 = z_cond
            else:
                self.sampling_calls += 1
                y = one_hot(self._resolve(name), len(self.modalities))
                if self.diffusion.palette:
                    z0 = self.diffusion.sample(z_cond * self.latent_scale, y, seed=seed + k)
                else:
                    z0 = self.diffusion.sample(None, y, seed=seed + k, shape=z_cond.shape)
                z0 = z0 / self.latent_scale
            with no_grad():
                vol = self.model.decode_latent(Tensor(z0.astype(np.float32))).data[:, 0]
            out[name] = vol[0] if single else vol
        return out

    def translate(self, x_src: np.ndarray, targets, seed: int = 0) -> dict[str, np.ndarray]:
        return self.translate_batch(x_src, list(targets), seed)


def reconstruct(model: CompressionModel, x: np.ndarray) -> np.ndarray:
    """decode(regularize(encode(x))) without codebook updates, for (N, D, H, W) or (D, H, W)."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    with no_grad():
        vol = model.decode_latent(model.encode(Tensor(x[:, None]))).data[:, 0]
    return vol[0] if single else vol

