import numpy as np
import pytest

from adaptive_ldm.checkpoint import Checkpoint, CheckpointError, load_checkpoint, tensor_table_hash
from adaptive_ldm.config import apply_overrides, with_ablation
from adaptive_ldm.training import (
    LossReport,
    NonFiniteLossError,
    Stage1Trainer,
    Stage2Trainer,
    load_translator,
    read_loss_log,
)


def snapshot(module):
    return {k: v.copy() for k, v in module.state_dict().items()}


def same_state(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# -- stage 1 -------------------------------------------------------------------------------


def test_total_is_weighted_sum_of_logged_terms(tiny_cfg):
    apply_overrides(tiny_cfg, {"stage1": {"adv_warmup": 0}})
    tr = Stage1Trainer(tiny_cfg)
    for _ in range(3):
        r = tr.step()
        assert all(v != 0 for v in r.components())
        assert r.total == pytest.approx(r.weighted_total(), rel=1e-5)


def test_adversarial_term_off_during_warmup(tiny_cfg):
    tr = Stage1Trainer(tiny_cfg)
    r = tr.step()
    assert r.adversarial == 0.0 and r.weights[2] == 0.0 and r.disc == 0.0


def test_generator_and_discriminator_updates_are_separate(tiny_cfg):
    apply_overrides(tiny_cfg, {"stage1": {"adv_warmup": 0}})
    tr = Stage1Trainer(tiny_cfg)
    pair = tr.sample_pair()
    _, terms, _, fakes, reals = tr.losses(*pair)
    ae, disc = snapshot(tr.model), snapshot(tr.disc)
    tr.disc_step(fakes, reals)
    assert same_state(ae, snapshot(tr.model))
    assert not same_state(disc, snapshot(tr.disc))

    apply_overrides(tiny_cfg, {"stage1": {"w_adv": 0.0}})
    tr = Stage1Trainer(tiny_cfg)
    disc = snapshot(tr.disc)
    tr.step()
    assert same_state(disc, snapshot(tr.disc))


def test_sequential_phases_freeze_the_other_part(tiny_cfg):
    apply_overrides(tiny_cfg, {"stage1": {"sequential_spade": True, "steps": 4}})
    tr = Stage1Trainer(tiny_cfg)
    style = snapshot(tr.model.spade)
    tr.step()
    assert tr.phase() == "codec"
    assert same_state(style, snapshot(tr.model.spade))
    tr.step_count = 2
    enc = snapshot(tr.model.encoder)
    tr.step()
    assert same_state(enc, snapshot(tr.model.encoder))
    assert not same_state(style, snapshot(tr.model.spade))


def test_zero_steps_checkpoints_initial_weights(tiny_cfg, tmp_path):
    tr = Stage1Trainer(tiny_cfg)
    init = tensor_table_hash(tr.state_tensors())
    reports = tr.run(0, tmp_path / "log.csv", tmp_path / "s1.ckpt")
    assert reports == []
    assert read_loss_log(tmp_path / "log.csv") == []
    ck = load_checkpoint(tmp_path / "s1.ckpt", "stage1", tiny_cfg.model_spec())
    assert ck.step == 0 and tensor_table_hash(ck.tensors) == init


def test_first_losses_deterministic(tiny_cfg, tmp_path):
    a = [r.total for r in Stage1Trainer(tiny_cfg).run(4)]
    b = [r.total for r in Stage1Trainer(tiny_cfg).run(4)]
    assert a == b
    apply_overrides(tiny_cfg, {"run": {"seed": 1}})
    assert [r.total for r in Stage1Trainer(tiny_cfg).run(4)] != a


def test_loss_log_rows(tiny_cfg, tmp_path):
    reports = Stage1Trainer(tiny_cfg).run(3, tmp_path / "log.csv")
    rows = read_loss_log(tmp_path / "log.csv")
    assert [r["step"] for r in rows] == [0, 1, 2]
    for row, rep in zip(rows, reports):
        assert row["total"] == rep.total
        assert row["w_recon"] == 1.0


def test_non_finite_loss_reports_step(tiny_cfg):
    tr = Stage1Trainer(tiny_cfg)
    tr.step()
    bad = np.full((16, 16, 16), np.nan, dtype=np.float32)
    with pytest.raises(NonFiniteLossError) as info:
        tr.step((bad, bad, "A", "B"))
    assert info.value.step == 1


def test_unknown_modality_in_pair(tiny_cfg):
    tr = Stage1Trainer(tiny_cfg)
    x = np.zeros((16, 16, 16), dtype=np.float32)
    with pytest.raises(KeyError):
        tr.step((x, x, "A", "Z"))


def test_loss_report_weighted_total():
    r = LossReport(1.0, 2.0, 3.0, 4.0, 5.0, total=0.0, weights=(1.0, 0.5, 0.0, 2.0, 1.0))
    assert r.weighted_total() == 1.0 + 1.0 + 0.0 + 8.0 + 5.0


# -- stage 2 ----------------------------------------------------------------------------------


@pytest.fixture
def stage1_ckpt(tiny_cfg):
    tr = Stage1Trainer(tiny_cfg)
    tr.run(2)
    return tr.checkpoint()


def test_stage2_rejects_wrong_stage(tiny_cfg, stage1_ckpt):
    wrong = Checkpoint("stage2", stage1_ckpt.spec, stage1_ckpt.tensors)
    with pytest.raises(CheckpointError):
        Stage2Trainer(tiny_cfg, wrong)


def test_stage2_rejects_mismatched_architecture(tiny_cfg, stage1_ckpt):
    apply_overrides(tiny_cfg, {"model": {"z_channels": 4}})
    with pytest.raises(CheckpointError):
        Stage2Trainer(tiny_cfg, stage1_ckpt)


def test_stage2_needs_diffusion(tiny_cfg, stage1_ckpt):
    with pytest.raises(ValueError):
        Stage2Trainer(with_ablation(tiny_cfg, "c"), stage1_ckpt)


def test_latent_scale_is_inverse_std(tiny_cfg, stage1_ckpt):
    tr = Stage2Trainer(tiny_cfg, stage1_ckpt)
    z = np.concatenate([tr.latents(s).ravel() for s in tr.train_subjects[:2]]).astype(np.float64)
    assert tr.latent_scale == pytest.approx(1.0 / z.std(), rel=1e-12)
    assert tr.checkpoint().latent_scale == tr.latent_scale


def test_initial_noise_loss_near_one(tiny_cfg, stage1_ckpt):
    apply_overrides(tiny_cfg, {"stage2": {"batch_size": 8}})
    tr = Stage2Trainer(tiny_cfg, stage1_ckpt)
    z_tar, z_cond, t, y, eps = tr.batch()
    loss = float(tr.diffusion.training_loss(z_tar, z_cond, t, y, eps).data)
    # the output convolution starts at zero, so the first prediction is all zeros
    assert loss == pytest.approx(float(np.mean(eps.astype(np.float64) ** 2)), rel=1e-5)
    assert abs(loss - 1.0) < 0.1


def test_stage2_keeps_stage1_frozen(tiny_cfg, stage1_ckpt, tmp_path):
    tr = Stage2Trainer(tiny_cfg, stage1_ckpt)
    before = tensor_table_hash(tr.model.state_dict())
    den = snapshot(tr.diffusion.denoiser)
    losses = tr.run(3, tmp_path / "l2.csv")
    assert len(losses) == 3 and all(np.isfinite(losses))
    assert tensor_table_hash(tr.model.state_dict()) == before == tr.frozen_hash
    assert not same_state(den, snapshot(tr.diffusion.denoiser))
    assert tr.checkpoint().extra["stage1_hash"] == before


def test_stage2_detects_tampering(tiny_cfg, stage1_ckpt):
    tr = Stage2Trainer(tiny_cfg, stage1_ckpt)
    tr.model.decoder.parameters()[0].data[...] += 1.0
    with pytest.raises(RuntimeError):
        tr.assert_frozen()


# -- translation -----------------------------------------------------------------------------


@pytest.fixture
def translator(tiny_cfg, stage1_ckpt):
    tr = Stage2Trainer(tiny_cfg, stage1_ckpt)
    tr.run(1)
    return load_translator(tiny_cfg, stage1_ckpt, tr.checkpoint()), tr


def test_translate_all_targets_including_source(translator):
    tl, tr = translator
    x = tr.source.volumes(tr.manifest.test[0])["A"]
    out = tl.translate(x, ["A", "B", "C"], seed=3)
    assert sorted(out) == ["A", "B", "C"]
    assert all(v.shape == x.shape for v in out.values())
    assert tl.sampling_calls == 3
    again = tl.translate(x, ["A", "B", "C"], seed=3)
    assert all(out[k].tobytes() == again[k].tobytes() for k in out)


def test_translate_rejects_unknown_modality(translator):
    tl, _ = translator
    with pytest.raises(KeyError, match="registered"):
        tl.translate(np.zeros((16, 16, 16)), ["Q"])


def test_translate_batch_matches_shapes(translator):
    tl, _ = translator
    out = tl.translate_batch(np.zeros((2, 16, 16, 16)), ["B"])
    assert out["B"].shape == (2, 16, 16, 16)


def test_missing_stage2_checkpoint(tiny_cfg, stage1_ckpt):
    with pytest.raises(CheckpointError, match="stage2"):
        load_translator(tiny_cfg, stage1_ckpt, None)


def test_no_diffusion_row_never_samples(tiny_cfg):
    cfg = with_ablation(tiny_cfg, "c")
    tr = Stage1Trainer(cfg)
    tr.run(1)
    tl = load_translator(cfg, tr.checkpoint(), None)
    tl.translate(np.zeros((16, 16, 16)), ["A", "B", "C"])
    assert tl.sampling_calls == 0


@pytest.mark.parametrize("row,palette", [("a", False), ("b", True)])
def test_palette_rows_change_denoiser_input(tiny_cfg, row, palette):
    cfg = with_ablation(tiny_cfg, row)
    tr = Stage1Trainer(cfg)
    assert tr.model.spade is None
    s2 = Stage2Trainer(cfg, tr.checkpoint())
    z = cfg.model.z_channels
    assert s2.diffusion.denoiser.spec.in_channels == (2 * z if palette else z)
    assert np.isfinite(s2.step())


def test_kl_row_trains(tiny_cfg):
    cfg = with_ablation(tiny_cfg, "d")
    tr = Stage1Trainer(cfg)
    assert tr.model.quantizer is None
    r = tr.step()
    assert r.weights[1] == cfg.stage1.kl_weight
    assert np.isfinite(r.total)
