"""Command line: gen-data, train-ae, train-ldm, translate, evaluate, gradcheck."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, dump_config, load_config, with_ablation
from .data.source import DataError
from .data.volume_io import VolumeFormatError, load_nifti, load_raw, save_raw
from .metrics import MetricReport

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="INI run configuration")
    parser.add_argument("--preset", choices=["desk", "paper-scale"], default="desk")
    parser.add_argument("--seed", type=int, help="override [run] seed")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
    parser.add_argument("--out", type=Path, help="output directory (default: [run] out_dir)")
    parser.add_argument("--ablation", choices=["a", "b", "c", "d", "ours"], help="apply a preset ablation row")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptive-ldm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write phantom volumes and a manifest")
    _common(p)
    p.add_argument("--subjects", type=int, help="override [dataset] n_subjects")

    p = sub.add_parser("train-ae", help="stage 1: autoencoder, codebook and style block")
    _common(p)
    p.add_argument("--steps", type=int, help="override [stage1] steps")

    p = sub.add_parser("train-ldm", help="stage 2: latent denoiser on a frozen stage-1 model")
    _common(p)
    p.add_argument("--steps", type=int, help="override [stage2] steps")
    p.add_argument("--stage1", type=Path, help="stage-1 checkpoint (default OUT/stage1.ckpt)")

    p = sub.add_parser("translate", help="translate one source volume into target modalities")
    _common(p)
    p.add_argument("input", type=Path, help="source volume (.rvol, .nii, .nii.gz)")
    p.add_argument("--src", required=True, help="source modality name")
    p.add_argument("--tar", nargs="+", required=True, help="target modality names")
    p.add_argument("--stage1", type=Path)
    p.add_argument("--stage2", type=Path)
    p.add_argument("--slices", action="store_true", help="also export mid-slice PGM images")

    p = sub.add_parser("evaluate", help="PSNR / NMSE / SSIM of predictions against references")
    _common(p)
    p.add_argument("predictions", type=Path)
    p.add_argument("references", type=Path)
    p.add_argument("--csv", type=Path, help="output CSV (default OUT/metrics.csv)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable primitive")
    _common(p)
    return parser


def resolve_config(args) -> RunConfig:
    if args.config is not None and not args.config.is_file():
        raise ConfigError(f"config file not found: {args.config}")
    cfg = load_config(args.config, args.preset)
    run = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.deterministic:
        run["deterministic"] = True
    if args.out is not None:
        run["out_dir"] = str(args.out)
    if run:
        cfg = apply_overrides(cfg, {"run": run})
    if args.ablation:
        cfg = with_ablation(cfg, args.ablation)
    return cfg.validate()


def out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.run.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary portable graymap of a 2-D array in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    pixels = np.round(img * 255).astype(np.uint8)
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def export_slices(volume: np.ndarray, stem: Path) -> list[Path]:
    d, h, w = volume.shape
    paths = [stem.with_name(stem.name + "_axial.pgm"), stem.with_name(stem.name + "_sagittal.pgm")]
    write_pgm(paths[0], volume[d // 2])
    write_pgm(paths[1], volume[:, :, w // 2])
    return paths


def plot_losses(csv_path: Path, svg_path: Path, columns) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .training import read_loss_log

    rows = read_loss_log(csv_path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if rows:
        steps = [r["step"] for r in rows]
        for col in columns:
            ax.plot(steps, [r[col] for r in rows], label=col, linewidth=1)
        ax.legend(fontsize=7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)


def load_volume(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"volume not found: {path}")
    if path.suffix == ".rvol":
        return load_raw(path)
    if path.name.endswith((".nii", ".nii.gz")):
        return load_nifti(path)[0]
    raise DataError(f"unrecognized volume format: {path}")


def cmd_gen_data(cfg: RunConfig, args) -> int:
    from .data.phantom import generate_phantom
    from .data.source import phantom_manifest
    from .pipeline import phantom_spec

    if args.subjects is not None:
        cfg = apply_overrides(cfg, {"dataset": {"n_subjects": args.subjects}})
    spec = phantom_spec(cfg)
    ds = cfg.dataset
    manifest = phantom_manifest(spec, ds.n_subjects, ds.train_fraction, ds.split_seed)
    root = out_dir(cfg) / "data"
    for subject in manifest.subjects:
        vs = generate_phantom(spec, manifest.seeds[subject], subject)
        folder = root / subject
        folder.mkdir(parents=True, exist_ok=True)
        for name, vol in vs.volumes.items():
            save_raw(vol, folder / f"{name}.rvol")
    manifest.save(root / "manifest.json")
    print(f"wrote {len(manifest.subjects)} subjects x {len(manifest.modalities)} modalities to {root}")
    return EXIT_OK


def cmd_train_ae(cfg: RunConfig, args) -> int:
    from .training import STAGE1_COLUMNS, Stage1Trainer

    out = out_dir(cfg)
    (out / "config.ini").write_text(dump_config(cfg))
    trainer = Stage1Trainer(cfg)
    steps = cfg.stage1.steps if args.steps is None else args.steps
    log = out / "stage1_losses.csv"
    reports = trainer.run(steps, log, out / "stage1.ckpt")
    plot_losses(log, out / "stage1_losses.svg", [c for c in STAGE1_COLUMNS if not c.startswith("w_") and c != "step"])
    if reports:
        print(f"stage 1: {len(reports)} steps, final total loss {reports[-1].total:.5f}")
    print(f"checkpoint: {out / 'stage1.ckpt'}")
    return EXIT_OK


def cmd_train_ldm(cfg: RunConfig, args) -> int:
    from .training import Stage2Trainer

    out = out_dir(cfg)
    stage1 = load_checkpoint(args.stage1 or out / "stage1.ckpt", stage="stage1", spec=cfg.model_spec())
    trainer = Stage2Trainer(cfg, stage1)
    steps = cfg.stage2.steps if args.steps is None else args.steps
    log = out / "stage2_losses.csv"
    losses = trainer.run(steps, log, out / "stage2.ckpt")
    plot_losses(log, out / "stage2_losses.svg", ["loss"])
    if losses:
        print(f"stage 2: {len(losses)} steps, final loss {losses[-1]:.5f}, latent scale {trainer.latent_scale:.5f}")
    print(f"checkpoint: {out / 'stage2.ckpt'}")
    return EXIT_OK


def cmd_translate(cfg: RunConfig, args) -> int:
    from .training import load_translator

    out = out_dir(cfg)
    mods = list(cfg.dataset.modalities)
    unknown = [m for m in [args.src, *args.tar] if m not in mods]
    if unknown:
        raise UsageError(f"unknown modality {', '.join(unknown)}; registered: {', '.join(mods)}")
    spec = cfg.model_spec()
    stage1 = load_checkpoint(args.stage1 or out / "stage1.ckpt", stage="stage1", spec=spec)
    stage2 = None
    if cfg.ablation.use_diffusion:
        stage2 = load_checkpoint(args.stage2 or out / "stage2.ckpt", stage="stage2", spec=spec)
    translator = load_translator(cfg, stage1, stage2)
    x = load_volume(args.input)
    results = translator.translate(x, args.tar, seed=cfg.run.seed)
    dest = out / "translate"
    dest.mkdir(parents=True, exist_ok=True)
    stem = args.input.name.split(".")[0]
    for name, vol in results.items():
        path = dest / f"{stem}_{args.src}_to_{name}.rvol"
        save_raw(vol, path)
        print(f"{name}: {path}")
        if args.slices:
            for p in export_slices(vol, path.with_suffix("")):
                print(f"  slice: {p}")
    return EXIT_OK


def _volume_files(root: Path) -> dict[str, dict[str, Path]]:
    out: dict[str, dict[str, Path]] = {}
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        files = {p.name[: -len(".rvol")]: p for p in sorted(folder.glob("*.rvol"))}
        if files:
            out[folder.name] = files
    return out


def evaluate_dirs(pred_root: Path, ref_root: Path) -> MetricReport:
    """``pred_root/<subject>/<src>_to_<tar>.rvol`` (or ``<tar>.rvol``) against ``ref_root/<subject>/<tar>.rvol``."""
    preds, refs = _volume_files(pred_root), _volume_files(ref_root)
    missing = sorted(set(preds) ^ set(refs))
    if missing:
        raise DataError(f"subject ids differ between predictions and references: {', '.join(missing)}")
    report = MetricReport()
    for subject, files in preds.items():
        for stem, path in files.items():
            src, _, tar = stem.partition("_to_")
            tar = tar or src
            if tar not in refs[subject]:
                raise DataError(f"{subject}: no reference volume for modality {tar!r}")
            x, ref = load_raw(path), load_raw(refs[subject][tar])
            report.add(subject, src, tar, x, ref)
    return report


def cmd_evaluate(cfg: RunConfig, args) -> int:
    report = evaluate_dirs(args.predictions, args.references)
    path = args.csv or out_dir(cfg) / "metrics.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_csv())
    agg = report.aggregate()
    print(f"{len(report.rows)} rows -> {path}")
    for key in ("psnr", "nmse", "ssim"):
        m, s = agg[key]
        print(f"  {key}: {m:.3f}±{s:.3f}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    import time

    from .gradcheck_suite import run_battery

    start = time.perf_counter()
    results = run_battery(seed=cfg.run.seed, report=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - start:.1f}s")
    for r in failed:
        print(f"FAILED: {r.name} ({r.dtype})")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-ldm": cmd_train_ldm,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    from .training import NonFiniteLossError, deterministic

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = resolve_config(args)
        with deterministic(cfg.run.deterministic):
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, VolumeFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
