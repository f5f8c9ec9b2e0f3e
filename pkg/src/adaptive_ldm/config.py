"""Run configuration: typed sections, presets, and a strict INI reader."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    deterministic: bool = True
    out_dir: str = "runs/desk"


@dataclass
class DatasetSection:
    kind: str = "phantom"  # "phantom" or "directory"
    data_dir: str = ""
    extent: int = 32
    modalities: tuple[str, ...] = ("A", "B", "C")
    n_subjects: int = 500
    train_fraction: float = 0.9
    split_seed: int = 0
    phantom_seed: int = 0
    smoothing: float = 1.0
    noise_std: float = 0.01


@dataclass
class ModelSection:
    channels: tuple[int, ...] = (32, 64, 64)
    res_blocks: tuple[int, ...] = (0, 1, 1)
    z_channels: int = 3
    codebook_size: int = 512
    beta_commit: float = 0.25
    ema_decay: float = 0.99
    reseed_after: int = 500
    disc_channels: int = 16
    spade_in: int = 16
    spade_res: tuple[int, ...] = (32, 32)
    spade_blocks: tuple[int, ...] = (32, 32, 32, 16)
    spade_hidden: int = 16
    unet_channels: tuple[int, ...] = (32, 64, 96)
    unet_attention_levels: tuple[int, ...] = (1, 2)
    unet_res_blocks: int = 1


@dataclass
class Stage1Section:
    steps: int = 2000
    lr: float = 1e-4
    weight_decay: float = 0.0
    w_recon: float = 1.0
    w_quant: float = 1.0
    w_adv: float = 0.1
    w_perceptual: float = 0.5
    w_cycle: float = 1.0
    kl_weight: float = 1e-6
    adv_warmup: int = 1000
    perceptual: bool = True
    perceptual_refresh: int = 2000
    image_translation: bool = True
    latent_translation: bool = False
    sequential_spade: bool = False  # train the style block only after the autoencoder, on frozen codec weights
    cycle_every: int = 1
    log_every: int = 1
    checkpoint_every: int = 0
    grad_clip: float = 1.0


@dataclass
class Stage2Section:
    steps: int = 4000
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.0
    timesteps: int = 300
    beta_start: float = 0.0015
    beta_end: float = 0.0195
    conditioning: bool = True
    latent_scale_subjects: int = 64
    log_every: int = 1
    checkpoint_every: int = 0
    grad_clip: float = 1.0


@dataclass
class AblationSection:
    use_diffusion: bool = True
    use_palette: bool = True
    use_spade: bool = True
    reg_type: str = "VQ"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    stage2: Stage2Section = field(default_factory=Stage2Section)
    ablation: AblationSection = field(default_factory=AblationSection)

    def validate(self) -> "RunConfig":
        ab = self.ablation
        if ab.reg_type not in ("VQ", "KL"):
            raise ConfigError(f"ablation.reg_type must be VQ or KL, got {ab.reg_type!r}")
        if ab.use_palette and not ab.use_diffusion:
            raise ConfigError("ablation: use_palette requires use_diffusion")
        if len(self.model.channels) != len(self.model.res_blocks):
            raise ConfigError("model.channels and model.res_blocks must have equal length")
        if len(self.dataset.modalities) < 2:
            raise ConfigError("dataset needs at least two modalities")
        if self.dataset.kind not in ("phantom", "directory"):
            raise ConfigError(f"dataset.kind must be phantom or directory, got {self.dataset.kind!r}")
        factor = 2 ** (len(self.model.channels) - 1)
        if self.dataset.extent % factor:
            raise ConfigError(f"dataset.extent {self.dataset.extent} not divisible by encoder factor {factor}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def model_spec(self) -> dict:
        """Everything a checkpoint must agree with to be loadable."""
        return {
            "model": asdict(self.model),
            "modalities": list(self.dataset.modalities),
            "reg_type": self.ablation.reg_type,
            "use_spade": self.ablation.use_spade,
            "use_palette": self.ablation.use_palette,
            "conditioning": self.stage2.conditioning,
            "timesteps": self.stage2.timesteps,
        }


PRESETS: dict[str, dict[str, dict]] = {
    "desk": {},
    "paper-scale": {
        "dataset": {"extent": 192, "modalities": ("T1", "T1ce", "T2", "FLAIR")},
        "model": {
            "channels": (256, 512, 512),
            "res_blocks": (2, 2, 2),
            "codebook_size": 8192,
            "disc_channels": 64,
            "spade_in": 128,
            "spade_res": (256, 256),
            "spade_blocks": (256, 256, 256, 128),
            "spade_hidden": 128,
            "unet_channels": (128, 256, 512),
        },
        "stage1": {"lr": 2e-6},
        "stage2": {"lr": 2e-6, "timesteps": 1000, "batch_size": 1},
    },
}

ABLATIONS = {
    "a": {"use_diffusion": True, "use_palette": False, "use_spade": False, "reg_type": "VQ"},
    "b": {"use_diffusion": True, "use_palette": True, "use_spade": False, "reg_type": "VQ"},
    "c": {"use_diffusion": False, "use_palette": False, "use_spade": True, "reg_type": "VQ"},
    "d": {"use_diffusion": True, "use_palette": True, "use_spade": True, "reg_type": "KL"},
    "ours": {"use_diffusion": True, "use_palette": True, "use_spade": True, "reg_type": "VQ"},
}


def _coerce(raw: str, annotation, where: str):
    hint = annotation
    origin = typing.get_origin(hint)
    text = raw.strip()
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if origin is tuple:
            inner = typing.get_args(hint)[0]
            items = [s.strip() for s in text.split(",") if s.strip()]
            return tuple(_coerce(s, inner, where) for s in items)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {hint}") from None
    raise ConfigError(f"{where}: unsupported field type {hint}")


def apply_overrides(cfg: RunConfig, overrides: dict[str, dict]) -> RunConfig:
    for section, values in overrides.items():
        if not hasattr(cfg, section):
            raise ConfigError(f"unknown config section [{section}]")
        sec = getattr(cfg, section)
        known = {f.name for f in fields(sec)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
        setattr(cfg, section, replace(sec, **values))
    return cfg


def preset(name: str = "desk") -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return apply_overrides(RunConfig(), PRESETS[name])


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = base if base is not None else RunConfig()
    overrides: dict[str, dict] = {}
    for section in parser.sections():
        if not hasattr(cfg, section):
            raise ConfigError(f"unknown config section [{section}]")
        types = typing.get_type_hints(type(getattr(cfg, section)))
        values = {}
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _coerce(raw, types[key], f"[{section}] {key}")
        overrides[section] = values
    return apply_overrides(cfg, overrides).validate()


def load_config(path: str | Path | None = None, preset_name: str = "desk") -> RunConfig:
    cfg = preset(preset_name)
    if path is None:
        return cfg.validate()
    return parse_config_text(Path(path).read_text(), cfg)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        lines.append(f"[{f.name}]")
        for key, value in asdict(getattr(cfg, f.name)).items():
            if isinstance(value, (tuple, list)):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def with_ablation(cfg: RunConfig, row: str) -> RunConfig:
    if row not in ABLATIONS:
        raise ConfigError(f"unknown ablation row {row!r}; choose from {', '.join(ABLATIONS)}")
    return apply_overrides(dataclasses.replace(cfg), {"ablation": ABLATIONS[row]}).validate()
