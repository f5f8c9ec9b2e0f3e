"""Synthetic co-registered multi-modal phantoms.

One random tissue-label field per subject; each modality maps the labels
through its own intensity lookup row, then the same Gaussian smoothing and
independently seeded noise are applied. Co-registration holds by
construction because every modality reads the identical label field.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from ..metrics import minmax_normalize

BACKGROUND, WHITE, GRAY, LESION = 0, 1, 2, 3
CLASS_NAMES = ("background", "white", "gray", "lesion")

# rows: modality, columns: background / white / gray / lesion
DEFAULT_MODALITIES = ("A", "B", "C")
DEFAULT_LUT = (
    (0.0, 0.85, 0.55, 0.35),
    (0.0, 0.35, 0.60, 0.95),  # lesion bright
    (0.0, 0.50, 0.75, 0.10),  # lesion suppressed
)


@dataclass(frozen=True)
class PhantomSpec:
    extent: int = 32
    n_classes: int = 4
    modalities: tuple[str, ...] = DEFAULT_MODALITIES
    lut: tuple[tuple[float, ...], ...] = DEFAULT_LUT
    smoothing: float = 1.0
    noise_std: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if len(self.lut) != len(self.modalities):
            raise ValueError(f"lookup table has {len(self.lut)} rows for {len(self.modalities)} modalities")
        for row in self.lut:
            if len(row) != self.n_classes:
                raise ValueError(f"lookup row {row} has {len(row)} entries for {self.n_classes} classes")
            if any(not 0.0 <= v <= 1.0 for v in row):
                raise ValueError(f"lookup row {row} leaves [0, 1]")
        if self.extent < 8:
            raise ValueError("phantom extent must be at least 8")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class VolumeSet:
    subject_id: str
    modalities: tuple[str, ...]
    volumes: dict[str, np.ndarray]
    labels: np.ndarray = field(repr=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.volumes[name]


def _ellipsoid(grid, center, radii) -> np.ndarray:
    z, y, x = grid
    return ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + (
        (x - center[2]) / radii[2]
    ) ** 2 <= 1.0


def label_field(extent: int, rng: np.random.Generator) -> np.ndarray:
    ax = np.linspace(-1.0, 1.0, extent)
    grid = np.meshgrid(ax, ax, ax, indexing="ij")
    labels = np.zeros((extent,) * 3, dtype=np.int8)

    center = rng.uniform(-0.06, 0.06, 3)
    radii = rng.uniform(0.62, 0.85, 3)
    brain = _ellipsoid(grid, center, radii)
    labels[brain] = GRAY

    inner = radii * rng.uniform(0.55, 0.72, 3)
    labels[_ellipsoid(grid, center + rng.uniform(-0.05, 0.05, 3), inner)] = WHITE
    # gray-matter islands inside the white core
    for _ in range(rng.integers(1, 4)):
        c = center + rng.uniform(-0.5, 0.5, 3) * inner
        labels[_ellipsoid(grid, c, rng.uniform(0.07, 0.15, 3)) & brain] = GRAY

    for _ in range(rng.integers(1, 3)):
        c = center + rng.uniform(-0.55, 0.55, 3) * radii
        labels[_ellipsoid(grid, c, rng.uniform(0.1, 0.2, 3)) & brain] = LESION
    return labels


def generate_phantom(spec: PhantomSpec, subject_seed: int, subject_id: str | None = None) -> VolumeSet:
    spec.validate()
    rng = np.random.default_rng([spec.seed, subject_seed])
    labels = label_field(spec.extent, rng)
    volumes = {}
    for m, name in enumerate(spec.modalities):
        lut = np.asarray(spec.lut[m], dtype=np.float64)
        vol = lut[labels]
        if spec.smoothing > 0:
            vol = gaussian_filter(vol, spec.smoothing, mode="constant")
        if spec.noise_std > 0:
            noise_rng = np.random.default_rng([spec.seed, subject_seed, m + 1])
            vol = vol + noise_rng.normal(0.0, spec.noise_std, vol.shape)
        volumes[name] = minmax_normalize(np.clip(vol, 0.0, None)).astype(np.float32)
    return VolumeSet(subject_id or f"sub-{subject_seed:04d}", tuple(spec.modalities), volumes, labels)
