"""Where training volumes come from: phantoms generated on demand, or a directory."""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import numpy as np

from .manifest import DatasetManifest, split_dataset
from .phantom import PhantomSpec, generate_phantom
from .volume_io import load_nifti, load_raw


class DataError(Exception):
    """Missing or inconsistent dataset."""


class _Cache:
    def __init__(self, size: int):
        self.size = size
        self.items: OrderedDict = OrderedDict()

    def get(self, key, make):
        if key in self.items:
            self.items.move_to_end(key)
            return self.items[key]
        value = make()
        self.items[key] = value
        if len(self.items) > self.size:
            self.items.popitem(last=False)
        return value


class PhantomSource:
    def __init__(self, spec: PhantomSpec, manifest: DatasetManifest, cache_size: int = 600):
        spec.validate()
        self.spec = spec
        self.manifest = manifest
        self._cache = _Cache(cache_size)

    def volumes(self, subject: str) -> dict[str, np.ndarray]:
        if subject not in self.manifest.seeds:
            raise DataError(f"subject {subject!r} not in manifest")
        seed = self.manifest.seeds[subject]
        return self._cache.get(subject, lambda: generate_phantom(self.spec, seed, subject).volumes)


class DirectorySource:
    """``root/<subject>/<modality>.rvol`` (or ``.nii`` / ``.nii.gz``)."""

    def __init__(self, root, manifest: DatasetManifest, cache_size: int = 600):
        self.root = Path(root)
        self.manifest = manifest
        self._cache = _Cache(cache_size)

    def _load(self, subject: str) -> dict[str, np.ndarray]:
        out = {}
        for name in self.manifest.modalities:
            out[name] = load_volume_file(self.root / subject, name)
        return out

    def volumes(self, subject: str) -> dict[str, np.ndarray]:
        return self._cache.get(subject, lambda: self._load(subject))


def load_volume_file(folder: Path, name: str) -> np.ndarray:
    for suffix in (".rvol", ".nii.gz", ".nii"):
        path = folder / f"{name}{suffix}"
        if path.exists():
            if suffix == ".rvol":
                return load_raw(path)
            return load_nifti(path)[0]
    raise DataError(f"no volume for modality {name!r} in {folder}")


def phantom_manifest(spec: PhantomSpec, n_subjects: int, train_fraction: float, split_seed: int) -> DatasetManifest:
    subjects = [f"sub-{i:04d}" for i in range(n_subjects)]
    manifest = DatasetManifest(
        subjects=subjects,
        modalities=list(spec.modalities),
        spec_hash=spec.digest(),
        seeds={s: i for i, s in enumerate(subjects)},
    )
    return split_dataset(manifest, train_fraction, split_seed)


def directory_manifest(root, modalities, train_fraction: float, split_seed: int) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data directory not found: {root}")
    saved = root / "manifest.json"
    if saved.exists():
        manifest = DatasetManifest.load(saved)
        if list(manifest.modalities) != list(modalities):
            raise DataError(
                f"manifest modalities {manifest.modalities} differ from config {list(modalities)}"
            )
        if manifest.split:
            return manifest
    else:
        subjects = sorted(p.name for p in root.iterdir() if p.is_dir())
        if not subjects:
            raise DataError(f"no subject folders in {root}")
        manifest = DatasetManifest(subjects=subjects, modalities=list(modalities))
    return split_dataset(manifest, train_fraction, split_seed)
