"""Dataset manifest: subjects, modalities and the train/test split."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


@dataclass
class DatasetManifest:
    subjects: list[str]
    modalities: list[str]
    split: dict[str, str] = field(default_factory=dict)  # subject -> "train" | "test"
    spec_hash: str = ""
    seeds: dict[str, int] = field(default_factory=dict)  # subject -> generator seed (phantoms)

    def modality_index(self, name: str) -> int:
        try:
            return self.modalities.index(name)
        except ValueError:
            raise KeyError(f"unknown modality {name!r}; registered: {', '.join(self.modalities)}") from None

    def subset(self, which: str) -> list[str]:
        return [s for s in self.subjects if self.split.get(s) == which]

    @property
    def train(self) -> list[str]:
        return self.subset("train")

    @property
    def test(self) -> list[str]:
        return self.subset("test")

    def to_json(self) -> str:
        records = [
            {"subject": s, "split": self.split.get(s, ""), **({"seed": self.seeds[s]} if s in self.seeds else {})}
            for s in self.subjects
        ]
        body = {"spec_hash": self.spec_hash, "modalities": self.modalities, "subjects": records}
        return json.dumps(body, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        body = json.loads(text)
        recs = body["subjects"]
        return cls(
            subjects=[r["subject"] for r in recs],
            modalities=list(body["modalities"]),
            split={r["subject"]: r["split"] for r in recs if r.get("split")},
            spec_hash=body.get("spec_hash", ""),
            seeds={r["subject"]: int(r["seed"]) for r in recs if "seed" in r},
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def split_dataset(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Seeded shuffle, then the first ``round(fraction * n)`` subjects train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_fraction}")
    n = len(manifest.subjects)
    if n < 2:
        raise ValueError(f"need at least 2 subjects to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    split = {}
    for rank, i in enumerate(order):
        split[manifest.subjects[i]] = "train" if rank < n_train else "test"
    return replace(manifest, split=split)
