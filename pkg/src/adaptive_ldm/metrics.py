"""Whole-volume image quality metrics: PSNR, NMSE and windowed SSIM."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

SSIM_WINDOW = 7


def _check_pair(x, ref) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"metric inputs differ in shape: {x.shape} vs {ref.shape}")
    return x, ref


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def psnr(x, ref, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    x, ref = _check_pair(x, ref)
    if peak <= 0:
        raise ValueError("psnr peak must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def nmse(x, ref) -> float:
    x, ref = _check_pair(x, ref)
    energy = float(np.sum(ref * ref))
    if energy == 0.0:
        raise ValueError("nmse reference is all zeros")
    return float(np.sum((x - ref) ** 2)) / energy


def _box_sums(v: np.ndarray, w: int) -> np.ndarray:
    """Sum over every w^3 window fully inside ``v`` (valid mode)."""
    s = np.pad(v, [(1, 0)] * 3).cumsum(0).cumsum(1).cumsum(2)
    return (
        s[w:, w:, w:] - s[:-w, w:, w:] - s[w:, :-w, w:] - s[w:, w:, :-w]
        + s[:-w, :-w, w:] + s[:-w, w:, :-w] + s[w:, :-w, :-w] - s[:-w, :-w, :-w]
    )


def ssim_map(x, ref, peak: float = 1.0, window: int = SSIM_WINDOW) -> np.ndarray:
    x, ref = _check_pair(x, ref)
    if x.ndim != 3:
        raise ValueError(f"ssim expects a 3-D volume, got shape {x.shape}")
    if min(x.shape) < window:
        raise ValueError(f"volume {x.shape} smaller than the {window}^3 ssim window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    n = float(window**3)
    mx = _box_sums(x, window) / n
    my = _box_sums(ref, window) / n
    # population (1/n) window moments
    vx = _box_sums(x * x, window) / n - mx * mx
    vy = _box_sums(ref * ref, window) / n - my * my
    cxy = _box_sums(x * ref, window) / n - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def ssim(x, ref, peak: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all valid uniform ``window``^3 windows at stride 1."""
    return float(np.mean(ssim_map(x, ref, peak, window)))


@dataclass
class MetricRow:
    subject_id: str
    src: str
    tar: str
    psnr: float
    nmse: float
    ssim: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, subject_id: str, src: str, tar: str, pred, ref) -> MetricRow:
        row = MetricRow(subject_id, src, tar, psnr(pred, ref), nmse(pred, ref), ssim(pred, ref))
        self.rows.append(row)
        return row

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name in ("psnr", "nmse", "ssim"):
            vals = np.array([getattr(r, name) for r in self.rows], dtype=np.float64)
            out[name] = (float(vals.mean()), float(vals.std()))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["subject_id", "src", "tar", "psnr", "nmse", "ssim"])
        for r in self.rows:
            writer.writerow([r.subject_id, r.src, r.tar, repr(r.psnr), repr(r.nmse), repr(r.ssim)])
        if self.rows:
            agg = self.aggregate()
            srcs = sorted({r.src for r in self.rows})
            tars = sorted({r.tar for r in self.rows})
            writer.writerow(
                ["mean±std", "|".join(srcs), "|".join(tars)]
                + [f"{agg[k][0]:.3f}±{agg[k][1]:.3f}" for k in ("psnr", "nmse", "ssim")]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        report = cls()
        for rec in csv.DictReader(io.StringIO(text)):
            if rec["subject_id"] == "mean±std":
                continue
            report.rows.append(MetricRow(rec["subject_id"], rec["src"], rec["tar"],
                                         float(rec["psnr"]), float(rec["nmse"]), float(rec["ssim"])))
        return report
