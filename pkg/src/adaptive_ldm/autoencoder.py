"""Stage-1 compression model: 3D encoder/decoder, EMA vector quantizer,
KL alternative, and a 3D patch discriminator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .autodiff.tensor import make_node
from .nn import Conv3d, GroupNorm, Module


class ResBlock(Module):
    """GN -> ReLU -> conv3 -> GN -> ReLU -> conv3, plus a (projected) skip."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.norm1 = GroupNorm(c_in)
        self.conv1 = Conv3d(c_in, c_out, 3, rng=rng)
        self.norm2 = GroupNorm(c_out)
        self.conv2 = Conv3d(c_out, c_out, 3, rng=rng)
        self.skip = Conv3d(c_in, c_out, 1, rng=rng) if c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(F.relu(self.norm1(x)))
        h = self.conv2(F.relu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class Encoder(Module):
    def __init__(self, channels=(32, 64, 64), res_blocks=(0, 1, 1), z_channels: int = 3,
                 in_channels: int = 1, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        channels = list(channels)
        self.factor = 2 ** (len(channels) - 1)
        self.conv_in = Conv3d(in_channels, channels[0], 3, rng=rng)
        self.levels = []
        self.downs = []
        for i, c in enumerate(channels):
            self.levels.append([ResBlock(c, c, rng) for _ in range(res_blocks[i])])
            if i < len(channels) - 1:
                self.downs.append(Conv3d(c, channels[i + 1], 3, stride=2, pad=1, rng=rng))
        self.norm_out = GroupNorm(channels[-1])
        self.conv_out = Conv3d(channels[-1], z_channels, 3, rng=rng)

    def forward_features(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        feats = []
        h = self.conv_in(x)
        for i, blocks in enumerate(self.levels):
            for block in blocks:
                h = block(h)
            feats.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return self.conv_out(F.relu(self.norm_out(h))), feats

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_features(x)[0]


class Decoder(Module):
    def __init__(self, channels=(32, 64, 64), res_blocks=(0, 1, 1), z_channels: int = 3,
                 out_channels: int = 1, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(1)
        channels = list(channels)
        self.conv_in = Conv3d(z_channels, channels[-1], 3, rng=rng)
        self.levels = []
        self.ups = []
        for i in reversed(range(len(channels))):
            c = channels[i]
            self.levels.append([ResBlock(c, c, rng) for _ in range(res_blocks[i])])
            if i > 0:
                self.ups.append(Conv3d(c, channels[i - 1], 3, rng=rng))
        self.norm_out = GroupNorm(channels[0])
        self.conv_out = Conv3d(channels[0], out_channels, 3, rng=rng)

    def forward(self, z: Tensor) -> Tensor:
        h = self.conv_in(z)
        for i, blocks in enumerate(self.levels):
            for block in blocks:
                h = block(h)
            if i < len(self.ups):
                h = self.ups[i](F.upsample_nearest(h, 2))
        return F.sigmoid(self.conv_out(F.relu(self.norm_out(h))))


def straight_through(z: Tensor, values: np.ndarray) -> Tensor:
    """Forward emits ``values`` bitwise; backward passes the cotangent to ``z`` unchanged."""
    return make_node(np.ascontiguousarray(values, dtype=z.dtype), (z,), lambda g: (g,), "straight_through")


def nearest_codes(flat: np.ndarray, codebook: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Index of the L2-nearest codebook row per input row; ties go to the lowest index."""
    if codebook.shape[0] == 0:
        raise ValueError("cannot quantize against an empty codebook")
    flat = np.asarray(flat, dtype=np.float64)
    book = np.asarray(codebook, dtype=np.float64)
    out = np.empty(flat.shape[0], dtype=np.int64)
    for start in range(0, flat.shape[0], chunk):
        block = flat[start : start + chunk]
        d2 = ((block[:, None, :] - book[None, :, :]) ** 2).sum(axis=-1)
        out[start : start + chunk] = d2.argmin(axis=1)
    return out


@dataclass
class QuantizeOutput:
    z_q: Tensor
    indices: np.ndarray
    loss: Tensor
    counts: np.ndarray


class VectorQuantizer(Module):
    """Codebook of K d-dimensional entries learned by exponential moving averages.

    ``embedding``, the EMA statistics, per-entry usage counters and idle
    counters are buffers (saved in checkpoints, not touched by the optimizer).
    """

    def __init__(self, num_codes: int = 512, dim: int = 3, beta: float = 0.25, decay: float = 0.99,
                 reseed_after: int = 500, rng: np.random.Generator | None = None, eps: float = 1e-5):
        if num_codes < 2:
            raise ValueError(f"codebook needs at least 2 entries, got {num_codes}")
        self._rng = rng if rng is not None else np.random.default_rng(2)
        self.num_codes, self.dim = num_codes, dim
        self.beta, self.decay, self.eps = beta, decay, eps
        self.reseed_after = reseed_after
        init = self._rng.uniform(-1.0 / num_codes, 1.0 / num_codes, (num_codes, dim)).astype(np.float32)
        self.embedding = Tensor(init)
        self.ema_size = Tensor(np.ones(num_codes, dtype=np.float32))
        self.ema_sum = Tensor(init.copy())
        self.usage = Tensor(np.zeros(num_codes, dtype=np.float32))
        self.idle = Tensor(np.zeros(num_codes, dtype=np.float32))
        self.initialized = Tensor(np.zeros(1, dtype=np.float32))

    def forward(self, z: Tensor, update: bool | None = None) -> QuantizeOutput:
        if z.ndim != 5 or z.shape[1] != self.dim:
            raise ValueError(f"quantize expects (N, {self.dim}, D, H, W) latents, got {z.shape}")
        n, d, *spatial = z.shape
        flat = z.data.transpose(0, 2, 3, 4, 1).reshape(-1, d)
        update = self.training if update is None else update
        if update and not self.initialized.data[0]:
            self._init_from(flat)
        idx = nearest_codes(flat, self.embedding.data)
        book = self.embedding.data
        e = book[idx].reshape(n, *spatial, d).transpose(0, 4, 1, 2, 3)
        z_q = straight_through(z, e)
        codebook_term = float(np.mean((z.data.astype(np.float64) - e) ** 2))
        loss = F.mse_loss(z, Tensor(e)) * self.beta + codebook_term
        counts = np.bincount(idx, minlength=self.num_codes)
        if update:
            self.usage.data = self.usage.data + counts.astype(np.float32)
            self._ema_update(flat, idx, counts)
        return QuantizeOutput(z_q, idx.reshape(n, *spatial), loss, counts)

    def _init_from(self, flat: np.ndarray) -> None:
        pick = self._rng.integers(0, flat.shape[0], self.num_codes)
        jitter = self._rng.normal(0.0, 1e-3, (self.num_codes, self.dim))
        init = (flat[pick] + jitter).astype(np.float32)
        self.embedding.data = init
        self.ema_sum.data = init.copy()
        self.ema_size.data = np.ones(self.num_codes, dtype=np.float32)
        self.initialized.data = np.ones(1, dtype=np.float32)

    def _ema_update(self, flat: np.ndarray, idx: np.ndarray, counts: np.ndarray) -> None:
        k, decay = self.num_codes, self.decay
        sums = np.zeros((k, self.dim), dtype=np.float64)
        np.add.at(sums, idx, flat)
        size = decay * self.ema_size.data + (1.0 - decay) * counts
        ema_sum = decay * self.ema_sum.data + (1.0 - decay) * sums
        total = size.sum()
        smoothed = (size + self.eps) / (total + k * self.eps) * total
        book = ema_sum / smoothed[:, None]

        idle = np.where(counts > 0, 0.0, self.idle.data + 1.0)
        dead = np.flatnonzero(idle >= self.reseed_after)
        if dead.size:
            pick = self._rng.integers(0, flat.shape[0], dead.size)
            book[dead] = flat[pick]
            ema_sum[dead] = flat[pick]
            size[dead] = 1.0
            idle[dead] = 0.0
        self.embedding.data = book.astype(np.float32)
        self.ema_sum.data = ema_sum.astype(np.float32)
        self.ema_size.data = size.astype(np.float32)
        self.idle.data = idle.astype(np.float32)


def kl_regularize(mean: Tensor, logvar: Tensor, eps: np.ndarray | None = None,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Reparameterized sample and -1/2 * sum(1 + logvar - mean^2 - exp(logvar))."""
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal(mean.shape)
    eps = np.asarray(eps, dtype=mean.dtype)
    std = F.exp(logvar * 0.5)
    z = mean + std * Tensor(eps)
    kl = F.sum(1.0 + logvar - mean * mean - F.exp(logvar)) * -0.5
    return z, kl


class PatchDiscriminator(Module):
    """Three conv stages producing a coarse map of real/fake logits."""

    def __init__(self, channels: int = 16, in_channels: int = 1, rng: np.random.Generator | None = None,
                 slope: float = 0.2):
        rng = rng if rng is not None else np.random.default_rng(3)
        self.conv1 = Conv3d(in_channels, channels, 4, stride=2, pad=1, rng=rng)
        self.conv2 = Conv3d(channels, 2 * channels, 4, stride=2, pad=1, rng=rng)
        self.norm2 = GroupNorm(2 * channels)
        self.conv3 = Conv3d(2 * channels, 1, 3, rng=rng)
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        h = F.leaky_relu(self.conv1(x), self.slope)
        h = F.leaky_relu(self.norm2(self.conv2(h)), self.slope)
        return self.conv3(h)


def hinge_d_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    return (F.mean(F.relu(1.0 - real_logits)) + F.mean(F.relu(1.0 + fake_logits))) * 0.5


def hinge_g_loss(fake_logits: Tensor) -> Tensor:
    return -F.mean(fake_logits)
