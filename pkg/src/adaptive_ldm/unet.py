"""Time-conditioned 3D UNet noise predictor with modality cross-attention."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .nn import Conv3d, GroupNorm, Linear, Module


@dataclass(frozen=True)
class UNetSpec:
    z_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 96)
    attention_levels: tuple[int, ...] = (1, 2)
    res_blocks: int = 1
    num_modalities: int = 3
    palette: bool = True
    conditioning: bool = True
    timesteps: int = 300
    time_mult: int = 4

    @property
    def in_channels(self) -> int:
        return 2 * self.z_channels if self.palette else self.z_channels

    @property
    def time_dim(self) -> int:
        return self.time_mult * self.channels[0]

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Standard transformer-style embedding of integer steps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


class TimeEmbedding(Module):
    def __init__(self, base: int, dim: int, rng: np.random.Generator):
        self.base = base
        self.fc1 = Linear(base, dim, rng=rng)
        self.fc2 = Linear(dim, dim, rng=rng)

    def forward(self, t) -> Tensor:
        emb = Tensor(sinusoidal_embedding(t, self.base).astype(self.fc1.weight.dtype))
        return self.fc2(F.silu(self.fc1(emb)))


def time_embed(module: TimeEmbedding, t, timesteps: int) -> Tensor:
    t = np.atleast_1d(np.asarray(t))
    if np.any(t < 1) or np.any(t > timesteps):
        raise ValueError(f"time step out of range [1, {timesteps}]: {t}")
    return module(t)


class TimeResBlock(Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, rng: np.random.Generator):
        self.norm1 = GroupNorm(c_in)
        self.conv1 = Conv3d(c_in, c_out, 3, rng=rng)
        self.time_proj = Linear(time_dim, c_out, rng=rng)
        self.norm2 = GroupNorm(c_out)
        self.conv2 = Conv3d(c_out, c_out, 3, rng=rng)
        self.skip = Conv3d(c_in, c_out, 1, rng=rng) if c_in != c_out else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        n, c = h.shape[:2]
        h = h + F.reshape(self.time_proj(F.silu(temb)), (n, c, 1, 1, 1))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class CrossAttention(Module):
    """Queries from the feature map, keys and values from the one-hot modality token."""

    def __init__(self, channels: int, context_dim: int, rng: np.random.Generator):
        self.norm = GroupNorm(channels)
        self.to_q = Linear(channels, channels, bias=False, rng=rng)
        self.to_k = Linear(context_dim, channels, bias=False, rng=rng)
        self.to_v = Linear(context_dim, channels, bias=False, rng=rng)
        self.proj = Linear(channels, channels, rng=rng)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        n, c, d, h, w = x.shape
        tokens = F.transpose(F.reshape(self.norm(x), (n, c, d * h * w)), (0, 2, 1))
        q = self.to_q(tokens)
        k = self.to_k(context)
        v = self.to_v(context)
        out = self.proj(F.attention_core(q, k, v))
        return x + F.reshape(F.transpose(out, (0, 2, 1)), (n, c, d, h, w))


def modality_context(y, num_modalities: int) -> np.ndarray:
    """Validate one-hot rows and return (N, 1, M) single-token contexts."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None]
    if y.shape[-1] != num_modalities:
        raise ValueError(f"one-hot has {y.shape[-1]} entries, expected {num_modalities}")
    ok = np.all((y == 0) | (y == 1), axis=-1) & (y.sum(axis=-1) == 1)
    if not np.all(ok):
        raise ValueError(f"malformed one-hot vector(s): {y[~ok]}")
    return y[:, None, :]


def one_hot(index, num_modalities: int) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(index))
    if np.any(idx < 0) or np.any(idx >= num_modalities):
        raise ValueError(f"modality index {index} out of range for {num_modalities} modalities")
    out = np.zeros((len(idx), num_modalities))
    out[np.arange(len(idx)), idx] = 1.0
    return out


class UNet3D(Module):
    def __init__(self, spec: UNetSpec = UNetSpec(), rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(5)
        self.spec = spec
        ch = list(spec.channels)
        self.time = TimeEmbedding(ch[0], spec.time_dim, rng)
        self.conv_in = Conv3d(spec.in_channels, ch[0], 3, rng=rng)

        def attn(level, c):
            if spec.conditioning and level in spec.attention_levels:
                return CrossAttention(c, spec.num_modalities, rng)
            return None

        self.down_blocks, self.down_attn, self.downsamplers = [], [], []
        skips = [ch[0]]
        c = ch[0]
        for i, c_out in enumerate(ch):
            for _ in range(spec.res_blocks):
                self.down_blocks.append(TimeResBlock(c, c_out, spec.time_dim, rng))
                self.down_attn.append(attn(i, c_out))
                c = c_out
                skips.append(c)
            if i < len(ch) - 1:
                self.downsamplers.append(Conv3d(c, c, 3, stride=2, pad=1, rng=rng))
                skips.append(c)
        self.mid1 = TimeResBlock(c, c, spec.time_dim, rng)
        self.mid_attn = attn(len(ch) - 1, c)
        self.mid2 = TimeResBlock(c, c, spec.time_dim, rng)

        self.up_blocks, self.up_attn, self.upsamplers = [], [], []
        for i in reversed(range(len(ch))):
            for _ in range(spec.res_blocks + 1):
                self.up_blocks.append(TimeResBlock(c + skips.pop(), ch[i], spec.time_dim, rng))
                self.up_attn.append(attn(i, ch[i]))
                c = ch[i]
            if i > 0:
                self.upsamplers.append(Conv3d(c, c, 3, rng=rng))
        self.norm_out = GroupNorm(c)
        self.conv_out = Conv3d(c, spec.z_channels, 3, rng=rng, zero_init=True)
        self.attention_calls = 0

    def _attend(self, block, h, context):
        if block is None:
            return h
        self.attention_calls += 1
        return block(h, context)

    def forward(self, z: Tensor, t, y) -> Tensor:
        return denoise_predict(self, z, t, y)


def denoise_predict(net: UNet3D, z: Tensor, t, y) -> Tensor:
    """Noise prediction for the concatenated (target-like, noisy) latents."""
    spec = net.spec
    if z.ndim != 5 or z.shape[1] != spec.in_channels:
        raise ValueError(
            f"denoiser expects {spec.in_channels} input channels (palette={spec.palette}), got shape {z.shape}"
        )
    levels = len(spec.channels)
    factor = 2 ** (levels - 1)
    if any(s % factor for s in z.shape[2:]):
        raise ValueError(f"latent extents {z.shape[2:]} must be divisible by {factor}")
    n = z.shape[0]
    t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (n,))
    temb = time_embed(net.time, t, spec.timesteps)
    context = None
    if spec.conditioning:
        ctx = modality_context(y, spec.num_modalities)
        if ctx.shape[0] == 1 and n > 1:
            ctx = np.repeat(ctx, n, axis=0)
        context = Tensor(ctx.astype(z.dtype))

    h = net.conv_in(z)
    hs = [h]
    block = 0
    for i in range(levels):
        for _ in range(spec.res_blocks):
            h = net.down_blocks[block](h, temb)
            h = net._attend(net.down_attn[block], h, context)
            hs.append(h)
            block += 1
        if i < levels - 1:
            h = net.downsamplers[i](h)
            hs.append(h)
    h = net.mid1(h, temb)
    h = net._attend(net.mid_attn, h, context)
    h = net.mid2(h, temb)
    block = 0
    for j, i in enumerate(reversed(range(levels))):
        for _ in range(spec.res_blocks + 1):
            h = net.up_blocks[block](F.concat([h, hs.pop()], axis=1), temb)
            h = net._attend(net.up_attn[block], h, context)
            block += 1
        if i > 0:
            h = net.upsamplers[j](F.upsample_nearest(h, 2))
    return net.conv_out(F.silu(net.norm_out(h)))
