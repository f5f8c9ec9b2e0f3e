"""Multi-switchable spatially adaptive normalization in latent space.

Each SPADE layer keeps one modulation network per target modality (its
style bank entry); the trunk convolutions are shared. Selecting a target only
changes which bank entry is read.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .nn import Conv3d, InstanceNorm, Module


class Modulation(Module):
    """h -> (gamma residual, beta), both spatially varying, output convs zero-initialized."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator, zero_init: bool = True):
        self.shared = Conv3d(channels, hidden, 3, rng=rng)
        self.gamma = Conv3d(hidden, channels, 3, rng=rng, zero_init=zero_init)
        self.beta = Conv3d(hidden, channels, 3, rng=rng, zero_init=zero_init)

    def forward(self, h: Tensor) -> tuple[Tensor, Tensor]:
        a = F.relu(self.shared(h))
        return self.gamma(a), self.beta(a)


class MSSpadeLayer(Module):
    def __init__(self, channels: int, modalities: Sequence[str], hidden: int, rng: np.random.Generator,
                 zero_init: bool = True):
        self.channels = channels
        self.bank = {name: Modulation(channels, hidden, rng, zero_init) for name in modalities}

    def forward(self, h: Tensor, target: str) -> Tensor:
        return spade_apply(h, self, target)


def spade_apply(h: Tensor, layer: MSSpadeLayer, target: str) -> Tensor:
    """(1 + gamma_tar(h)) * (h - mu_c) / sigma_c + beta_tar(h), instance statistics per sample."""
    if target not in layer.bank:
        raise KeyError(f"modality {target!r} is not registered in the style bank ({', '.join(layer.bank)})")
    mu, sigma = F.instance_stats(h)
    n, c = h.shape[:2]
    view = (n, c) + (1,) * (h.ndim - 2)
    normalized = (h - F.reshape(mu, view)) / F.reshape(sigma, view)
    gamma, beta = layer.bank[target](h)
    return (gamma + 1.0) * normalized + beta


class SpadeResBlock(Module):
    """conv3 -> ReLU -> IN, twice, with a skip (the trunk's plain residual block)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = Conv3d(c_in, c_out, 3, rng=rng)
        self.norm1 = InstanceNorm(c_out)
        self.conv2 = Conv3d(c_out, c_out, 3, rng=rng)
        self.norm2 = InstanceNorm(c_out)
        self.skip = Conv3d(c_in, c_out, 1, rng=rng) if c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(F.relu(self.conv1(x)))
        h = self.norm2(F.relu(self.conv2(h)))
        return h + (x if self.skip is None else self.skip(x))


class SpadeBlock(Module):
    """conv3 -> ReLU -> MS-SPADE, twice, with a skip."""

    def __init__(self, c_in: int, c_out: int, modalities: Sequence[str], hidden: int,
                 rng: np.random.Generator, zero_init: bool = True):
        self.conv1 = Conv3d(c_in, c_out, 3, rng=rng)
        self.spade1 = MSSpadeLayer(c_out, modalities, hidden, rng, zero_init)
        self.conv2 = Conv3d(c_out, c_out, 3, rng=rng)
        self.spade2 = MSSpadeLayer(c_out, modalities, hidden, rng, zero_init)
        self.skip = Conv3d(c_in, c_out, 1, rng=rng) if c_in != c_out else None

    def forward(self, x: Tensor, target: str) -> Tensor:
        h = self.spade1(F.relu(self.conv1(x)), target)
        h = self.spade2(F.relu(self.conv2(h)), target)
        return h + (x if self.skip is None else self.skip(x))


class StyleTransfer(Module):
    """Latent restyling block: in conv (k7), residual blocks, SPADE blocks, out conv (k7).

    The stack predicts a residual on top of the source latent; with the
    output conv zero-initialized the block starts as the identity map.
    """

    def __init__(self, modalities: Sequence[str], z_channels: int = 3, in_channels: int = 16,
                 res_channels=(32, 32), spade_channels=(32, 32, 32, 16), hidden: int = 16,
                 rng: np.random.Generator | None = None, zero_init_modulation: bool = True,
                 identity_init: bool = True):
        rng = rng if rng is not None else np.random.default_rng(4)
        self.modalities = list(modalities)
        if len(self.modalities) < 1:
            raise ValueError("style bank needs at least one modality")
        self.conv_in = Conv3d(z_channels, in_channels, 7, rng=rng)
        self.norm_in = InstanceNorm(in_channels)
        self.res_blocks = []
        c = in_channels
        for c_out in res_channels:
            self.res_blocks.append(SpadeResBlock(c, c_out, rng))
            c = c_out
        self.spade_blocks = []
        for c_out in spade_channels:
            self.spade_blocks.append(SpadeBlock(c, c_out, self.modalities, hidden, rng, zero_init_modulation))
            c = c_out
        self.conv_out = Conv3d(c, z_channels, 7, rng=rng, zero_init=identity_init)
        self.last_trace: list[str] = []

    def resolve(self, target) -> str:
        if isinstance(target, (int, np.integer)):
            if not 0 <= target < len(self.modalities):
                raise KeyError(f"modality index {target} out of range; registered: {', '.join(self.modalities)}")
            return self.modalities[target]
        if target not in self.modalities:
            raise KeyError(f"modality {target!r} is not registered; registered: {', '.join(self.modalities)}")
        return target

    def forward(self, z: Tensor, target) -> Tensor:
        name = self.resolve(target)
        trace = ["in"]
        h = F.relu(self.norm_in(self.conv_in(z)))
        for block in self.res_blocks:
            h = block(h)
            trace.append("res")
        for block in self.spade_blocks:
            h = block(h, name)
            trace.append("spade")
        trace.append("out")
        self.last_trace = trace
        return z + self.conv_out(h)

    def trunk_parameters(self) -> list[Tensor]:
        bank_ids = {id(p) for p in self.bank_parameters()}
        return [p for p in self.parameters() if id(p) not in bank_ids]

    def bank_parameters(self, modality: str | None = None) -> list[Tensor]:
        out = []
        for block in self.spade_blocks:
            for layer in (block.spade1, block.spade2):
                for name, mod in layer.bank.items():
                    if modality is None or name == modality:
                        out.extend(mod.parameters())
        return out


def style_transfer(model: StyleTransfer, z_src: Tensor, target) -> Tensor:
    return model(z_src, target)
