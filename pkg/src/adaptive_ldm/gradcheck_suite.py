"""The finite-difference battery run by ``adaptive-ldm gradcheck``.

Each case builds fresh inputs from a seed and returns ``(fn, inputs)``.
Cases look primitives up on the ``functional`` module at call time, so a
test can swap in a broken adjoint and watch the battery name it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, gradcheck
from .autodiff import functional as F
from .autoencoder import kl_regularize

F64_TOL = 1e-6
F32_TOL = 1e-4


def _t(rng, shape, dtype=np.float64, grad=True, positive=False, away_from_zero=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + 0.1)
    return Tensor(x.astype(dtype), requires_grad=grad)


def _elementwise(name, **kw):
    def build(rng, dtype):
        return (lambda x: getattr(F, name)(x)), [_t(rng, (2, 3, 4), dtype, **kw)]
    return build


def _binary(name, positive_b=False):
    def build(rng, dtype):
        a = _t(rng, (2, 3, 4), dtype)
        b = _t(rng, (3, 4), dtype, positive=positive_b)
        return (lambda a, b: getattr(F, name)(a, b)), [a, b]
    return build


def _conv(k, stride, pad, bias=True, c_in=2, c_out=3, extent=4):
    def build(rng, dtype):
        x = _t(rng, (2, c_in, extent, extent, extent), dtype)
        w = Tensor((rng.standard_normal((c_out, c_in, k, k, k)) * 0.3).astype(dtype), requires_grad=True)
        ins = [x, w]
        if bias:
            ins.append(_t(rng, (c_out,), dtype))
        return (lambda x, w, b=None: F.conv3d(x, w, b, stride, pad)), ins
    return build


def _group_norm(rng, dtype):
    x = _t(rng, (2, 4, 3, 3, 2), dtype)
    w = _t(rng, (4,), dtype)
    b = _t(rng, (4,), dtype)
    return (lambda x, w, b: F.group_norm(x, 2, w, b)), [x, w, b]


def _instance_stats(rng, dtype):
    def fn(h):
        mu, sigma = F.instance_stats(h)
        return F.concat([mu, sigma * 2.0], axis=1)
    return fn, [_t(rng, (2, 3, 2, 2, 2), dtype)]


def _attention(rng, dtype):
    return (lambda q, k, v: F.attention_core(q, k, v)), [_t(rng, (1, 2, 2), dtype), _t(rng, (1, 3, 2), dtype),
                                                       _t(rng, (1, 3, 2), dtype)]


def _softmax_chain(rng, dtype):
    return (lambda x: F.softmax(F.tanh(x) * 3.0, axis=-1) * F.exp(x * 0.5)), [_t(rng, (3, 4), dtype)]


def _linear(rng, dtype):
    return (lambda x, w, b: F.linear(x, w, b)), [_t(rng, (4, 3), dtype), _t(rng, (2, 3), dtype), _t(rng, (2,), dtype)]


def _matmul(rng, dtype):
    return (lambda a, b: F.matmul(a, b)), [_t(rng, (2, 3, 4), dtype), _t(rng, (4, 2), dtype)]


def _shape_ops(rng, dtype):
    def fn(x, y):
        h = F.transpose(F.reshape(x, (3, 2, 4)), (2, 0, 1))
        h = F.concat([h, F.broadcast_to(y, (4, 3, 2))], axis=2)
        return F.sum(F.index(h, (slice(1, 3), [0, 2])), axis=0) + F.mean(h)
    return fn, [_t(rng, (2, 3, 4), dtype), _t(rng, (1, 3, 1), dtype)]


def _upsample(rng, dtype):
    return (lambda x: F.upsample_nearest(x, 2)), [_t(rng, (1, 2, 2, 2, 2), dtype)]


def _losses(rng, dtype):
    a = _t(rng, (2, 3, 3), dtype, away_from_zero=True)
    b = Tensor(np.zeros((2, 3, 3), dtype=dtype))
    return (lambda a: F.l1_loss(a, b) + F.mse_loss(a, b) * 0.5), [a]


def _power(rng, dtype):
    return (lambda x: F.power(x, 1.5) + F.square(x)), [_t(rng, (3, 4), dtype, positive=True)]


def _kl(rng, dtype):
    eps = rng.standard_normal((1, 3, 2, 2, 2))

    def fn(mean, logvar):
        z, kl = kl_regularize(mean, logvar, eps=eps)
        return F.sum(z * z) + kl
    logvar = Tensor((rng.standard_normal((1, 3, 2, 2, 2)) * 0.3).astype(dtype), requires_grad=True)
    return fn, [_t(rng, (1, 3, 2, 2, 2), dtype), logvar]


def _spade(rng, dtype):
    from .spade import MSSpadeLayer, spade_apply

    layer = MSSpadeLayer(2, ["A", "B"], hidden=3, rng=np.random.default_rng(7), zero_init=False).to(dtype)
    h = _t(rng, (1, 2, 2, 2, 2), dtype)
    return (lambda h, *p: spade_apply(h, layer, "B")), [h] + layer.bank["B"].parameters()


def _time_mlp(rng, dtype):
    from .unet import TimeEmbedding, time_embed

    mod = TimeEmbedding(8, 16, np.random.default_rng(3)).to(dtype)
    return (lambda *p: time_embed(mod, [3, 17], 50)), mod.parameters()


def _micro_unet(rng, dtype):
    from .unet import UNet3D, UNetSpec, one_hot

    spec = UNetSpec(z_channels=2, channels=(8, 8), attention_levels=(1,), res_blocks=1, num_modalities=3,
                    timesteps=10, time_mult=2)
    net = UNet3D(spec, np.random.default_rng(11)).to(dtype)
    z = _t(rng, (1, 4, 4, 4, 4), dtype)
    y = one_hot(1, 3)
    return (lambda z, *p: net(z, 4, y)), [z] + net.parameters()


def _diffusion_loss(rng, dtype):
    from .diffusion import LatentDiffusion, build_schedule
    from .unet import UNet3D, UNetSpec, one_hot

    spec = UNetSpec(z_channels=2, channels=(8, 8), attention_levels=(1,), res_blocks=1, timesteps=5, time_mult=2)
    ld = LatentDiffusion(UNet3D(spec, np.random.default_rng(12)).to(dtype), build_schedule(5))
    z0 = rng.standard_normal((1, 2, 2, 2, 2))
    cond = rng.standard_normal((1, 2, 2, 2, 2))
    eps = rng.standard_normal((1, 2, 2, 2, 2))
    y = one_hot(0, 3)
    params = ld.denoiser.parameters()
    return (lambda *p: ld.training_loss(z0, cond, 3, y, eps)), params


@dataclass
class Case:
    name: str
    build: Callable
    dtypes: tuple = (np.float64, np.float32)
    max_entries: int | None = None


CASES = [
    Case("add", _binary("add")),
    Case("sub", _binary("sub")),
    Case("mul", _binary("mul")),
    Case("div", _binary("div", positive_b=True)),
    Case("neg", _elementwise("neg")),
    Case("power", _power),
    Case("exp", _elementwise("exp")),
    Case("log", _elementwise("log", positive=True)),
    Case("sqrt", _elementwise("sqrt", positive=True)),
    Case("abs", _elementwise("abs", away_from_zero=True)),
    Case("relu", _elementwise("relu", away_from_zero=True)),
    Case("leaky_relu", _elementwise("leaky_relu", away_from_zero=True)),
    Case("sigmoid", _elementwise("sigmoid")),
    Case("silu", _elementwise("silu")),
    Case("tanh", _elementwise("tanh")),
    Case("softmax", _softmax_chain),
    Case("shape_ops", _shape_ops),
    Case("matmul", _matmul),
    Case("linear", _linear),
    Case("conv3d_k3_s1", _conv(3, 1, 1)),
    Case("conv3d_k3_s2", _conv(3, 2, 1)),
    Case("conv3d_k4_s2", _conv(4, 2, 1)),
    Case("conv3d_k1", _conv(1, 1, 0)),
    Case("conv3d_k7_tiny", _conv(7, 1, 3, c_in=3, c_out=2, extent=2)),
    Case("conv3d_wide", _conv(3, 1, 1, c_in=6, c_out=2, extent=3)),
    Case("upsample_nearest", _upsample),
    Case("group_norm", _group_norm),
    Case("instance_stats", _instance_stats),
    Case("attention_core", _attention),
    Case("losses", _losses),
    Case("kl_regularize", _kl),
    Case("spade_apply", _spade),
    Case("time_embed", _time_mlp),
    Case("micro_unet", _micro_unet, dtypes=(np.float32,), max_entries=4),
    Case("diffusion_loss", _diffusion_loss, dtypes=(np.float64,), max_entries=4),
]


@dataclass
class CaseResult:
    name: str
    dtype: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def run_battery(cases=None, seed: int = 0, report: Callable[[str], None] | None = None) -> list[CaseResult]:
    results = []
    for case in cases or CASES:
        for dtype in case.dtypes:
            rng = np.random.default_rng(seed)
            fn, inputs = case.build(rng, dtype)
            tol = F64_TOL if dtype == np.float64 else F32_TOL
            start = time.perf_counter()
            err = gradcheck(fn, inputs, seed=seed, max_entries=case.max_entries).max_rel_error
            res = CaseResult(case.name, np.dtype(dtype).name, err, tol)
            results.append(res)
            if report:
                status = "PASS" if res.passed else "FAIL"
                report(f"{status} {case.name:<18} {res.dtype:<8} rel_err={err:.3e} tol={tol:.0e} "
                       f"({time.perf_counter() - start:.2f}s)")
    return results
