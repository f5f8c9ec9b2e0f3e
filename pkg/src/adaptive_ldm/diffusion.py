"""Noise schedule, forward diffusion, the noise-prediction objective and the
ancestral DDPM sampler, all in latent space."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff import functional as F


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # betas[t - 1] is beta_t

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t) -> np.ndarray:
        return self.alpha_bars[np.asarray(t) - 1]

    def posterior_variance(self, t: int) -> float:
        """beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t, zero at t = 1."""
        if t == 1:
            return 0.0
        ab = self.alpha_bars
        return float((1.0 - ab[t - 2]) / (1.0 - ab[t - 1]) * self.betas[t - 1])


def build_schedule(T: int, beta_start: float = 0.0015, beta_end: float = 0.0195) -> NoiseSchedule:
    """Scaled-linear schedule: beta_t linear in sqrt(beta) between the endpoints, squared.

    The endpoints are stored verbatim so beta_1 and beta_T equal the inputs exactly.
    """
    if T < 1:
        raise ValueError(f"schedule needs T >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        return NoiseSchedule(np.array([beta_start], dtype=np.float64))
    frac = np.arange(T, dtype=np.float64) / (T - 1)
    betas = (np.sqrt(beta_start) + frac * (np.sqrt(beta_end) - np.sqrt(beta_start))) ** 2
    betas[0], betas[-1] = beta_start, beta_end
    # sqrt/square round trips can leave interior values an ulp outside the endpoints
    betas = np.maximum.accumulate(np.clip(betas, beta_start, beta_end))
    return NoiseSchedule(betas)


def _check_t(t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"time step {t} outside [1, {schedule.T}]")
    return t


def _per_sample(coef: np.ndarray, ndim: int) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim)) if coef.ndim else coef


def forward_diffuse(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``t`` is a scalar or one step per sample."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {eps.shape} differs from latent shape {z0.shape}")
    ab = _per_sample(schedule.alpha_bar(_check_t(t, schedule)), z0.ndim)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)


def predict_x0(z_t: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    ab = _per_sample(schedule.alpha_bar(_check_t(t, schedule)), np.ndim(z_t))
    return (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


EpsFn = Callable[[np.ndarray, int], np.ndarray]


def ddpm_sample_loop(eps_fn: EpsFn, shape: tuple, schedule: NoiseSchedule, seed: int,
                     z_init: np.ndarray | None = None, dtype=np.float32) -> np.ndarray:
    """Ancestral sampling from t = T down to 1 with sigma_t^2 = beta_tilde_t.

    ``eps_fn(z_t, t)`` returns the predicted noise at step ``t``.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape) if z_init is None else np.array(z_init, dtype=np.float64)
    ab = schedule.alpha_bars
    for t in range(schedule.T, 0, -1):
        beta = schedule.betas[t - 1]
        eps_hat = np.asarray(eps_fn(z.astype(dtype), t), dtype=np.float64)
        mean = (z - beta / np.sqrt(1.0 - ab[t - 1]) * eps_hat) / np.sqrt(1.0 - beta)
        if t > 1:
            z = mean + np.sqrt(schedule.posterior_variance(t)) * rng.standard_normal(shape)
        else:
            z = mean
    return z.astype(dtype)


class LatentDiffusion:
    """Couples a noise predictor with a schedule and the palette / conditioning wiring."""

    def __init__(self, denoiser, schedule: NoiseSchedule):
        if denoiser.spec.timesteps != schedule.T:
            raise ValueError(
                f"denoiser was built for T={denoiser.spec.timesteps}, schedule has T={schedule.T}"
            )
        self.denoiser = denoiser
        self.schedule = schedule

    @property
    def palette(self) -> bool:
        return self.denoiser.spec.palette

    def _input(self, z_cond, z_t):
        if self.palette:
            if z_cond is None:
                raise ValueError("palette wiring needs the target-like latent")
            return F.concat([z_cond, z_t], axis=1)
        return z_t

    def training_loss(self, z_tar: np.ndarray, z_tar_src: np.ndarray | None, t, y, eps: np.ndarray) -> Tensor:
        """Mean squared error between ``eps`` and the predicted noise."""
        if z_tar_src is not None and np.shape(z_tar_src) != np.shape(z_tar):
            raise ValueError(f"latent shapes differ: target {np.shape(z_tar)} vs target-like {np.shape(z_tar_src)}")
        z_t = forward_diffuse(z_tar, t, eps, self.schedule)
        cond = None if z_tar_src is None else Tensor(z_tar_src)
        eps_hat = self.denoiser(self._input(cond, Tensor(z_t)), t, y)
        return F.mse_loss(eps_hat, Tensor(eps.astype(eps_hat.dtype)))

    def sample(self, z_tar_src: np.ndarray | None, y, seed: int, shape: tuple | None = None,
               z_init: np.ndarray | None = None) -> np.ndarray:
        if shape is None:
            if z_tar_src is None:
                raise ValueError("sampling without a target-like latent needs an explicit shape")
            shape = np.shape(z_tar_src)
        cond = None if z_tar_src is None else Tensor(np.asarray(z_tar_src, dtype=np.float32))

        def eps_fn(z_t, t):
            with no_grad():
                return self.denoiser(self._input(cond, Tensor(z_t)), t, y).data

        return ddpm_sample_loop(eps_fn, tuple(shape), self.schedule, seed, z_init)
