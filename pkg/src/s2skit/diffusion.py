"""DDPM noise schedules, forward noising, loss evaluator, and samplers.

The reverse model here predicts the previous noisy state directly (not the
injected noise); an adapter is provided for noise-predicting models.  The
training loss couples target and input through one shared base-noise draw so
the regression target is well defined.  Sampling walks a strided sub-schedule
of the full step ladder; with ``n_infer == N`` it degenerates to the exact
one-step-at-a-time reverse process.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

DEFAULT_N = 1000
BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention coefficients alpha_bar[0..N], alpha_bar[0] = 1."""

    N: int
    alpha_bar: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if self.N < 1 or ab.shape != (self.N + 1,):
            raise ValueError(f"alpha_bar must have length N+1={self.N + 1}")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if np.any(np.diff(ab) >= 0.0) or ab[-1] <= 0.0 or np.any(ab > 1.0):
            raise ValueError("alpha_bar must be strictly decreasing within (0, 1]")


def make_schedule(N: int = DEFAULT_N, kind: str = "linear") -> NoiseSchedule:
    """Build a noise schedule.

    ``linear``: beta ramps from 1e-4 to 0.02 over N steps (the usual DDPM
    default).  ``cosine``: squared-cosine signal retention with the standard
    0.008 offset, clipped so monotonicity holds.
    """
    if N < 1:
        raise ValueError("schedule needs N >= 1")
    if kind == "linear":
        betas = np.linspace(BETA_START, BETA_END, N)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    elif kind == "cosine":
        s = 0.008
        t = np.arange(N + 1) / N
        f = np.cos((t + s) / (1.0 + s) * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        alpha_bar = np.clip(alpha_bar, 1e-8, 1.0)
        alpha_bar[0] = 1.0
        # enforce strict decrease after clipping
        for i in range(1, N + 1):
            alpha_bar[i] = min(alpha_bar[i], alpha_bar[i - 1] * (1.0 - 1e-12))
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(N=N, alpha_bar=alpha_bar, kind=kind)


def forward_noise(z0: np.ndarray, n: int, schedule: NoiseSchedule,
                  rng: np.random.Generator, noise: np.ndarray | None = None) -> np.ndarray:
    """sqrt(abar_n) * z0 + sqrt(1 - abar_n) * eps; returns z0 itself at n = 0.

    ``noise`` overrides the rng draw so callers can share one base draw
    between coupled levels.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if not 0 <= n <= schedule.N:
        raise ValueError(f"step n={n} outside [0, {schedule.N}]")
    if n == 0:
        return z0.copy()
    eps = rng.standard_normal(z0.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    ab = schedule.alpha_bar[n]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


@dataclass
class Conditioning:
    """The two most recent latent states the denoiser conditions on."""

    z_t: np.ndarray
    z_tm1: np.ndarray


class Denoiser(Protocol):
    """Reverse-step model: take the latent at noise level n_from down to n_to."""

    def step(self, z: np.ndarray, n_from: int, n_to: int,
             cond: Conditioning | None, rng: np.random.Generator) -> np.ndarray: ...


@dataclass
class DiffusionSample:
    latent: np.ndarray
    member_id: int | None = None
    step_trace: list | None = None


def ddpm_loss(z_next_true: np.ndarray, denoiser: Denoiser, schedule: NoiseSchedule,
              n: int, cond: Conditioning | None, rng: np.random.Generator) -> float:
    """Mean squared error between the coupled noising target and the model step.

    Target and input are the level n-1 and level n noisings of the true next
    state generated from one shared base-noise draw (one forward trajectory).
    No latitude weighting is applied: this loss lives in latent space.
    """
    if not 1 <= n <= schedule.N:
        raise ValueError(f"loss step n={n} outside [1, {schedule.N}]")
    z_next_true = np.asarray(z_next_true, dtype=np.float64)
    base = rng.standard_normal(z_next_true.shape)
    target = forward_noise(z_next_true, n - 1, schedule, rng, noise=base)
    noisy = forward_noise(z_next_true, n, schedule, rng, noise=base)
    pred = denoiser.step(noisy, n, n - 1, cond, rng)
    return float(np.mean((target - pred) ** 2))


def inference_steps(N: int, n_infer: int) -> np.ndarray:
    """Strided descent N -> 0 with n_infer segments, endpoints included."""
    if n_infer < 1:
        raise ValueError("n_infer must be >= 1")
    if n_infer > N:
        raise ValueError(f"n_infer={n_infer} exceeds schedule length N={N}")
    steps = np.unique(np.round(np.linspace(0, N, n_infer + 1)).astype(int))[::-1]
    return steps


def sample(denoiser: Denoiser, schedule: NoiseSchedule, cond: Conditioning | None,
           rng: np.random.Generator, n_infer: int = 15, shape: tuple | None = None,
           start: np.ndarray | None = None, member_id: int | None = None,
           keep_trace: bool = False) -> DiffusionSample:
    """Ancestral sampling along a strided sub-schedule.

    Starts from a standard-normal latent at level N (or ``start`` if given)
    and applies ``denoiser.step`` down the stride to level 0.  Deterministic
    given the rng state.
    """
    steps = inference_steps(schedule.N, n_infer)
    if start is not None:
        z = np.asarray(start, dtype=np.float64).copy()
    else:
        if shape is None:
            if cond is None:
                raise ValueError("sample needs a shape, a start latent, or conditioning")
            shape = cond.z_t.shape
        z = rng.standard_normal(shape)
    trace = [] if keep_trace else None
    for i in range(len(steps) - 1):
        z = denoiser.step(z, int(steps[i]), int(steps[i + 1]), cond, rng)
        if trace is not None:
            trace.append((int(steps[i + 1]), z.copy()))
    return DiffusionSample(latent=z, member_id=member_id, step_trace=trace)


def _gaussian_step_moments(mu, sigma2, abar_n: float, abar_m: float):
    """Conditional mean gain/offset and variance of z_m given z_n when the
    clean data is N(mu, sigma2) per element under the forward process."""
    v_n = abar_n * sigma2 + (1.0 - abar_n)
    v_m = abar_m * sigma2 + (1.0 - abar_m)
    a = np.sqrt(abar_n / abar_m)
    gain = a * v_m / v_n
    var = v_m * (1.0 - abar_n / abar_m) / v_n
    return gain, var, v_n, v_m


@dataclass
class AnalyticGaussianDenoiser:
    """Exact reverse steps for element-wise N(mu, sigma^2) data.

    Under the forward process the pair (z_m, z_n) is jointly Gaussian, so the
    reverse conditional is available in closed form; chaining these steps
    reproduces the data law regardless of stride.  ``mu`` may be a scalar or
    an array broadcastable to the latent shape, which doubles as a reference
    forecast denoiser when mu is a conditioning-derived field.
    """

    mu: np.ndarray | float
    sigma: float
    schedule: NoiseSchedule

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("sigma must be > 0")

    def step(self, z: np.ndarray, n_from: int, n_to: int,
             cond: Conditioning | None, rng: np.random.Generator) -> np.ndarray:
        if not 0 <= n_to < n_from <= self.schedule.N:
            raise ValueError(f"invalid step {n_from} -> {n_to}")
        ab = self.schedule.alpha_bar
        abar_n, abar_m = float(ab[n_from]), float(ab[n_to])
        sigma2 = self.sigma ** 2
        gain, var, _, _ = _gaussian_step_moments(self.mu, sigma2, abar_n, abar_m)
        mean = np.sqrt(abar_m) * self.mu + gain * (z - np.sqrt(abar_n) * self.mu)
        return mean + np.sqrt(var) * rng.standard_normal(z.shape)


def analytic_gaussian_denoiser(mu, sigma: float, schedule: NoiseSchedule) -> AnalyticGaussianDenoiser:
    return AnalyticGaussianDenoiser(mu=mu, sigma=sigma, schedule=schedule)


@dataclass
class EpsilonAdapter:
    """Wrap a noise predictor eps(z, n, cond) into a previous-state predictor.

    Recovers the clean-state estimate from the predicted noise and samples
    the standard DDPM posterior for the (possibly strided) jump; no noise is
    injected on the final jump to level 0.
    """

    eps_model: Callable[[np.ndarray, int, Conditioning | None], np.ndarray]
    schedule: NoiseSchedule

    def step(self, z: np.ndarray, n_from: int, n_to: int,
             cond: Conditioning | None, rng: np.random.Generator) -> np.ndarray:
        if not 0 <= n_to < n_from <= self.schedule.N:
            raise ValueError(f"invalid step {n_from} -> {n_to}")
        ab = self.schedule.alpha_bar
        abar_n, abar_m = float(ab[n_from]), float(ab[n_to])
        eps_hat = self.eps_model(z, n_from, cond)
        x0_hat = (z - np.sqrt(1.0 - abar_n) * eps_hat) / np.sqrt(abar_n)
        if n_to == 0:
            return x0_hat
        a2 = abar_n / abar_m
        s1_sq = 1.0 - a2
        prec = a2 / s1_sq + 1.0 / (1.0 - abar_m)
        var = 1.0 / prec
        mean = var * (np.sqrt(a2) * z / s1_sq + np.sqrt(abar_m) * x0_hat / (1.0 - abar_m))
        return mean + np.sqrt(var) * rng.standard_normal(z.shape)
