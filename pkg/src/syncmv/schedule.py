"""Diffusion mathematics: noise schedules, the single-view process, the
synchronized multiview forward/reverse processes and loss, DDIM sampling,
and a closed-form Gaussian oracle used to verify the multiview math
independently of any learned model.

All schedule constants are kept in float64; per-step coefficients are handed
to array code as python floats so the state's dtype is preserved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Constants beta_t, alpha_t = 1-beta_t, alpha_bar_t = prod alpha_s.

    Arrays are indexed directly by timestep: beta[t] for t in 1..T (index 0
    unused and zero), alpha_bar[0] = 1 (empty product). sigma is the untrained
    reverse-step standard deviation, sigma_t^2 = beta_t.
    """

    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        b = self.beta[1:]
        if not (np.all(b > 0) and np.all(b < 1)):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(b) < 0):
            raise ValueError("betas must be non-decreasing")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")

    def check_t(self, t: int):
        if not 1 <= t <= self.steps:
            raise ValueError(f"timestep {t} outside [1, {self.steps}]")


def linear_schedule(steps: int = 1000, beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> NoiseSchedule:
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    beta = np.zeros(steps + 1)
    beta[1:] = np.linspace(beta_start, beta_end, steps)
    alpha = 1.0 - beta
    alpha[0] = 1.0
    alpha_bar = np.cumprod(alpha)
    sigma = np.zeros(steps + 1)
    sigma[1:] = np.sqrt(beta[1:])
    return NoiseSchedule(steps, beta, alpha, alpha_bar, sigma)


def desk_schedule(steps: int = 100) -> NoiseSchedule:
    """Short schedule with betas scaled by 1000/steps so total noise matches."""
    s = 1000.0 / steps
    return linear_schedule(steps, 1e-4 * s, 0.02 * s)


# ---------------------------------------------------------------------------
# forward process


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noised state sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; per view this is the
    independent multiview forward process."""
    sched.check_t(t)
    if x0.shape != eps.shape:
        raise ValueError(f"q_sample: x0 {x0.shape} vs eps {eps.shape}")
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def posterior_mean(x_t: np.ndarray, eps_hat: np.ndarray, t: int,
                   sched: NoiseSchedule) -> np.ndarray:
    """Reverse-step mean (x_t - beta_t/sqrt(1-ab_t) * eps_hat) / sqrt(alpha_t)."""
    sched.check_t(t)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"posterior_mean: x {x_t.shape} vs eps {eps_hat.shape}")
    beta = float(sched.beta[t])
    ab = float(sched.alpha_bar[t])
    alpha = float(sched.alpha[t])
    return (x_t - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)


# ---------------------------------------------------------------------------
# reverse process


class NoisePredictor(Protocol):
    def __call__(self, x: np.ndarray, t: int, y=None, ring=None) -> np.ndarray:
        """Predict the joint noise for state x of shape (..., N, C, H, W)."""


@dataclass
class MultiviewState:
    """All N views' current noisy images, synchronized at one timestep."""

    x: np.ndarray  # (..., N, C, H, W)
    t: int


def vanilla_ddpm_step(x: np.ndarray, eps_hat: np.ndarray, t: int,
                      sched: NoiseSchedule, z: np.ndarray | None) -> np.ndarray:
    """Single-view ancestral step: mu + sigma_t * z, no noise at t = 1."""
    mu = posterior_mean(x, eps_hat, t, sched)
    if t == 1 or z is None:
        return mu
    return mu + float(sched.sigma[t]) * z


def ddpm_step(state: MultiviewState, predictor: NoisePredictor, y, ring,
              sched: NoiseSchedule, rng: Rng) -> MultiviewState:
    """One synchronized ancestral step over every view simultaneously.

    The predictor is called once on the full joint state; per-view reverse
    noise is independent across views (diagonal variance factorization).
    """
    t = state.t
    sched.check_t(t)
    eps_hat = predictor(state.x, t, y=y, ring=ring)
    if eps_hat.shape != state.x.shape:
        raise ValueError(f"predictor output {eps_hat.shape} != state {state.x.shape}")
    mu = posterior_mean(state.x, eps_hat, t, sched)
    if t > 1:
        z = rng.normal(state.x.shape)
        x_next = mu + float(sched.sigma[t]) * z
    else:
        x_next = mu
    return MultiviewState(x_next, t - 1)


def ddim_step(state: MultiviewState, predictor: NoisePredictor, y, ring,
              sched: NoiseSchedule, t_next: int) -> MultiviewState:
    """Deterministic (eta = 0) step from state.t down to t_next >= 0."""
    t = state.t
    sched.check_t(t)
    if not 0 <= t_next < t:
        raise ValueError(f"invalid ddim step {t} -> {t_next}")
    eps_hat = predictor(state.x, t, y=y, ring=ring)
    ab = float(sched.alpha_bar[t])
    ab_next = float(sched.alpha_bar[t_next])
    x0_hat = (state.x - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    x_next = math.sqrt(ab_next) * x0_hat + math.sqrt(1.0 - ab_next) * eps_hat
    return MultiviewState(x_next, t_next)


def ddim_timesteps(total: int, steps: int) -> list[int]:
    """Uniform-stride visit list [T, T-s, ...] ending above 0 (final hop is to 0)."""
    steps = min(steps, total)
    stride = total // steps
    return [total - k * stride for k in range(steps)]


def sample(predictor: NoisePredictor, sched: NoiseSchedule, rng: Rng,
           n_views: int, image_shape=(3, 32, 32), y=None, ring=None,
           mode: str = "ddim", steps: int = 50, batch: int | None = None) -> np.ndarray:
    """Run the synchronized reverse process from pure noise to t = 0.

    All N views start from independent N(0, I); every step conditions on the
    full joint state. With batch set, a leading batch axis is carried through
    (the predictor must accept it).
    """
    shape = (n_views,) + tuple(image_shape)
    if batch is not None:
        shape = (batch,) + shape
    state = MultiviewState(rng.normal(shape), sched.steps)
    if mode == "ddpm":
        while state.t > 0:
            state = ddpm_step(state, predictor, y, ring, sched, rng)
    elif mode == "ddim":
        visits = ddim_timesteps(sched.steps, steps)
        for t, t_next in zip(visits, visits[1:] + [0]):
            assert state.t == t
            state = ddim_step(state, predictor, y, ring, sched, t_next)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return state.x


# ---------------------------------------------------------------------------
# training loss


class TrainPredictor(Protocol):
    def predict_view_train(self, x_all: np.ndarray, t: int, y, n: int) -> Tensor:
        """Tape-attached noise prediction for view n given the joint state."""


def training_loss(x0_all: np.ndarray, predictor: TrainPredictor, y,
                  sched: NoiseSchedule, rng: Rng):
    """Monte-Carlo loss term: noise all views, predict one view's noise.

    Draw order is fixed (t, eps, view) for reproducibility. Returns the
    scalar loss Tensor and the drawn (t, view).
    """
    n_views = x0_all.shape[0]
    t = rng.integer(1, sched.steps + 1)
    eps = rng.normal(x0_all.shape)
    x_t = q_sample(x0_all, t, eps, sched)
    n = rng.integer(0, n_views)
    eps_hat = predictor.predict_view_train(x_t, t, y, n)
    loss = T.mse(eps_hat, Tensor(eps[n]))
    return loss, {"t": t, "view": n}


# ---------------------------------------------------------------------------
# analytic Gaussian oracle


class GaussianOracle:
    """Exact minimizer of the multiview loss when x0 ~ N(0, Sigma).

    For x_t = sqrt(ab) x0 + sqrt(1-ab) eps the posterior mean of x0 is
    sqrt(ab) Sigma (ab Sigma + (1-ab) I)^-1 x_t, giving the optimal noise
    prediction eps* = sqrt(1-ab) (ab Sigma + (1-ab) I)^-1 x_t. Sigma covers
    the flattened joint (N*C*H*W) vector; small instances only.
    """

    def __init__(self, sched: NoiseSchedule, sigma: np.ndarray):
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ValueError("covariance must be square")
        if not np.allclose(sigma, sigma.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        eigval, eigvec = np.linalg.eigh(sigma)
        if eigval.min() <= 0:
            raise ValueError("covariance must be positive definite")
        self.sched = sched
        self.dim = sigma.shape[0]
        self._eigval = eigval
        self._eigvec = eigvec

    def __call__(self, x: np.ndarray, t: int, y=None, ring=None) -> np.ndarray:
        self.sched.check_t(t)
        ab = float(self.sched.alpha_bar[t])
        coef = math.sqrt(1.0 - ab) / (ab * self._eigval + (1.0 - ab))
        flat = x.reshape(-1, self.dim)
        eps = (flat @ self._eigvec) * coef @ self._eigvec.T
        return eps.reshape(x.shape).astype(x.dtype, copy=False)


def correlated_view_covariance(n_views: int, pixels: int, rho: float) -> np.ndarray:
    """Joint covariance with per-pixel cross-view correlation rho."""
    if not -1.0 / max(n_views - 1, 1) < rho < 1.0:
        raise ValueError(f"rho {rho} gives a non-PD covariance for {n_views} views")
    view_cov = (1.0 - rho) * np.eye(n_views) + rho * np.ones((n_views, n_views))
    return np.kron(view_cov, np.eye(pixels))


def independent_marginal(sigma: np.ndarray, n_views: int) -> np.ndarray:
    """Zero the cross-view blocks: the per-view-marginal baseline covariance."""
    p = sigma.shape[0] // n_views
    out = np.zeros_like(sigma)
    for v in range(n_views):
        out[v * p:(v + 1) * p, v * p:(v + 1) * p] = sigma[v * p:(v + 1) * p, v * p:(v + 1) * p]
    return out


def empirical_cross_view_correlation(x: np.ndarray) -> float:
    """Pooled per-pixel Pearson correlation between view pairs of (B, N, ...)."""
    b, n = x.shape[0], x.shape[1]
    flat = x.reshape(b, n, -1)
    flat = flat - flat.mean(axis=0, keepdims=True)
    corrs = []
    for i in range(n):
        for j in range(i + 1, n):
            num = np.sum(flat[:, i] * flat[:, j])
            den = math.sqrt(np.sum(flat[:, i] ** 2) * np.sum(flat[:, j] ** 2))
            corrs.append(num / den)
    return float(np.mean(corrs))


def cross_view_oracle_check(n_views: int = 2, size: int = 4, rho: float = 0.8,
                            n_samples: int = 5000, sched: NoiseSchedule | None = None,
                            seed: int = 0) -> dict:
    """Ancestral-sample with the joint oracle and with the independent-marginal
    baseline; report the cross-view correlation each recovers."""
    if sched is None:
        sched = desk_schedule()
    pixels = size * size
    sigma = correlated_view_covariance(n_views, pixels, rho)
    oracle = GaussianOracle(sched, sigma)
    baseline = GaussianOracle(sched, independent_marginal(sigma, n_views))
    shape = (1, size, size)
    x_joint = sample(oracle, sched, Rng(seed), n_views, shape, mode="ddpm", batch=n_samples)
    x_indep = sample(baseline, sched, Rng(seed), n_views, shape, mode="ddpm", batch=n_samples)
    return {
        "rho": rho,
        "corr_oracle": empirical_cross_view_correlation(x_joint),
        "corr_independent": empirical_cross_view_correlation(x_indep),
        "n_samples": n_samples,
    }
