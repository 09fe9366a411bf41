"""Noise schedule and the forward/reverse diffusion primitives.

Conventions used throughout the package:
  * timesteps are 1-based, t in [1, T]; alpha_bar[0] == 1 by definition,
  * images live in [-1, 1] model range as float arrays of shape (H, W, C),
  * the noisy state at step t is  sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps,
  * one reverse step is
        (x_t - beta_t / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t) + sigma_t * z.

All functions are pure; RNG state is passed in explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatch, InvalidSchedule, ShapeMismatch, StepOutOfRange

SIGMA_MODES = ("beta", "beta_tilde")


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule with precomputed per-step quantities.

    Arrays are indexed 0..T-1 for steps 1..T; ``alpha_bars_prev[i]`` holds
    abar_{t-1} with abar_0 = 1.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False, default=None)
    alpha_bars: np.ndarray = field(repr=False, default=None)
    alpha_bars_prev: np.ndarray = field(repr=False, default=None)
    sigmas: np.ndarray = field(repr=False, default=None)
    sigma_mode: str = "beta"

    def abar(self, t: int) -> float:
        """abar_t for 0 <= t <= T (abar_0 == 1)."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


def make_linear_schedule(
    T: int,
    beta_start: float,
    beta_end: float,
    sigma_mode: str = "beta",
) -> NoiseSchedule:
    """Build a schedule with betas linearly interpolated over [beta_start, beta_end].

    Both endpoints are included; for T == 1 the single beta is beta_start.

    sigma_mode selects the reverse-step noise scale:
      * "beta":       sigma_t = sqrt(beta_t)
      * "beta_tilde": sigma_t = sqrt((1 - abar_{t-1}) / (1 - abar_t) * beta_t)

    Raises InvalidSchedule when T < 1 or the beta bounds leave (0, 1) or are
    not ordered.
    """
    if T < 1:
        raise InvalidSchedule(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidSchedule(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if sigma_mode not in SIGMA_MODES:
        raise InvalidSchedule(f"sigma_mode must be one of {SIGMA_MODES}")

    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars_prev = np.concatenate(([1.0], alpha_bars[:-1]))
    if sigma_mode == "beta":
        sigmas = np.sqrt(betas)
    else:
        sigmas = np.sqrt((1.0 - alpha_bars_prev) / (1.0 - alpha_bars) * betas)
    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        alpha_bars_prev=alpha_bars_prev,
        sigmas=sigmas,
        sigma_mode=sigma_mode,
    )


def _check_step(t: int, schedule: NoiseSchedule) -> None:
    if not 1 <= t <= schedule.T:
        raise StepOutOfRange(f"t={t} outside [1, {schedule.T}]")


def forward_sample(
    x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """Draw the noisy state at step t given clean data and noise.

    t may be a scalar or an integer array of shape (B,) matching leading
    batch axes of x0/eps.
    """
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {x0.shape} vs eps {eps.shape}")
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        _check_step(int(t_arr), schedule)
        ab = schedule.alpha_bars[int(t_arr) - 1]
    else:
        if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
            raise StepOutOfRange(f"t values outside [1, {schedule.T}]")
        ab = schedule.alpha_bars[t_arr - 1].reshape(
            (-1,) + (1,) * (x0.ndim - 1)
        )
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reverse_step(
    x_t: np.ndarray,
    eps_pred: np.ndarray,
    t: int,
    z: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One stochastic denoising step from x_t to x_{t-1}.

    The caller supplies z; pass z = 0 to make the step deterministic (the
    sampler does this at t == 1).
    """
    if x_t.shape != eps_pred.shape:
        raise ShapeMismatch(f"x_t {x_t.shape} vs eps_pred {eps_pred.shape}")
    z_arr = np.asarray(z)
    if z_arr.ndim and z_arr.shape != x_t.shape:
        raise ShapeMismatch(f"x_t {x_t.shape} vs z {z_arr.shape}")
    _check_step(t, schedule)
    i = t - 1
    coef = schedule.betas[i] / np.sqrt(1.0 - schedule.alpha_bars[i])
    mean = (x_t - coef * eps_pred) / np.sqrt(schedule.alphas[i])
    return mean + schedule.sigmas[i] * z_arr


def training_loss(
    x0_patches: np.ndarray,
    ir_patches: np.ndarray,
    logit_patches: np.ndarray,
    denoiser,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> float:
    """Noise-prediction objective on a batch of aligned patch triples.

    For each patch a step t ~ U[1, T] and eps ~ N(0, I) are drawn (t for the
    whole batch first, then eps in one draw), the noisy state is formed, and
    the result is mean((eps - denoiser(x_t, y, s, t))**2) over the batch and
    all elements.

    denoiser is any callable (x_t, y, s, t) -> eps_pred operating on batched
    arrays; trained networks are adapted via denoiser.as_batch_denoiser.
    """
    B = x0_patches.shape[0]
    if B == 0:
        raise EmptyBatch("no patches in batch")
    if not (x0_patches.shape[:3] == ir_patches.shape[:3] == logit_patches.shape[:3]):
        raise ShapeMismatch(
            f"patch sets disagree: {x0_patches.shape} / {ir_patches.shape} / "
            f"{logit_patches.shape}"
        )
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(x0_patches.shape).astype(x0_patches.dtype, copy=False)
    x_t = forward_sample(x0_patches, t, eps, schedule)
    eps_pred = denoiser(x_t, ir_patches, logit_patches, t)
    diff = eps_pred - eps
    return float(np.mean(np.square(diff, dtype=np.float64)))
