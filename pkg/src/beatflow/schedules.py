"""Noise-level algebra for per-token diffusion over a temporal horizon.

Every token in a sequence carries its own level k in [0, 1] (0 = clean,
1 = pure noise).  Training draws whole level vectors from one of three
shapes; streaming inference rebuilds the monotone and trapezoid shapes
around the current step each tick.  All functions here are pure and
pointwise in the token index, so a level at index t never depends on the
horizon length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEDULE_TYPES = ("random", "monotonic", "trapezoid")


@dataclass(frozen=True)
class PathCoeffs:
    """Coefficients of the linear probability path x^k = alpha*x0 + sigma*eps.

    alpha runs 1 -> 0 and sigma runs 0 -> 1 as k goes 0 -> 1; dalpha and
    dsigma are the (constant) derivatives with respect to k.
    """

    alpha: np.ndarray | float
    sigma: np.ndarray | float
    dalpha: np.ndarray | float
    dsigma: np.ndarray | float


@dataclass(frozen=True)
class ScheduleParams:
    """Geometry of the trapezoid level profile.

    window_len is the denoising ramp length, ctx_len the clean context kept
    immediately behind it, hist_ramp the number of tokens over which the
    distant past is re-noised back up to 1.
    """

    window_len: int
    ctx_len: int = 20
    hist_ramp: int = 20

    def __post_init__(self):
        if self.window_len < 1:
            raise ValueError(f"window_len must be >= 1, got {self.window_len}")
        if self.ctx_len < 0:
            raise ValueError(f"ctx_len must be >= 0, got {self.ctx_len}")
        if self.hist_ramp < 1:
            raise ValueError(f"hist_ramp must be >= 1, got {self.hist_ramp}")


def _check_levels(k):
    k = np.asarray(k, dtype=np.float64)
    if k.size and (np.min(k) < 0.0 or np.max(k) > 1.0):
        raise ValueError("noise level k outside [0, 1]")
    if k.size and not np.all(np.isfinite(k)):
        raise ValueError("noise level k must be finite")
    return k


def path_coeffs(k) -> PathCoeffs:
    """Linear (rectified) path: alpha = 1 - k, sigma = k.

    Satisfies the clean/noise boundary conditions alpha(0)=1, sigma(0)=0,
    alpha(1)=0, sigma(1)=1 and makes the velocity target eps - x0.
    Accepts scalars or arrays; raises on k outside [0, 1].
    """
    k = _check_levels(k)
    if k.ndim == 0:
        k = float(k)
        return PathCoeffs(alpha=1.0 - k, sigma=k, dalpha=-1.0, dsigma=1.0)
    return PathCoeffs(
        alpha=1.0 - k,
        sigma=k.copy(),
        dalpha=np.full_like(k, -1.0),
        dsigma=np.ones_like(k),
    )


def random_schedule(T: int, rng: np.random.Generator) -> np.ndarray:
    """T i.i.d. levels from U(0, 1)."""
    if T < 1:
        raise ValueError(f"schedule length must be >= 1, got {T}")
    return rng.uniform(0.0, 1.0, size=T)


def monotonic_level(t, tau: float, window_len: int):
    """Pointwise monotone ramp: clamp((t - (tau - l)) / l, 0, 1).

    Token indices t follow the 1-based convention where tau is the index of
    the newest (noisiest) token.  Tokens at or before tau - l are clean,
    tokens at or after tau are pure noise.
    """
    if window_len < 1:
        raise ValueError(f"window_len must be >= 1, got {window_len}")
    t = np.asarray(t, dtype=np.float64)
    return np.clip((t - (tau - window_len)) / window_len, 0.0, 1.0)


def monotonic_schedule(T: int, tau: float, window_len: int) -> np.ndarray:
    """Monotone ramp evaluated at t = 1..T."""
    if T < 1:
        raise ValueError(f"schedule length must be >= 1, got {T}")
    if not 0 <= tau <= T:
        raise ValueError(f"tau must lie in [0, T], got tau={tau}, T={T}")
    return monotonic_level(np.arange(1, T + 1), tau, window_len)


def history_level(t, tau: float, params: ScheduleParams):
    """Re-noising ramp for the distant past: clamp(((tau-ctx-l) - t)/ramp, 0, 1)."""
    t = np.asarray(t, dtype=np.float64)
    start = tau - params.ctx_len - params.window_len
    return np.clip((start - t) / params.hist_ramp, 0.0, 1.0)


def trapezoid_level(t, tau: float, params: ScheduleParams):
    """Pointwise trapezoid: elementwise max of the history and monotone ramps."""
    k_hist = history_level(t, tau, params)
    k_mono = monotonic_level(t, tau, params.window_len)
    return np.maximum(k_hist, k_mono)


def trapezoid_schedule(T: int, tau: float, params: ScheduleParams) -> np.ndarray:
    """Trapezoid profile evaluated at t = 1..T."""
    if T < 1:
        raise ValueError(f"schedule length must be >= 1, got {T}")
    if not 0 <= tau <= T:
        raise ValueError(f"tau must lie in [0, T], got tau={tau}, T={T}")
    return trapezoid_level(np.arange(1, T + 1), tau, params)


def sample_training_schedule(
    T: int,
    type_probs,
    params: ScheduleParams,
    rng: np.random.Generator,
) -> tuple[str, int | None, np.ndarray]:
    """Draw a schedule type from a categorical, then the level vector.

    For the monotone and trapezoid types the anchor step tau is drawn
    uniformly from the integers {0, ..., T}.  Returns (type tag, tau or
    None for the random type, levels).
    """
    probs = np.asarray(type_probs, dtype=np.float64)
    if probs.shape != (3,) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError(f"type_probs must be 3 non-negative values summing to 1, got {type_probs}")
    idx = rng.choice(3, p=probs)
    tag = SCHEDULE_TYPES[idx]
    if tag == "random":
        return tag, None, random_schedule(T, rng)
    tau = int(rng.integers(0, T + 1))
    if tag == "monotonic":
        return tag, tau, monotonic_schedule(T, tau, params.window_len)
    return tag, tau, trapezoid_schedule(T, tau, params)
