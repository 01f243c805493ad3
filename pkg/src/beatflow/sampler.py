"""Streaming latent sampler with temporal guidance.

One call per 30 Hz tick: append a fresh noise token, re-noise the distant
past along the trapezoid profile, run the velocity net twice (once on the
corrupted buffer with music conditions, once on the clean buffer without),
blend the two fields, Euler-step the active window by delta = 1/l, and
emit the token that just reached the clean state.  Every emitted token has
received exactly l updates, one per tick, so output latency is fixed at l
ticks and throughput is one token per tick.

Token positions are global 1-based tick indices; the FIFO buffer holds the
most recent t_max of them.  Emitted tokens stay in the buffer as frozen
clean context (level 0) until they scroll out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from beatflow.config import SamplerConfig
from beatflow.schedules import ScheduleParams, history_level, monotonic_level


class StreamingError(RuntimeError):
    """Non-finite update during streaming; carries the state for post-mortems."""

    def __init__(self, msg: str, state: "StreamState"):
        super().__init__(msg)
        self.state = state


@dataclass(frozen=True)
class SamplerParams:
    """Resolved streaming-loop geometry; delta * window_len == 1 exactly."""

    window_len: int = 10
    ctx_len: int = 20
    hist_ramp: int = 20
    t_max: int = 120
    omega: float = 2.0
    frozen_noise: bool = False

    def __post_init__(self):
        if self.window_len < 1:
            raise ValueError("window_len must be >= 1")
        if self.window_len > self.t_max:
            raise ValueError("window_len must not exceed t_max")
        if self.ctx_len < 0 or self.hist_ramp < 1:
            raise ValueError("ctx_len must be >= 0 and hist_ramp >= 1")
        if (1.0 / self.window_len) * self.window_len != 1.0:
            # a constant field must integrate to exactly itself over l steps
            raise ValueError(
                f"window_len {self.window_len} breaks exact solver-step inversion"
            )

    @property
    def delta(self) -> float:
        return 1.0 / self.window_len

    @property
    def schedule(self) -> ScheduleParams:
        return ScheduleParams(self.window_len, self.ctx_len, self.hist_ramp)

    @classmethod
    def from_config(cls, cfg: SamplerConfig, omega: float | None = None) -> "SamplerParams":
        return cls(cfg.window_len, cfg.ctx_len, cfg.hist_ramp, cfg.t_max,
                   cfg.omega if omega is None else omega, cfg.frozen_noise)


@dataclass
class StreamState:
    """FIFO of latent tokens plus the bookkeeping the loop needs.

    buffer[i] lives at global position first_pos + i; tau is the tick count
    so far (the newest token's position).  Positions at or below
    frozen_through are clean context and are never updated again.
    """

    d_z: int
    d_c: int
    rng: np.random.Generator
    buffer: np.ndarray = field(default=None)  # (n, d_z) float64
    conds: np.ndarray = field(default=None)  # (n, d_c) float64
    steps: np.ndarray = field(default=None)  # (n,) updates received
    frozen_eps: np.ndarray = field(default=None)  # (n, d_z) per-token corruption noise
    first_pos: int = 1
    tau: int = 0
    frozen_through: int = 0
    emitted: int = 0
    model_calls: int = 0

    def __post_init__(self):
        if self.buffer is None:
            self.buffer = np.zeros((0, self.d_z))
        if self.conds is None:
            self.conds = np.zeros((0, self.d_c))
        if self.steps is None:
            self.steps = np.zeros(0, dtype=np.int64)
        if self.frozen_eps is None:
            self.frozen_eps = np.zeros((0, self.d_z))

    @property
    def positions(self) -> np.ndarray:
        return self.first_pos + np.arange(self.buffer.shape[0])

    def snapshot(self) -> "StreamState":
        return StreamState(
            d_z=self.d_z, d_c=self.d_c, rng=self.rng,
            buffer=self.buffer.copy(), conds=self.conds.copy(),
            steps=self.steps.copy(), frozen_eps=self.frozen_eps.copy(),
            first_pos=self.first_pos, tau=self.tau,
            frozen_through=self.frozen_through, emitted=self.emitted,
            model_calls=self.model_calls,
        )


def new_stream(params: SamplerParams, d_z: int, d_c: int, seed: int) -> StreamState:
    return StreamState(d_z=d_z, d_c=d_c, rng=np.random.default_rng(seed))


def warmup(state: StreamState, idle_latent: np.ndarray, n: int, params: SamplerParams,
           idle_cond: np.ndarray | None = None) -> StreamState:
    """Seed the buffer with n clean copies of an idle-pose latent.

    The copies occupy positions 1..n as already-emitted context, so the
    first real token is appended at position n+1 and the first n emissions
    replay the idle pose while the pipeline fills.  idle_cond, when given,
    is attached to every warmup token (e.g. the silence condition, so the
    conditional branch sees context rows like the ones it trained on);
    otherwise warmup conditions are zero.
    """
    if state.tau != 0 or state.buffer.shape[0] != 0:
        raise ValueError("warmup requires a fresh stream state")
    if n < 0 or n > params.t_max:
        raise ValueError(f"warmup size must lie in [0, t_max], got {n}")
    if n == 0:
        return state
    idle = np.asarray(idle_latent, dtype=np.float64)
    if idle.shape != (state.d_z,):
        raise ValueError(f"idle latent must have shape ({state.d_z},)")
    state.buffer = np.tile(idle, (n, 1))
    if idle_cond is None:
        state.conds = np.zeros((n, state.d_c))
    else:
        ic = np.asarray(idle_cond, dtype=np.float64)
        if ic.shape != (state.d_c,):
            raise ValueError(f"idle condition must have shape ({state.d_c},)")
        state.conds = np.tile(ic, (n, 1))
    state.steps = np.zeros(n, dtype=np.int64)
    state.frozen_eps = state.rng.standard_normal((n, state.d_z)) if params.frozen_noise \
        else np.zeros((n, state.d_z))
    state.tau = n
    state.frozen_through = n
    return state


def temporal_guidance(v_hist: np.ndarray, v_cond: np.ndarray, omega: float) -> np.ndarray:
    """v_hist + omega * (v_cond - v_hist), exact at the endpoints.

    omega == 1 returns v_cond and omega == 0 returns v_hist bit-for-bit;
    the algebraic form would otherwise pick up rounding noise.
    """
    v_hist = np.asarray(v_hist, dtype=np.float64)
    v_cond = np.asarray(v_cond, dtype=np.float64)
    if v_hist.shape != v_cond.shape:
        raise ValueError(f"shape mismatch: {v_hist.shape} vs {v_cond.shape}")
    if omega == 1.0:
        return v_cond.copy()
    if omega == 0.0:
        return v_hist.copy()
    return v_hist + omega * (v_cond - v_hist)


def corrupt_history(
    buffer: np.ndarray,
    k_trap: np.ndarray,
    n_hist: int,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Copy of the buffer with the first n_hist rows re-noised to k_trap.

    Rows past n_hist (the active window) are returned bit-identical.  The
    noise is drawn from rng unless an explicit array is supplied (the
    frozen-noise mode passes per-token noise held fixed across ticks).
    """
    buffer = np.asarray(buffer, dtype=np.float64)
    k_trap = np.asarray(k_trap, dtype=np.float64)
    if k_trap.shape != (buffer.shape[0],):
        raise ValueError("one level per buffer row required")
    if np.any(k_trap < 0) or np.any(k_trap > 1):
        raise ValueError("levels outside [0, 1]")
    out = buffer.copy()
    if n_hist <= 0:
        return out
    if noise is None:
        if rng is None:
            raise ValueError("need rng or explicit noise")
        noise = rng.standard_normal((n_hist, buffer.shape[1]))
    k = k_trap[:n_hist, None]
    out[:n_hist] = (1.0 - k) * buffer[:n_hist] + k * noise[:n_hist]
    return out


def stream_step(state: StreamState, cond: np.ndarray, model, params: SamplerParams):
    """Advance one tick; returns the emitted clean latent or None.

    cond is this tick's music-condition vector (d_c,).  The model must
    expose velocity(x, levels, cond) -> (n, d_z); cond=None selects its
    learned null conditioning.
    """
    cond = np.asarray(cond, dtype=np.float64)
    if cond.shape != (state.d_c,):
        raise ValueError(f"condition must have shape ({state.d_c},)")
    l = params.window_len
    state.tau += 1
    tau = state.tau

    eps = state.rng.standard_normal(state.d_z)
    state.buffer = np.vstack([state.buffer, eps])
    state.conds = np.vstack([state.conds, cond])
    state.steps = np.append(state.steps, 0)
    fresh_eps = state.rng.standard_normal(state.d_z) if params.frozen_noise else np.zeros(state.d_z)
    state.frozen_eps = np.vstack([state.frozen_eps, fresh_eps])
    if state.buffer.shape[0] > params.t_max:
        drop = state.buffer.shape[0] - params.t_max
        state.buffer = state.buffer[drop:]
        state.conds = state.conds[drop:]
        state.steps = state.steps[drop:]
        state.frozen_eps = state.frozen_eps[drop:]
        state.first_pos += drop

    pos = state.positions
    frozen = pos <= state.frozen_through
    k_mono = monotonic_level(pos, tau, l)
    k_mono[frozen] = 0.0
    k_hist = history_level(pos, tau, params.schedule)
    k_trap = np.maximum(k_hist, k_mono)
    n_hist = int(np.sum(pos <= tau - l))

    if params.frozen_noise:
        x_trap = corrupt_history(state.buffer, k_trap, n_hist, noise=state.frozen_eps)
    else:
        x_trap = corrupt_history(state.buffer, k_trap, n_hist, rng=state.rng)

    v_cond = model.velocity(x_trap, k_trap, state.conds)
    v_hist = model.velocity(state.buffer, k_mono, None)
    state.model_calls += 2
    v = temporal_guidance(v_hist, v_cond, params.omega)

    window = (pos > tau - l) & ~frozen
    state.buffer[window] -= v[window] * params.delta
    state.steps[window] += 1
    if not np.all(np.isfinite(state.buffer[window])):
        raise StreamingError(f"non-finite latent at tick {tau}", state.snapshot())

    emit_pos = tau - l + 1
    if emit_pos < 1:
        return None
    if emit_pos < state.first_pos:
        raise StreamingError(
            f"emission position {emit_pos} scrolled out of the buffer (t_max too small)",
            state.snapshot(),
        )
    emitted = state.buffer[emit_pos - state.first_pos].copy()
    state.frozen_through = max(state.frozen_through, emit_pos)
    state.emitted += 1
    return emitted
