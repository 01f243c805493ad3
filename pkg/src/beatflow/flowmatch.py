"""Forward corruption, velocity targets, and the masked flow-matching loss.

The per-token path is linear: x^k = (1-k) x0 + k eps, so the regression
target for the velocity network is eps - x0 regardless of k.  Tokens at
k = 0 are clean context and contribute nothing to the loss; the mask is
what lets one sequence mix clean history with noised continuation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .schedules import ScheduleParams, path_coeffs, sample_training_schedule


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass
class NoisedSequence:
    """A corrupted token sequence together with the draws that produced it.

    tokens[t] = alpha(k_t) * clean[t] + sigma(k_t) * noise[t]; the noise is
    kept so the velocity target can be formed without re-sampling.
    """

    tokens: np.ndarray
    levels: np.ndarray
    noise: np.ndarray


def corrupt(clean: np.ndarray, levels: np.ndarray, rng: np.random.Generator) -> NoisedSequence:
    """Per-token Gaussian corruption along the linear path.

    clean has shape (..., T, D) and levels (..., T); the standard-normal
    draws are returned inside the result for target computation.
    """
    clean = np.asarray(clean, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    if clean.shape[:-1] != levels.shape:
        raise ValueError(f"shape mismatch: clean {clean.shape} vs levels {levels.shape}")
    pc = path_coeffs(levels)
    noise = rng.standard_normal(clean.shape)
    tokens = pc.alpha[..., None] * clean + pc.sigma[..., None] * noise
    return NoisedSequence(tokens=tokens, levels=levels, noise=noise)


def velocity_target(clean: np.ndarray, noise: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """dalpha * clean + dsigma * noise, which is noise - clean on the linear path."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch: clean {clean.shape} vs noise {noise.shape}")
    if clean.shape[:-1] != levels.shape:
        raise ValueError(f"shape mismatch: clean {clean.shape} vs levels {levels.shape}")
    pc = path_coeffs(levels)
    return pc.dalpha[..., None] * clean + pc.dsigma[..., None] * noise


def masked_fm_loss(v_pred: np.ndarray, v_target: np.ndarray, levels: np.ndarray) -> tuple[float, int]:
    """Squared error summed over tokens with k_t > 0.

    Returns (loss_sum, n_active).  Tokens at k = 0 contribute exactly zero;
    callers wanting a mean divide by n_active (guarding the empty case).
    """
    v_pred = np.asarray(v_pred, dtype=np.float64)
    v_target = np.asarray(v_target, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    if v_pred.shape != v_target.shape:
        raise ValueError(f"shape mismatch: v_pred {v_pred.shape} vs v_target {v_target.shape}")
    if v_pred.shape[:-1] != levels.shape:
        raise ValueError(f"shape mismatch: v_pred {v_pred.shape} vs levels {levels.shape}")
    active = levels > 0.0
    if not active.any():
        return 0.0, 0
    sq = np.sum((v_pred - v_target) ** 2, axis=-1)
    return float(np.sum(sq[active])), int(np.count_nonzero(active))


def masked_fm_loss_torch(
    v_pred: torch.Tensor,
    v_target: torch.Tensor,
    levels: torch.Tensor,
    reduction: str = "mean",
) -> torch.Tensor:
    """Differentiable mirror of masked_fm_loss.

    reduction "sum" gives the raw masked sum; "mean" divides by the active
    token count (zero active tokens give a zero loss either way).
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    mask = (levels > 0.0).to(v_pred.dtype)
    sq = ((v_pred - v_target) ** 2).sum(dim=-1)
    total = (sq * mask).sum()
    if reduction == "sum":
        return total
    n_active = mask.sum()
    return total / torch.clamp(n_active, min=1.0)


def training_step(
    model,
    optimizer: torch.optim.Optimizer,
    latents: np.ndarray,
    conds: np.ndarray,
    sched_params: ScheduleParams,
    rng: np.random.Generator,
    type_probs=(1 / 3, 1 / 3, 1 / 3),
    p_drop: float = 0.2,
    reduction: str = "mean",
) -> float:
    """One gradient step of hybrid-schedule flow matching.

    latents (B, T, Dz) and conds (B, T, Dc) are clean training chunks.  Each
    sequence draws its own schedule type and levels; with probability p_drop
    the whole sequence trains against the model's learned null condition so
    the unconditional branch used by guidance is covered.
    """
    latents = np.asarray(latents, dtype=np.float64)
    conds = np.asarray(conds, dtype=np.float64)
    B, T, _ = latents.shape
    levels = np.stack(
        [sample_training_schedule(T, type_probs, sched_params, rng)[2] for _ in range(B)]
    )
    seq = corrupt(latents, levels, rng)
    v_tgt = velocity_target(latents, seq.noise, levels)
    null_mask = rng.uniform(size=B) < p_drop

    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    x_t = torch.as_tensor(seq.tokens, dtype=dtype, device=device)
    k_t = torch.as_tensor(levels, dtype=dtype, device=device)
    c_t = torch.as_tensor(conds, dtype=dtype, device=device)
    tgt = torch.as_tensor(v_tgt, dtype=dtype, device=device)
    nm = torch.as_tensor(null_mask, device=device)

    v_pred = model(x_t, k_t, c_t, null_mask=nm)
    loss = masked_fm_loss_torch(v_pred, tgt, k_t, reduction=reduction)
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss {loss.item()!r} (levels min={levels.min():.3f} "
            f"max={levels.max():.3f}, |x| max={np.abs(seq.tokens).max():.3e})"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())
