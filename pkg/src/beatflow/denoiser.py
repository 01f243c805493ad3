"""Windowed conditional velocity network.

A small transformer that maps (noised latent tokens, per-token noise
levels, per-token music conditions) to a velocity field.  Attention is
causal within the window so an output token never sees inputs to its
right, which is what makes the streaming loop strictly causal end to end.
Positions are encoded relative to the newest token so a sliding window
reuses the same embeddings every tick.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, load_module_tensors, module_tensors, save_checkpoint

_CKPT_KIND = "velocity-denoiser"


@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    t_max: int = 120
    d_z: int = 16
    d_c: int = 22
    k_dim: int = 32
    causal: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("d_model", "n_layers", "n_heads", "t_max", "d_z", "d_c", "k_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.k_dim % 2 != 0:
            raise ValueError("k_dim must be even (sin/cos pairs)")


def embed_level(k, dim: int = 32) -> np.ndarray:
    """Sinusoidal features of a noise level k in [0, 1].

    Frequencies grow linearly (omega_i = (i+1) * pi/2) so the embedding is
    smooth in k: ||e(k) - e(k')|| <= ~61 |k - k'| at dim 32.
    """
    if dim % 2 != 0:
        raise ValueError("dim must be even")
    k = np.asarray(k, dtype=np.float64)
    if k.size and (np.min(k) < 0.0 or np.max(k) > 1.0):
        raise ValueError("noise level k outside [0, 1]")
    omega = (np.arange(dim // 2, dtype=np.float64) + 1.0) * (math.pi / 2.0)
    phase = k[..., None] * omega
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def _embed_level_torch(k: torch.Tensor, dim: int) -> torch.Tensor:
    omega = (torch.arange(dim // 2, dtype=k.dtype, device=k.device) + 1.0) * (math.pi / 2.0)
    phase = k.unsqueeze(-1) * omega
    return torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1)


class _Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model),
        )

    def forward(self, h: torch.Tensor, attn_mask) -> torch.Tensor:
        a = self.ln1(h)
        a, _ = self.attn(a, a, a, attn_mask=attn_mask, need_weights=False)
        h = h + a
        h = h + self.mlp(self.ln2(h))
        return h


class DenoiserNet(nn.Module):
    """v(x^k, k, c) over a token window of length n <= t_max.

    Token, condition, and level features are concatenated and projected to
    d_model, a relative position embedding indexed by distance-from-newest
    is added, then causal self-attention blocks and a linear head produce a
    velocity per token.  A learned null-condition vector stands in wherever
    cond is absent (the unconditional branch of guidance).
    """

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.d_z + cfg.d_c + cfg.k_dim, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.t_max, cfg.d_model)
        self.null_cond = nn.Parameter(torch.zeros(cfg.d_c))
        self.blocks = nn.ModuleList([_Block(cfg.d_model, cfg.n_heads) for _ in range(cfg.n_layers)])
        self.out_ln = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.d_z)
        # dataset statistics applied to raw conditions before the net sees them
        self.register_buffer("cond_mean", torch.zeros(cfg.d_c))
        self.register_buffer("cond_std", torch.ones(cfg.d_c))
        self._reset_parameters(seed)
        self._recorded = None

    def _reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            if p.dim() >= 2:
                with torch.no_grad():
                    p.normal_(0.0, 0.02, generator=gen)
            elif "weight" in name:  # LayerNorm scales
                nn.init.ones_(p)
            else:
                nn.init.zeros_(p)

    def set_cond_stats(self, mean: np.ndarray, std: np.ndarray):
        self.cond_mean.copy_(torch.as_tensor(mean, dtype=self.cond_mean.dtype))
        self.cond_std.copy_(torch.as_tensor(np.maximum(std, 1e-8), dtype=self.cond_std.dtype))

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(
        self,
        x: torch.Tensor,
        levels: torch.Tensor,
        cond: torch.Tensor | None = None,
        null_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
            levels = levels.unsqueeze(0)
            if cond is not None:
                cond = cond.unsqueeze(0)
        B, n, _ = x.shape
        if n > self.cfg.t_max:
            raise ValueError(f"window length {n} exceeds capacity t_max={self.cfg.t_max}")
        if torch.min(levels) < 0.0 or torch.max(levels) > 1.0:
            raise ValueError("noise level outside [0, 1]")

        if cond is None:
            c = self.null_cond.expand(B, n, -1)
        else:
            c = (cond - self.cond_mean) / self.cond_std
            if null_mask is not None:
                c = torch.where(null_mask.view(B, 1, 1), self.null_cond.expand(B, n, -1), c)

        k_feat = _embed_level_torch(levels, self.cfg.k_dim)
        h = self.in_proj(torch.cat([x, c, k_feat], dim=-1))
        pos = torch.arange(n - 1, -1, -1, device=x.device)  # distance from newest token
        h = h + self.pos_emb(pos)

        mask = None
        if self.cfg.causal and n > 1:
            mask = torch.triu(torch.ones(n, n, dtype=torch.bool, device=x.device), diagonal=1)
        for blk in self.blocks:
            h = blk(h, mask)
        v = self.head(self.out_ln(h))
        if torch.is_grad_enabled():
            self._recorded = v
        if squeeze:
            v = v.squeeze(0)
        return v

    def backward(self, cotangent: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients of <cotangent, last recorded forward output>.

        Requires a forward pass run with gradients enabled; the graph is
        retained so repeated calls with the same cotangent agree exactly.
        """
        if self._recorded is None:
            raise RuntimeError("backward called without a recorded forward pass")
        out = self._recorded
        cot = torch.as_tensor(cotangent, dtype=out.dtype, device=out.device).reshape(out.shape)
        params = [p for _, p in sorted(self.named_parameters(), key=lambda kv: kv[0])]
        names = [name for name, _ in sorted(self.named_parameters(), key=lambda kv: kv[0])]
        grads = torch.autograd.grad(out, params, grad_outputs=cot, retain_graph=True, allow_unused=True)
        return {
            name: (torch.zeros_like(p) if g is None else g).detach().cpu().numpy().copy()
            for name, p, g in zip(names, params, grads)
        }

    def save(self, path):
        meta = {"kind": _CKPT_KIND, "config": dataclasses.asdict(self.cfg)}
        save_checkpoint(path, module_tensors(self), meta)

    @classmethod
    def load(cls, path) -> "DenoiserNet":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != _CKPT_KIND:
            raise ValueError(f"{path}: not a velocity denoiser checkpoint")
        net = cls(DenoiserConfig(**meta["config"]))
        load_module_tensors(net, tensors)
        return net

    def velocity(self, x: np.ndarray, levels: np.ndarray, cond: np.ndarray | None) -> np.ndarray:
        """Inference wrapper: numpy in, numpy out, no autograd."""
        dtype = next(self.parameters()).dtype
        device = next(self.parameters()).device
        with torch.no_grad():
            xt = torch.as_tensor(np.asarray(x), dtype=dtype, device=device)
            kt = torch.as_tensor(np.asarray(levels), dtype=dtype, device=device)
            ct = None
            if cond is not None:
                ct = torch.as_tensor(np.asarray(cond), dtype=dtype, device=device)
            v = self.forward(xt, kt, ct)
        return v.detach().cpu().numpy().astype(np.float64)
