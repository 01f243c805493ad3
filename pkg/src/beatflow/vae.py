"""Frame-wise motion autoencoder.

Maps a single MotionFrame to a small latent and back with a Gaussian
posterior.  The encoder and decoder are per-frame MLPs with no temporal
mixing, so the latent at tick t depends only on the frame at tick t; the
streaming loop's causality guarantee survives the round trip.

The module carries its own dataset normalization (per-channel mean/std
of the raw frames) and a post-hoc latent scale that whitens the posterior
means, so downstream consumers can treat latents as roughly unit-scale.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from beatflow.checkpoint import load_checkpoint, load_module_tensors, module_tensors, save_checkpoint
from beatflow.config import VaeConfig

_CKPT_KIND = "motion-vae"


class MotionVae(nn.Module):
    """Per-frame encoder/decoder with diagonal-Gaussian posterior."""

    def __init__(self, input_dim: int, cfg: VaeConfig, seed: int = 0):
        super().__init__()
        if input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if cfg.d_z < 1:
            raise ValueError("latent dim must be >= 1")
        if cfg.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        self.input_dim = int(input_dim)
        self.cfg = cfg
        h = cfg.hidden
        self.encoder = nn.Sequential(
            nn.Linear(input_dim, h), nn.GELU(),
            nn.Linear(h, h), nn.GELU(),
            nn.Linear(h, 2 * cfg.d_z),
        )
        self.decoder = nn.Sequential(
            nn.Linear(cfg.d_z, h), nn.GELU(),
            nn.Linear(h, h), nn.GELU(),
            nn.Linear(h, input_dim),
        )
        # dataset frame statistics and the post-training latent whitening scale
        self.register_buffer("frame_mean", torch.zeros(input_dim))
        self.register_buffer("frame_std", torch.ones(input_dim))
        self.register_buffer("latent_scale", torch.ones(cfg.d_z))
        self._reset_parameters(seed)

    def _reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            if p.dim() >= 2:
                with torch.no_grad():
                    p.normal_(0.0, 0.05, generator=gen)
            else:
                nn.init.zeros_(p)

    def set_frame_stats(self, mean: np.ndarray, std: np.ndarray):
        self.frame_mean.copy_(torch.as_tensor(mean, dtype=self.frame_mean.dtype))
        self.frame_std.copy_(torch.as_tensor(np.maximum(std, 1e-6), dtype=self.frame_std.dtype))

    def set_latent_scale(self, scale: np.ndarray):
        scale = np.clip(np.asarray(scale, dtype=np.float64), 1e-6, None)
        self.latent_scale.copy_(torch.as_tensor(scale, dtype=self.latent_scale.dtype))

    def normalize(self, frames: torch.Tensor) -> torch.Tensor:
        return (frames - self.frame_mean) / self.frame_std

    def denormalize(self, frames: torch.Tensor) -> torch.Tensor:
        return frames * self.frame_std + self.frame_mean

    def posterior(self, frames_norm: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(mu, logvar) of the un-whitened posterior over normalized frames."""
        out = self.encoder(frames_norm)
        return out[..., : self.cfg.d_z], out[..., self.cfg.d_z :]

    def decode_norm(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    # numpy-facing API: raw frames in, whitened latents out, raw frames back.

    def encode_frames(self, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Raw frames -> (mu, logvar) in the whitened latent coordinates."""
        frames = np.asarray(frames, dtype=np.float64)
        if not np.all(np.isfinite(frames)):
            raise ValueError("non-finite motion frame")
        single = frames.ndim == 1
        batch = np.atleast_2d(frames)
        if batch.shape[-1] != self.input_dim:
            raise ValueError(f"expected frame dim {self.input_dim}, got {batch.shape[-1]}")
        with torch.no_grad():
            x = self.normalize(torch.as_tensor(batch, dtype=torch.float32))
            mu, logvar = self.posterior(x)
            scale = self.latent_scale
            mu = (mu / scale).double().numpy()
            logvar = (logvar - 2.0 * torch.log(scale)).double().numpy()
        if single:
            return mu[0], logvar[0]
        return mu, logvar

    def decode_latents(self, z: np.ndarray) -> np.ndarray:
        """Whitened latents -> raw (de-normalized) frames."""
        z = np.asarray(z, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise ValueError("non-finite latent")
        single = z.ndim == 1
        batch = np.atleast_2d(z)
        if batch.shape[-1] != self.cfg.d_z:
            raise ValueError(f"expected latent dim {self.cfg.d_z}, got {batch.shape[-1]}")
        with torch.no_grad():
            zt = torch.as_tensor(batch, dtype=torch.float32) * self.latent_scale
            frames = self.denormalize(self.decode_norm(zt)).double().numpy()
        if single:
            return frames[0]
        return frames

    def save(self, path):
        meta = {
            "kind": _CKPT_KIND,
            "input_dim": self.input_dim,
            "d_z": self.cfg.d_z,
            "hidden": self.cfg.hidden,
            "kl_weight": self.cfg.kl_weight,
        }
        save_checkpoint(path, module_tensors(self), meta)

    @classmethod
    def load(cls, path) -> "MotionVae":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != _CKPT_KIND:
            raise ValueError(f"{path}: not a motion VAE checkpoint")
        cfg = VaeConfig(d_z=int(meta["d_z"]), hidden=int(meta["hidden"]),
                        kl_weight=float(meta["kl_weight"]))
        vae = cls(int(meta["input_dim"]), cfg)
        load_module_tensors(vae, tensors)
        return vae


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(N(mu, diag exp(logvar)) || N(0, I)), summed over dims."""
    return 0.5 * torch.sum(mu.pow(2) + logvar.exp() - 1.0 - logvar, dim=-1)


def vae_loss(
    vae: MotionVae,
    frames_norm: torch.Tensor,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(reconstruction, KL) terms on a batch of normalized frames.

    Reconstruction is the squared error summed over channels and averaged
    over the batch; KL is the closed-form Gaussian divergence, likewise
    batch-averaged.  The caller combines them as recon + kl_weight * kl.
    Pass explicit noise (same shape as mu) to make the loss a deterministic
    function of the parameters, e.g. for finite-difference checks.
    """
    if frames_norm.shape[0] == 0:
        raise ValueError("empty batch")
    mu, logvar = vae.posterior(frames_norm)
    if noise is None:
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    z = mu + torch.exp(0.5 * logvar) * noise
    recon = vae.decode_norm(z)
    recon_term = torch.sum((recon - frames_norm) ** 2, dim=-1).mean()
    kl_term = gaussian_kl(mu, logvar).mean()
    return recon_term, kl_term


def train_vae(
    frames: np.ndarray,
    cfg: VaeConfig,
    seed: int = 0,
    holdout_frac: float = 0.1,
) -> tuple[MotionVae, dict]:
    """Fit the frame-wise VAE on raw motion frames.

    Normalization stats come from the training split.  After optimization
    the per-dim std of posterior means over the training split is folded
    into the latent scale so whitened latents come out near unit variance.
    Returns the model and a report with the loss history and held-out
    reconstruction error relative to per-channel std.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 10:
        raise ValueError("need a (N, D) frame matrix with N >= 10")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(frames.shape[0])
    n_hold = max(1, int(round(holdout_frac * frames.shape[0])))
    hold, train = frames[perm[:n_hold]], frames[perm[n_hold:]]

    vae = MotionVae(frames.shape[1], cfg, seed=seed)
    vae.set_frame_stats(train.mean(axis=0), train.std(axis=0))
    x_train = vae.normalize(torch.as_tensor(train, dtype=torch.float32))
    x_hold = vae.normalize(torch.as_tensor(hold, dtype=torch.float32))

    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(vae.parameters(), lr=cfg.lr)
    history = []
    for step in range(cfg.train_steps):
        idx = torch.randint(0, x_train.shape[0], (min(cfg.batch_size, x_train.shape[0]),),
                            generator=gen)
        recon, kl = vae_loss(vae, x_train[idx], generator=gen)
        loss = recon + cfg.kl_weight * kl
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == cfg.train_steps - 1:
            history.append((step, float(loss.detach())))
    if any(not np.isfinite(v) for _, v in history):
        raise RuntimeError("VAE training diverged")

    with torch.no_grad():
        mu_train, _ = vae.posterior(x_train)
        vae.set_latent_scale(mu_train.double().numpy().std(axis=0))
        mu_hold, _ = vae.posterior(x_hold)
        rec = vae.decode_norm(mu_hold)
        # normalized channels have unit std, so this is RMS relative to std
        rel_rms = float(torch.sqrt(torch.mean((rec - x_hold) ** 2)))
        mu_std = (mu_hold.double().numpy() / vae.latent_scale.double().numpy()).std(axis=0)

    report = {
        "loss_history": history,
        "holdout_rel_rms": rel_rms,
        "latent_mu_std": mu_std.tolist(),
        "n_train": int(train.shape[0]),
        "n_holdout": int(hold.shape[0]),
    }
    return vae, report
