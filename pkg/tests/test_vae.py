"""Frame-wise motion VAE: posterior, loss terms, training, persistence."""

import numpy as np
import pytest
import torch

from beatflow.config import VaeConfig
from beatflow.vae import MotionVae, gaussian_kl, train_vae, vae_loss

D = 20


def tiny_vae(seed=0, input_dim=6, d_z=3, hidden=8):
    return MotionVae(input_dim, VaeConfig(d_z=d_z, hidden=hidden), seed=seed)


def toy_frames(n=3000, d=D, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (2, n))
    basis = rng.normal(size=(3, d))
    clean = np.stack([a, np.sin(2 * a), a * b], axis=1) @ basis * 0.3
    return clean + rng.normal(size=(n, d)) * noise


class TestKl:
    def test_standard_posterior_zero(self):
        assert float(gaussian_kl(torch.zeros(1, 5), torch.zeros(1, 5))) == 0.0

    def test_unit_mean_half(self):
        mu = torch.tensor([[1.0, 0.0, 0.0]])
        assert float(gaussian_kl(mu, torch.zeros(1, 3))) == pytest.approx(0.5)

    def test_nonnegative(self):
        g = torch.Generator().manual_seed(0)
        mu = torch.randn(50, 7, generator=g)
        lv = torch.randn(50, 7, generator=g)
        assert torch.all(gaussian_kl(mu, lv) >= 0)


class TestEncodeDecode:
    def test_deterministic(self):
        vae = tiny_vae()
        f = np.random.default_rng(0).normal(size=(4, 6))
        m1, l1 = vae.encode_frames(f)
        m2, l2 = vae.encode_frames(f)
        assert np.array_equal(m1, m2) and np.array_equal(l1, l2)

    def test_frame_local_permutation(self):
        vae = tiny_vae()
        f = np.random.default_rng(1).normal(size=(8, 6))
        perm = np.random.default_rng(2).permutation(8)
        mu_all, _ = vae.encode_frames(f)
        mu_perm, _ = vae.encode_frames(f[perm])
        assert np.array_equal(mu_perm, mu_all[perm])

    def test_single_frame_shape(self):
        vae = tiny_vae()
        mu, lv = vae.encode_frames(np.zeros(6))
        assert mu.shape == (3,) and lv.shape == (3,)
        assert vae.decode_latents(mu).shape == (6,)

    def test_untrained_decode_finite(self):
        vae = tiny_vae()
        out = vae.decode_latents(np.random.default_rng(3).normal(size=(5, 3)))
        assert np.all(np.isfinite(out))

    def test_decode_continuous(self):
        vae = tiny_vae()
        z = np.random.default_rng(4).normal(size=3)
        base = vae.decode_latents(z)
        for eps in (1e-2, 1e-4):
            diff = np.abs(vae.decode_latents(z + eps) - base).max()
            assert diff < eps * 100

    def test_nonfinite_rejected(self):
        vae = tiny_vae()
        with pytest.raises(ValueError, match="non-finite"):
            vae.encode_frames(np.array([np.nan] * 6))
        with pytest.raises(ValueError, match="non-finite"):
            vae.decode_latents(np.array([np.inf, 0, 0]))

    def test_wrong_dims_rejected(self):
        vae = tiny_vae()
        with pytest.raises(ValueError):
            vae.encode_frames(np.zeros(7))
        with pytest.raises(ValueError):
            vae.decode_latents(np.zeros(4))


class TestLoss:
    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            vae_loss(tiny_vae(), torch.zeros(0, 6))

    def test_terms_finite_and_kl_nonneg(self):
        vae = tiny_vae()
        g = torch.Generator().manual_seed(0)
        x = torch.randn(16, 6, generator=g)
        recon, kl = vae_loss(vae, x, generator=g)
        assert torch.isfinite(recon) and torch.isfinite(kl) and kl >= 0

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        vae = tiny_vae(input_dim=4, d_z=2, hidden=5).double()
        g = torch.Generator().manual_seed(1)
        x = torch.randn(3, 4, generator=g, dtype=torch.float64)
        noise = torch.randn(3, 2, generator=g, dtype=torch.float64)

        def total():
            recon, kl = vae_loss(vae, x, noise=noise)
            return recon + 1e-3 * kl

        def total_value():
            return float(total().detach())

        loss = total()
        params = [p for _, p in sorted(vae.named_parameters(), key=lambda kv: kv[0])]
        grads = torch.autograd.grad(loss, params)
        rng = np.random.default_rng(2)
        eps = 1e-6
        for p, gr in zip(params, grads):
            flat = p.data.view(-1)
            for idx in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                orig = float(flat[idx])
                flat[idx] = orig + eps
                up = total_value()
                flat[idx] = orig - eps
                dn = total_value()
                flat[idx] = orig
                fd = (up - dn) / (2 * eps)
                an = float(gr.view(-1)[idx])
                assert an == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestTraining:
    def test_reconstruction_below_5pct(self):
        vae, rep = train_vae(toy_frames(), VaeConfig(train_steps=1500), seed=0)
        assert rep["holdout_rel_rms"] <= 0.05, rep["holdout_rel_rms"]

    def test_latent_std_in_band(self):
        _, rep = train_vae(toy_frames(), VaeConfig(train_steps=1500), seed=0)
        std = np.array(rep["latent_mu_std"])
        assert np.all(std >= 0.5) and np.all(std <= 2.0), std

    def test_deterministic(self):
        frames = toy_frames(800)
        cfg = VaeConfig(train_steps=60)
        _, r1 = train_vae(frames, cfg, seed=5)
        _, r2 = train_vae(frames, cfg, seed=5)
        assert r1["loss_history"] == r2["loss_history"]
        assert r1["holdout_rel_rms"] == r2["holdout_rel_rms"]

    def test_too_few_frames_rejected(self):
        with pytest.raises(ValueError):
            train_vae(np.zeros((5, D)), VaeConfig(), seed=0)


class TestPersistence:
    def test_round_trip_bitwise(self, tmp_path):
        vae, _ = train_vae(toy_frames(800), VaeConfig(train_steps=60), seed=0)
        p = tmp_path / "vae.ckpt"
        vae.save(p)
        vae2 = MotionVae.load(p)
        f = toy_frames(40, seed=9)
        m1, l1 = vae.encode_frames(f)
        m2, l2 = vae2.encode_frames(f)
        assert np.array_equal(m1, m2) and np.array_equal(l1, l2)
        assert np.array_equal(vae.decode_latents(m1), vae2.decode_latents(m2))

    def test_wrong_kind_rejected(self, tmp_path):
        from beatflow.checkpoint import save_checkpoint

        p = tmp_path / "x.ckpt"
        save_checkpoint(p, {"w": np.zeros(3)}, {"kind": "other"})
        with pytest.raises(ValueError, match="not a motion VAE"):
            MotionVae.load(p)
