"""Velocity network: level embedding, causality, gradients, batching."""

import numpy as np
import pytest
import torch

from beatflow.denoiser import DenoiserConfig, DenoiserNet, embed_level


@pytest.fixture(scope="module")
def net():
    torch.set_num_threads(1)
    return DenoiserNet(DenoiserConfig(), seed=0)


def _inputs(seed, n=12, d_z=16, d_c=22):
    rng = np.random.default_rng(seed)
    return (
        rng.normal(size=(n, d_z)),
        rng.uniform(size=n),
        rng.normal(size=(n, d_c)),
    )


class TestEmbedLevel:
    def test_boundaries_distinct(self):
        assert np.linalg.norm(embed_level(0.0) - embed_level(1.0)) > 1e-3

    def test_lipschitz_smoothness(self):
        for k in (0.0, 0.3, 0.7, 1.0 - 1e-6):
            d = np.linalg.norm(embed_level(k) - embed_level(k + 1e-6))
            assert d <= 1e-4

    def test_deterministic(self):
        assert np.array_equal(embed_level(0.37), embed_level(0.37))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            embed_level(-0.01)
        with pytest.raises(ValueError):
            embed_level(1.01)

    def test_vectorized_shape(self):
        e = embed_level(np.linspace(0, 1, 5), dim=16)
        assert e.shape == (5, 16)


class TestForward:
    def test_causal_mask_contract(self, net):
        x, k, c = _inputs(0)
        v = net.velocity(x, k, c)
        for j in (3, 8, 11):
            xp = x.copy()
            xp[j] += 1.7
            vp = net.velocity(xp, k, c)
            assert np.array_equal(v[:j], vp[:j])
            assert not np.allclose(v[j], vp[j])

    def test_condition_is_causal_too(self, net):
        x, k, c = _inputs(1)
        v = net.velocity(x, k, c)
        cp = c.copy()
        cp[6] += 2.0
        vp = net.velocity(x, k, cp)
        assert np.array_equal(v[:6], vp[:6])

    def test_single_token_window(self, net):
        x, k, c = _inputs(2, n=1)
        v = net.velocity(x, k, c)
        assert v.shape == (1, 16) and np.all(np.isfinite(v))

    def test_capacity_error(self, net):
        n = net.cfg.t_max + 1
        x, k, c = _inputs(3, n=n)
        with pytest.raises(ValueError):
            net.velocity(x, k, c)

    def test_level_domain_error(self, net):
        x, k, c = _inputs(4)
        with pytest.raises(ValueError):
            net.velocity(x, k + 1.5, c)

    def test_null_condition_differs_from_generic(self, net):
        x, k, c = _inputs(5)
        assert not np.allclose(net.velocity(x, k, c), net.velocity(x, k, None))

    def test_output_shape_matches_input(self, net):
        for n in (1, 5, net.cfg.t_max):
            x, k, c = _inputs(6, n=n)
            assert net.velocity(x, k, c).shape == x.shape

    def test_batch_permutation_equivariance(self, net):
        rng = np.random.default_rng(7)
        x = torch.as_tensor(rng.normal(size=(4, 9, 16)), dtype=torch.float32)
        k = torch.as_tensor(rng.uniform(size=(4, 9)), dtype=torch.float32)
        c = torch.as_tensor(rng.normal(size=(4, 9, 22)), dtype=torch.float32)
        with torch.no_grad():
            v = net(x, k, c)
            vp = net(x[[2, 0, 3, 1]], k[[2, 0, 3, 1]], c[[2, 0, 3, 1]])
        assert torch.equal(v[[2, 0, 3, 1]], vp)

    def test_seeded_init_reproducible(self):
        a = DenoiserNet(DenoiserConfig(), seed=11)
        b = DenoiserNet(DenoiserConfig(), seed=11)
        for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb), na


class TestBackward:
    def test_requires_recorded_forward(self):
        net = DenoiserNet(DenoiserConfig(d_model=8, n_layers=1, n_heads=2, k_dim=4), seed=0)
        with pytest.raises(RuntimeError):
            net.backward(np.zeros((3, 16)))

    def test_zero_cotangent(self, net):
        x, k, c = _inputs(8, n=4)
        net(
            torch.as_tensor(x, dtype=torch.float32),
            torch.as_tensor(k, dtype=torch.float32),
            torch.as_tensor(c, dtype=torch.float32),
        )
        grads = net.backward(np.zeros((4, 16)))
        assert all(np.all(g == 0) for g in grads.values())

    def test_repeatable(self, net):
        x, k, c = _inputs(9, n=4)
        net(
            torch.as_tensor(x, dtype=torch.float32),
            torch.as_tensor(k, dtype=torch.float32),
            torch.as_tensor(c, dtype=torch.float32),
        )
        cot = np.random.default_rng(1).normal(size=(4, 16))
        g1, g2 = net.backward(cot), net.backward(cot)
        assert all(np.array_equal(g1[k_], g2[k_]) for k_ in g1)

    def test_finite_difference_oracle(self):
        # tiny instance in float64 so central differences resolve
        cfg = DenoiserConfig(d_model=8, n_layers=1, n_heads=2, t_max=6, d_z=3, d_c=2, k_dim=4)
        net = DenoiserNet(cfg, seed=5).double()
        rng = np.random.default_rng(0)
        x = torch.as_tensor(rng.normal(size=(4, 3)))
        k = torch.as_tensor(rng.uniform(size=4))
        c = torch.as_tensor(rng.normal(size=(4, 2)))
        cot = rng.normal(size=(4, 3))
        net(x, k, c)
        grads = net.backward(cot)

        def scalar_loss():
            with torch.no_grad():
                return float((net(x, k, c) * torch.as_tensor(cot)).sum())

        checked = 0
        params = dict(net.named_parameters())
        for name in ("head.weight", "in_proj.bias", "null_cond"):
            p = params[name]
            flat = p.detach().view(-1)
            for idx in np.random.default_rng(2).choice(flat.numel(), size=min(5, flat.numel()), replace=False):
                h = 1e-6
                with torch.no_grad():
                    orig = float(flat[idx])
                    flat[idx] = orig + h
                    up = scalar_loss()
                    flat[idx] = orig - h
                    dn = scalar_loss()
                    flat[idx] = orig
                fd = (up - dn) / (2 * h)
                an = grads[name].reshape(-1)[idx]
                denom = max(abs(fd), abs(an), 1e-8)
                assert abs(fd - an) / denom <= 1e-4, f"{name}[{idx}]: fd={fd} an={an}"
                checked += 1
        assert checked >= 10


class TestCheckpoint:
    def test_round_trip_bitwise(self, net, tmp_path):
        path = tmp_path / "net.ckpt"
        net.save(path)
        loaded = DenoiserNet.load(path)
        assert loaded.cfg == net.cfg
        for (ka, va), (kb, vb) in zip(sorted(net.state_dict().items()),
                                      sorted(loaded.state_dict().items())):
            assert ka == kb
            assert torch.equal(va, vb), ka

    def test_loaded_velocity_identical(self, net, tmp_path):
        x, k, c = _inputs(5)
        path = tmp_path / "net.ckpt"
        net.save(path)
        loaded = DenoiserNet.load(path)
        assert np.array_equal(net.velocity(x, k, c), loaded.velocity(x, k, c))

    def test_cond_stats_survive(self, tmp_path):
        net = DenoiserNet(DenoiserConfig(), seed=1)
        mean, std = np.arange(22.0), np.linspace(0.5, 2.0, 22)
        net.set_cond_stats(mean, std)
        net.save(tmp_path / "net.ckpt")
        loaded = DenoiserNet.load(tmp_path / "net.ckpt")
        np.testing.assert_array_equal(loaded.cond_mean.numpy(), mean.astype(np.float32))

    def test_wrong_kind_rejected(self, tmp_path):
        from beatflow.checkpoint import save_checkpoint

        save_checkpoint(tmp_path / "other.ckpt", {"w": np.zeros(3)}, {"kind": "something-else"})
        with pytest.raises(ValueError, match="denoiser"):
            DenoiserNet.load(tmp_path / "other.ckpt")
