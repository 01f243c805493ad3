"""Config loading: defaults, strict keys, overrides, archiving, seed splits."""

import pytest

from beatflow.config import RunConfig, split_seed


def test_defaults_without_file():
    cfg = RunConfig.load(None)
    assert cfg.seed == 0
    assert cfg.denoiser.d_model == 64
    assert cfg.sampler.window_len == 10
    assert cfg.audio.sample_rate == 24000


def test_file_round_trip(tmp_path):
    cfg = RunConfig.load(None, ["seed=7", "vae.kl_weight=0.01", "synth.tempi=[70, 140]"])
    p = tmp_path / "run.toml"
    cfg.save(p)
    again = RunConfig.load(p)
    assert again == cfg
    assert again.synth.tempi == (70, 140)


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[denoiser]\nd_modle = 32\n")
    with pytest.raises(ValueError, match="unknown config key"):
        RunConfig.load(p)


def test_unknown_section_rejected(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[denosier]\nd_model = 32\n")
    with pytest.raises(ValueError, match="unknown config key"):
        RunConfig.load(p)


def test_override_wins_over_file(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text("seed = 3\n[sampler]\nomega = 1.0\n")
    cfg = RunConfig.load(p, ["sampler.omega=2.5"])
    assert cfg.seed == 3 and cfg.sampler.omega == 2.5


def test_type_errors():
    with pytest.raises(ValueError):
        RunConfig.load(None, ["seed=1.5"])
    with pytest.raises(ValueError):
        RunConfig.load(None, ["denoiser.causal=1"])
    with pytest.raises(ValueError):
        RunConfig.load(None, ["not-an-assignment"])


def test_int_promotes_to_float():
    cfg = RunConfig.load(None, ["sampler.omega=2"])
    assert cfg.sampler.omega == 2.0 and isinstance(cfg.sampler.omega, float)


def test_archive(tmp_path):
    cfg = RunConfig.load(None, ["seed=9"])
    dest = cfg.archive(tmp_path / "out")
    assert dest.exists()
    assert RunConfig.load(dest).seed == 9


def test_split_seed_stable_and_distinct():
    assert split_seed(0, "synth") == split_seed(0, "synth")
    assert split_seed(0, "synth") != split_seed(0, "vae")
    assert split_seed(0, "synth") != split_seed(1, "synth")
    assert 0 <= split_seed(123, "anything") < 2**63
