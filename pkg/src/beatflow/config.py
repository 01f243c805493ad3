"""Run configuration: one TOML file covering every module's defaults.

Unknown keys are rejected (typos fail loudly), missing keys take the
dataclass defaults below, and command-line `--set section.key=value`
overrides win over the file.  Every tunable constant used anywhere in the
pipeline lives here so a run is reproducible from (config, seed) alone;
`archive` drops the resolved config next to the outputs.

All randomness flows from the single root `seed`, split per module with
`split_seed(seed, label)`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path


def split_seed(root_seed: int, label: str) -> int:
    """Stable per-module seed derived from the root seed and a label."""
    h = hashlib.blake2b(label.encode("utf-8"), digest_size=8,
                        key=int(root_seed).to_bytes(8, "little", signed=False))
    return int.from_bytes(h.digest(), "little") % (2**63)


@dataclass
class SynthConfig:
    n_tracks: int = 200
    duration_s: float = 20.0
    tempi: tuple[int, ...] = (60, 90, 120, 150)
    n_styles: int = 4
    mute_prob: float = 0.1
    mute_min_s: float = 2.0
    mute_max_s: float = 4.0
    holdout_frac: float = 0.1


@dataclass
class AudioConfig:
    sample_rate: int = 24000
    fps: int = 30
    window_s: float = 2.0
    n_bands: int = 8
    d_vq: int = 16
    d_pae: int = 6
    n_stages: int = 2
    codebook_size: int = 32
    conv_channels: int = 32
    kernel_size: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    train_epochs: int = 3
    train_window_stride: int = 30  # subsample codec-fit windows, one per second
    batch_size: int = 32
    lr: float = 1e-3


@dataclass
class MotionConfig:
    skeleton: str = "toy5"
    fps: int = 30


@dataclass
class VaeConfig:
    d_z: int = 16
    hidden: int = 64
    kl_weight: float = 1e-3
    train_steps: int = 1500
    batch_size: int = 256
    lr: float = 1e-3
    sample_z: bool = False  # train denoiser on sampled z instead of posterior mean


@dataclass
class DenoiserTrainConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    t_max: int = 120
    k_dim: int = 32
    causal: bool = True
    steps: int = 3000
    batch_size: int = 16
    chunk_len: int = 120
    chunk_stride: int = 60
    lr: float = 1e-3
    p_drop: float = 0.2
    p_random: float = 1.0 / 3.0
    p_monotonic: float = 1.0 / 3.0
    p_trapezoid: float = 1.0 / 3.0
    loss_reduction: str = "mean"  # or "sum"


@dataclass
class SamplerConfig:
    window_len: int = 10
    ctx_len: int = 20
    hist_ramp: int = 20
    t_max: int = 120  # FIFO latent buffer cap
    omega: float = 2.0
    frozen_noise: bool = False  # hold history-corruption noise fixed per token


@dataclass
class ServiceConfig:
    tick_hz: float = 30.0
    host: str = "127.0.0.1"
    port: int = 8765


@dataclass
class EvalConfig:
    fid_eps: float = 1e-6
    bas_sigma_s: float = 0.1
    n_diversity_pairs: int = 200


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    synth: SynthConfig = field(default_factory=SynthConfig)
    audio: AudioConfig = field(default_factory=AudioConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    denoiser: DenoiserTrainConfig = field(default_factory=DenoiserTrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # ---- loading ----

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] = ()) -> "RunConfig":
        data: dict = {}
        if path is not None:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        for ov in overrides:
            if "=" not in ov:
                raise ValueError(f"override {ov!r} is not of the form section.key=value")
            dotted, raw = ov.split("=", 1)
            _set_dotted(data, dotted.strip(), _parse_toml_value(raw.strip()))
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, path="")

    # ---- saving ----

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return _to_toml(self.to_dict())

    def save(self, path: str | Path):
        Path(path).write_text(self.dumps())

    def archive(self, out_dir: str | Path) -> Path:
        """Write the resolved config next to a command's outputs."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dest = out / "config.toml"
        self.save(dest)
        return dest


def _parse_toml_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw  # bare string


def _set_dotted(data: dict, dotted: str, value):
    parts = dotted.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"override path {dotted!r} crosses a non-section key")
    node[parts[-1]] = value


def _build(dc_type, data: dict, path: str):
    if not isinstance(data, dict):
        raise ValueError(f"config section {path or '<root>'} must be a table")
    fields = {f.name: f for f in dataclasses.fields(dc_type)}
    unknown = set(data) - set(fields)
    if unknown:
        where = path or "top level"
        raise ValueError(f"unknown config key(s) at {where}: {sorted(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        sub = f"{path}.{name}" if path else name
        ann = _resolve_type(dc_type, f)
        if dataclasses.is_dataclass(ann):
            kwargs[name] = _build(ann, data[name], sub)
        else:
            kwargs[name] = _coerce(data[name], ann, sub)
    return dc_type(**kwargs)


def _resolve_type(dc_type, f: dataclasses.Field):
    hints = typing.get_type_hints(dc_type)
    return hints[f.name]


def _coerce(value, ann, where: str):
    origin = typing.get_origin(ann)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{where}: expected a list, got {type(value).__name__}")
        args = typing.get_args(ann)
        elem = args[0] if args else float
        return tuple(_coerce(v, elem, where) for v in value)
    if ann is bool:
        if not isinstance(value, bool):
            raise ValueError(f"{where}: expected a bool, got {value!r}")
        return value
    if ann is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"{where}: expected an int, got {value!r}")
        return value
    if ann is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if ann is str:
        if not isinstance(value, str):
            raise ValueError(f"{where}: expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported config field type {ann} at {where}")


def _toml_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__} to TOML")


def _to_toml(d: dict) -> str:
    lines = []
    tables = []
    for k, v in d.items():
        if isinstance(v, dict):
            tables.append((k, v))
        else:
            lines.append(f"{k} = {_toml_scalar(v)}")
    for name, tab in tables:
        lines.append("")
        lines.append(f"[{name}]")
        for k, v in tab.items():
            lines.append(f"{k} = {_toml_scalar(v)}")
    return "\n".join(lines) + "\n"
