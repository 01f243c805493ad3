"""Beat-locked synthetic music and dance.

Every track carries a continuous beat-phase curve B(t) (piecewise linear,
slope tempo/60, flat during mute).  Audio is a tone whose loudness peaks
exactly when B crosses an integer; motion is a cone-swing of the TOY5
head and hand whose sweep phase is psi = 2*pi*B - sin(2*pi*B), so joint
speed is proportional to 1 - cos(2*pi*B) and vanishes exactly on beats.
That gives ground-truth pairs where the motion-beat detector and the
annotated beat times must agree by construction.

Mute segments freeze B and decay the swing amplitude exponentially, so
the character settles into the rest pose within a second.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from beatflow.audio import save_wav
from beatflow.config import AudioConfig, SynthConfig
from beatflow.motion import SKELETONS, GlobalPose, Skeleton, encode_trajectory, save_motion

MUTE = None  # tempo value marking a silent segment

_DECAY_RATE = 8.0  # 1/s amplitude decay into mute
_ATTACK_RATE = 12.0  # 1/s amplitude recovery out of mute
_CARRIERS = (330.0, 392.0, 440.0, 523.0)  # per-style tone pitch, Hz


@dataclass(frozen=True)
class Segment:
    start: float
    tempo: float | None  # BPM, or MUTE
    style: int

    def __post_init__(self):
        if self.tempo is not None and self.tempo <= 0:
            raise ValueError(f"tempo must be positive, got {self.tempo}")
        if self.style < 0:
            raise ValueError("style must be >= 0")


@dataclass(frozen=True)
class TrackSpec:
    duration_s: float
    segments: tuple[Segment, ...]
    seed: int = 0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        if not self.segments:
            raise ValueError("at least one segment required")
        if self.segments[0].start != 0.0:
            raise ValueError("first segment must start at 0")
        starts = [s.start for s in self.segments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("segment starts must be strictly increasing")
        if starts[-1] >= self.duration_s:
            raise ValueError("last segment starts past the track end")

    def bounds(self) -> list[tuple[float, float, Segment]]:
        ends = [s.start for s in self.segments[1:]] + [self.duration_s]
        return [(seg.start, e, seg) for seg, e in zip(self.segments, ends)]


@dataclass(frozen=True)
class SynthTrack:
    audio: np.ndarray  # (n_samples,) float64 in [-1, 1]
    beat_times: np.ndarray  # (n_beats,) seconds
    frames: np.ndarray  # (n_ticks, frame_dim) motion transitions at fps
    sample_rate: int
    fps: int
    spec: TrackSpec


def _phase_knots(spec: TrackSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Times, cumulative beats, and cumulative carrier cycles at boundaries."""
    ts, beats, cycles = [0.0], [0.0], [0.0]
    for s0, s1, seg in spec.bounds():
        rate = 0.0 if seg.tempo is MUTE else seg.tempo / 60.0
        carrier = _CARRIERS[seg.style % len(_CARRIERS)]
        ts.append(s1)
        beats.append(beats[-1] + rate * (s1 - s0))
        cycles.append(cycles[-1] + carrier * (s1 - s0))
    return np.array(ts), np.array(beats), np.array(cycles)


def beat_phase(spec: TrackSpec, t: np.ndarray) -> np.ndarray:
    """Cumulative beat count B(t); piecewise linear, flat during mute."""
    knots_t, knots_b, _ = _phase_knots(spec)
    return np.interp(np.asarray(t, dtype=np.float64), knots_t, knots_b)


def beat_times(spec: TrackSpec) -> np.ndarray:
    """Exact instants where B crosses an integer with positive slope."""
    knots_t, knots_b, _ = _phase_knots(spec)
    out = []
    for i, (s0, s1, seg) in enumerate(spec.bounds()):
        if seg.tempo is MUTE:
            continue
        period = 60.0 / seg.tempo
        b0 = knots_b[i]
        n0 = int(np.ceil(b0 - 1e-9))
        for n in range(n0, int(np.floor(knots_b[i + 1] + 1e-9)) + 1):
            t = s0 + (n - b0) * period
            if s0 - 1e-12 <= t < s1 - 1e-12:
                out.append(t)
    return np.array(out)


def _envelope(spec: TrackSpec, t: np.ndarray) -> np.ndarray:
    """Swing/loudness envelope: decays in mute, recovers in tempo segments."""
    t = np.asarray(t, dtype=np.float64)
    g = np.empty_like(t)
    g0 = 1.0
    for s0, s1, seg in spec.bounds():
        m = (t >= s0 - 1e-12) & (t < s1 - 1e-12) if s1 < spec.duration_s \
            else (t >= s0 - 1e-12)
        dt = t[m] - s0
        if seg.tempo is MUTE:
            g[m] = g0 * np.exp(-_DECAY_RATE * dt)
            g0 = g0 * np.exp(-_DECAY_RATE * (s1 - s0))
        else:
            g[m] = 1.0 - (1.0 - g0) * np.exp(-_ATTACK_RATE * dt)
            g0 = 1.0 - (1.0 - g0) * np.exp(-_ATTACK_RATE * (s1 - s0))
    return g


def _axis_angle(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation matrices, vectorized over angle: (..., 3, 3)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    K = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    angle = np.asarray(angle, dtype=np.float64)[..., None, None]
    eye = np.eye(3)
    return eye + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def _perp(u: np.ndarray) -> np.ndarray:
    ref = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    w = np.cross(u, ref)
    return w / np.linalg.norm(w)


@dataclass(frozen=True)
class _Swing:
    joint: int
    cone_angle: float
    direction: float
    phase: float


def _style_swings(style: int, skeleton: Skeleton) -> list[_Swing]:
    # the chest is the only internal joint; its cone sweep carries the head
    # and hand through style-specific circles while the foot stays pinned
    chest = 1
    s = style % 4
    return [
        _Swing(chest, 0.25 + 0.08 * s, 1.0 if s < 2 else -1.0, 0.5 * s),
    ]


def gen_track(spec: TrackSpec, audio_cfg: AudioConfig | None = None,
              skeleton: Skeleton | None = None) -> SynthTrack:
    """Render a spec into paired audio, beat annotations, and motion frames."""
    cfg = audio_cfg or AudioConfig()
    skel = skeleton or SKELETONS["toy5"]
    rate, fps = cfg.sample_rate, cfg.fps
    n_samples = int(round(spec.duration_s * rate))
    n_ticks = int(round(spec.duration_s * fps))
    rng = np.random.default_rng(spec.seed)

    t_s = np.arange(n_samples) / rate
    knots_t, knots_b, knots_c = _phase_knots(spec)
    b_s = np.interp(t_s, knots_t, knots_b)
    carrier_phase = np.interp(t_s, knots_t, knots_c)
    g_s = _envelope(spec, t_s)
    loudness = 0.5 + 0.5 * np.cos(2 * np.pi * b_s)
    tone = np.sin(2 * np.pi * carrier_phase)
    floor = rng.normal(size=n_samples)
    kernel = np.ones(8) / 8.0  # crude lowpass keeps the floor band-limited
    floor = np.convolve(floor, kernel, mode="same")
    audio = g_s * (0.5 * tone * loudness + 0.01 * floor)

    # poses at t = 0 .. n_ticks / fps inclusive; frames are the transitions
    t_f = np.arange(n_ticks + 1) / fps
    b_f = np.interp(t_f, knots_t, knots_b)
    g_f = _envelope(spec, t_f)
    psi_base = 2 * np.pi * b_f - np.sin(2 * np.pi * b_f)
    # style can change per segment; evaluate per-frame style id
    style_f = np.zeros(n_ticks + 1, dtype=np.int64)
    for s0, s1, seg in spec.bounds():
        m = (t_f >= s0 - 1e-12) & ((t_f < s1 - 1e-12) | (s1 >= spec.duration_s))
        style_f[m] = seg.style

    K = skel.n_joints
    rots = np.broadcast_to(np.eye(3), (n_ticks + 1, K, 3, 3)).copy()
    for style in np.unique(style_f):
        m = style_f == style
        for sw in _style_swings(int(style), skel):
            u = skel.offsets[sw.joint] / np.linalg.norm(skel.offsets[sw.joint])
            w = _perp(u)
            psi = sw.direction * psi_base[m] + sw.phase
            sweep = _axis_angle(u, psi)
            tilt = _axis_angle(w, sw.cone_angle * g_f[m])
            unsweep = _axis_angle(u, -psi)
            rots[m, sw.joint] = sweep @ tilt @ unsweep

    root = np.zeros((n_ticks + 1, 3))
    root[:, 1] = skel.rest_root_height()
    frames = encode_trajectory(skel, root, rots)
    return SynthTrack(audio, beat_times(spec), frames, rate, fps, spec)


def track_poses(track: SynthTrack, skeleton: Skeleton | None = None) -> list[GlobalPose]:
    """Decode a track's frames back into world poses (for metric oracles)."""
    from beatflow.motion import MotionDecoder

    skel = skeleton or SKELETONS["toy5"]
    dec = MotionDecoder(skel, skel.rest_pose())
    return [dec.step(f) for f in track.frames]


def random_specs(cfg: SynthConfig, seed: int) -> list[TrackSpec]:
    """Sample the desk-scale corpus: tempo segments with occasional mutes."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(cfg.n_tracks):
        n_seg = int(rng.integers(1, 4))
        cuts = np.sort(rng.uniform(0.15, 0.85, size=n_seg - 1)) * cfg.duration_s
        starts = np.concatenate([[0.0], np.round(cuts, 3)])
        segs = []
        for j, s0 in enumerate(starts):
            mute = j > 0 and rng.random() < cfg.mute_prob
            if mute:
                tempo = MUTE
            else:
                tempo = float(rng.choice(cfg.tempi))
            style = int(rng.integers(0, cfg.n_styles))
            segs.append(Segment(float(s0), tempo, style))
        specs.append(TrackSpec(cfg.duration_s, tuple(segs), seed=int(rng.integers(2**31))))
    return specs


def build_dataset(specs: list[TrackSpec], out_dir: str | Path,
                  audio_cfg: AudioConfig | None = None,
                  holdout_frac: float = 0.1, seed: int = 0) -> Path:
    """Write paired WAV + motion + beat files and a JSONL manifest.

    Deterministic: the same specs and seed always produce byte-identical
    files.  Returns the manifest path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = audio_cfg or AudioConfig()
    skel = SKELETONS["toy5"]
    rng = np.random.default_rng(seed)
    holdout = rng.random(len(specs)) < holdout_frac if specs else np.zeros(0, bool)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i, spec in enumerate(specs):
            track = gen_track(spec, cfg, skel)
            stem = f"track_{i:04d}"
            save_wav(out / f"{stem}.wav", track.audio, cfg.sample_rate)
            save_motion(out / f"{stem}.bfm", track.frames, skel, cfg.fps)
            with open(out / f"{stem}.beats.json", "w") as bf:
                json.dump([float(b) for b in track.beat_times], bf)
            row = {
                "track": i,
                "wav": f"{stem}.wav",
                "motion": f"{stem}.bfm",
                "beats": f"{stem}.beats.json",
                "duration_s": spec.duration_s,
                "seed": spec.seed,
                "split": "holdout" if holdout[i] else "train",
                "segments": [
                    {"start": s.start, "tempo": s.tempo, "style": s.style}
                    for s in spec.segments
                ],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest


def load_manifest(manifest_path: str | Path) -> list[dict]:
    rows = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
