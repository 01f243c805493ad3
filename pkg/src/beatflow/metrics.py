"""Evaluation metrics: FID over motion features, diversity, BAS, FSR.

Feature extractors work on world joint positions (N, K, 3) sampled at a
fixed frame rate.  Distributional metrics treat one sequence (clip) as one
sample: extract a feature vector per clip, then compare the real and
generated feature clouds.  Absolute FID values depend on these extractors,
so only relative comparisons are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.signal
import scipy.special

from beatflow.config import EvalConfig


@dataclass(frozen=True)
class FeatureSet:
    kind: str  # "kinetic" | "geometric"
    matrix: np.ndarray  # (N, D_feat)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        if not np.all(np.isfinite(m)):
            raise ValueError("non-finite features")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def stack(cls, kind: str, rows: list[np.ndarray]) -> "FeatureSet":
        return cls(kind, np.stack(rows))


def _positions(arr) -> np.ndarray:
    pos = np.asarray(arr, dtype=np.float64)
    if pos.ndim != 3 or pos.shape[2] != 3:
        raise ValueError(f"expected (N, K, 3) positions, got {pos.shape}")
    return pos


def kinetic_features(positions) -> np.ndarray:
    """Per-joint (mean speed, mean acceleration, speed variance), m/frame units."""
    pos = _positions(positions)
    if pos.shape[0] < 3:
        raise ValueError("need at least 3 frames for kinetic features")
    vel = np.diff(pos, axis=0)
    acc = np.diff(vel, axis=0)
    speed = np.linalg.norm(vel, axis=2)
    accel = np.linalg.norm(acc, axis=2)
    feats = np.stack([speed.mean(axis=0), accel.mean(axis=0), speed.var(axis=0)], axis=1)
    return feats.reshape(-1)


def geometric_features(positions) -> np.ndarray:
    """Time-averaged pairwise joint distances plus yaw-invariant extent stats."""
    pos = _positions(positions)
    K = pos.shape[1]
    iu = np.triu_indices(K, k=1)
    diffs = pos[:, :, None, :] - pos[:, None, :, :]
    dists = np.linalg.norm(diffs, axis=3)[:, iu[0], iu[1]]
    vertical = pos[:, :, 1].max(axis=1) - pos[:, :, 1].min(axis=1)
    radial = np.linalg.norm(pos[:, :, [0, 2]] - pos[:, :1, [0, 2]], axis=2).max(axis=1)
    return np.concatenate([dists.mean(axis=0), [vertical.mean(), radial.mean()]])


def fid(real: FeatureSet, gen: FeatureSet, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature clouds."""
    if real.kind != gen.kind:
        raise ValueError(f"feature kinds differ: {real.kind} vs {gen.kind}")
    a, b = real.matrix, gen.matrix
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensions differ")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 samples per side")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False) + eps * np.eye(a.shape[1])
    cov_b = np.cov(b, rowvar=False) + eps * np.eye(b.shape[1])
    covmean = scipy.linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * covmean))
    return max(d2, 0.0)


def diversity(feats: FeatureSet, n_pairs: int = 200, seed: int = 0) -> float:
    """Mean pairwise Euclidean distance.

    Exact all-pairs mean when the cloud is small enough; otherwise a seeded
    sample of n_pairs index pairs (the estimate then depends on row order
    through the indices drawn, the expectation does not).
    """
    m = feats.matrix
    n = m.shape[0]
    if n < 2:
        raise ValueError("need at least 2 rows")
    total_pairs = n * (n - 1) // 2
    if total_pairs <= n_pairs:
        iu = np.triu_indices(n, k=1)
        return float(np.linalg.norm(m[iu[0]] - m[iu[1]], axis=1).mean())
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=n_pairs)
    j = rng.integers(0, n - 1, size=n_pairs)
    j = np.where(j >= i, j + 1, j)  # j != i, uniform over the rest
    return float(np.linalg.norm(m[i] - m[j], axis=1).mean())


def expected_normal_diversity(dim: int) -> float:
    """E||x - y|| for x, y ~ N(0, I_dim): sqrt(2) * E chi(dim)."""
    log_e = 0.5 * np.log(2.0) + scipy.special.gammaln((dim + 1) / 2) \
        - scipy.special.gammaln(dim / 2)
    return float(np.sqrt(2.0) * np.exp(log_e))


def detect_motion_beats(positions, min_gap: int = 4, prominence_frac: float = 0.05) -> np.ndarray:
    """Frame indices of aggregate-speed minima (kinematic motion beats).

    Speed uses central differences, so a beat at pose index i means the
    character is slowest at time i / fps exactly.  Indices are strictly
    increasing with gaps >= min_gap.
    """
    pos = _positions(positions)
    if pos.shape[0] < 5:
        raise ValueError("need at least 5 frames")
    vel = (pos[2:] - pos[:-2]) / 2.0
    speed = np.linalg.norm(vel, axis=2).sum(axis=1)
    span = float(speed.max() - speed.min())
    if span <= 1e-9:  # flat profile: constant-speed or frozen motion
        return np.array([], dtype=np.int64)
    peaks, _ = scipy.signal.find_peaks(-speed, prominence=prominence_frac * span,
                                       distance=min_gap)
    return peaks + 1  # speed[i] describes pose index i + 1


def aggregate_speed(positions) -> np.ndarray:
    """Per-frame mean joint speed (m/frame, forward differences).

    Entry i is the speed of the step from pose i to pose i+1, so a length-n
    pose array gives n-1 speeds.
    """
    pos = _positions(positions)
    if pos.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    return np.linalg.norm(pos[1:] - pos[:-1], axis=2).mean(axis=1)


def dominant_frequency(signal, fps: float = 30.0, window: int = 60) -> np.ndarray:
    """Trailing-window dominant frequency (Hz) of a scalar signal.

    Entry i is the argmax of the Hann-windowed magnitude spectrum (DC
    excluded) over signal[i - window + 1 .. i]; entries before the first
    full window are NaN.  The window mean is removed before tapering so a
    large DC offset cannot leak into the lowest bin.
    """
    sig = np.asarray(signal, dtype=np.float64).reshape(-1)
    if window < 4:
        raise ValueError("window must be >= 4 samples")
    out = np.full(sig.shape[0], np.nan)
    if sig.shape[0] < window:
        return out
    taper = np.hanning(window)
    freqs = np.fft.rfftfreq(window, d=1.0 / fps)
    for i in range(window, sig.shape[0] + 1):
        seg = sig[i - window : i]
        mag = np.abs(np.fft.rfft((seg - seg.mean()) * taper))
        out[i - 1] = freqs[1:][np.argmax(mag[1:])]
    return out


def bas(motion_beats_s, audio_beats_s, sigma_s: float = 0.1) -> float:
    """Beat Alignment Score: mean Gaussian kernel of nearest-beat offsets."""
    if sigma_s <= 0:
        raise ValueError("sigma must be positive")
    mb = np.asarray(motion_beats_s, dtype=np.float64).reshape(-1)
    ab = np.asarray(audio_beats_s, dtype=np.float64).reshape(-1)
    if mb.size == 0 or ab.size == 0:
        return 0.0
    dt = np.abs(mb[:, None] - ab[None, :]).min(axis=1)
    return float(np.mean(np.exp(-(dt**2) / (2.0 * sigma_s**2))))


def fsr(
    positions,
    foot_indices,
    fps: float = 30.0,
    height_thresh: float = 0.05,
    speed_thresh: float = 0.01,
    accel_bound: float = 0.5,
) -> float:
    """Foot Skating Ratio: planted-looking feet that nevertheless slide.

    A frame counts when some foot is below height_thresh, moving
    horizontally faster than speed_thresh (m/frame), while the center of
    mass shows no vertical acceleration above accel_bound (m/s^2), i.e.
    the body behaves as if in ground contact.
    """
    pos = _positions(positions)
    if len(foot_indices) == 0:
        raise ValueError("skeleton has no foot joints tagged")
    if pos.shape[0] < 3:
        raise ValueError("need at least 3 frames")
    feet = pos[:, list(foot_indices)]
    com = pos.mean(axis=1)
    com_acc = (com[2:, 1] - 2 * com[1:-1, 1] + com[:-2, 1]) * fps * fps
    low = feet[1:-1, :, 1] < height_thresh
    sliding = np.linalg.norm(feet[2:, :, [0, 2]] - feet[1:-1, :, [0, 2]], axis=2) > speed_thresh
    contact_like = np.abs(com_acc) < accel_bound
    bad = np.any(low & sliding, axis=1) & contact_like
    return float(bad.mean())


def evaluate_sets(
    real_positions: list,
    gen_positions: list,
    audio_beats_s: list,
    foot_indices,
    fps: float = 30.0,
    cfg: EvalConfig | None = None,
) -> dict:
    """Full report over paired clip lists; BAS/FSR averaged over clips."""
    cfg = cfg or EvalConfig()
    if len(gen_positions) == 0:
        raise ValueError("no generated clips")
    real_k = FeatureSet.stack("kinetic", [kinetic_features(p) for p in real_positions])
    gen_k = FeatureSet.stack("kinetic", [kinetic_features(p) for p in gen_positions])
    real_g = FeatureSet.stack("geometric", [geometric_features(p) for p in real_positions])
    gen_g = FeatureSet.stack("geometric", [geometric_features(p) for p in gen_positions])
    bas_vals, fsr_vals = [], []
    for pos, beats in zip(gen_positions, audio_beats_s):
        mb = detect_motion_beats(pos) / fps
        bas_vals.append(bas(mb, beats, cfg.bas_sigma_s))
        fsr_vals.append(fsr(pos, foot_indices, fps))
    return {
        "fid_k": fid(real_k, gen_k, cfg.fid_eps),
        "fid_g": fid(real_g, gen_g, cfg.fid_eps),
        "div_k": diversity(gen_k, cfg.n_diversity_pairs),
        "div_g": diversity(gen_g, cfg.n_diversity_pairs),
        "bas": float(np.mean(bas_vals)) if bas_vals else 0.0,
        "fsr": float(np.mean(fsr_vals)) if fsr_vals else 0.0,
        "n_sequences": len(gen_positions),
    }
