"""End-to-end plumbing: dataset -> codec -> VAE -> denoiser -> rollout.

This module turns tracks on disk into training chunks, fits the three
trainable parts in sequence, and rolls a trained stack out over a WAV
through the same FIFO streaming loop the live service uses, so offline
generation is strictly causal by construction.  Every stage is a pure
function of (inputs, config, seed); `run_pipeline` chains them and
archives artifacts plus a timing/loss report.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import AudioFeatureExtractor, feature_windows, load_wav, track_base_features, vqpae_train
from .config import AudioConfig, DenoiserTrainConfig, EvalConfig, RunConfig, split_seed
from .denoiser import DenoiserConfig, DenoiserNet
from .flowmatch import training_step
from .metrics import (
    FeatureSet,
    bas,
    detect_motion_beats,
    diversity,
    evaluate_sets,
    fid,
    fsr,
    geometric_features,
    kinetic_features,
)
from .motion import SKELETONS, Skeleton, decode_positions, encode_trajectory, load_motion, save_motion
from .sampler import SamplerParams, new_stream, stream_step, warmup
from .schedules import ScheduleParams
from .synth import build_dataset, load_manifest, random_specs
from .vae import MotionVae, train_vae


# ---------------------------------------------------------------------------
# dataset assembly


def rest_latent(vae: MotionVae, skeleton: Skeleton) -> np.ndarray:
    """Latent code of a motionless frame at the rest pose (the idle token)."""
    root = np.tile([0.0, skeleton.rest_root_height(), 0.0], (2, 1))
    rots = np.tile(np.eye(3), (2, skeleton.n_joints, 1, 1))
    frames = encode_trajectory(skeleton, root, rots)
    mu, _ = vae.encode_frames(frames[0])
    return mu


def silence_condition(extractor: AudioFeatureExtractor) -> np.ndarray:
    """Condition row the extractor produces on an all-zero audio buffer."""
    hop = extractor.cfg.sample_rate // extractor.cfg.fps
    return extractor.conditions_for_track(np.zeros(hop))[0]


def track_pairs(
    rows: list[dict],
    data_dir: str | Path,
    extractor: AudioFeatureExtractor,
    vae: MotionVae,
    sample_z: bool = False,
    seed: int = 0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per track: aligned (latents (n, d_z), conditions (n, d_c)).

    Row t of both arrays covers the same tick: the motion frame landing at
    time (t+1)/fps and the causal audio window ending there.  Latents are
    posterior means unless sample_z, which draws one posterior sample per
    frame (seeded per track).
    """
    data_dir = Path(data_dir)
    pairs = []
    for row in rows:
        samples, rate = load_wav(data_dir / row["wav"])
        if rate != extractor.cfg.sample_rate:
            raise ValueError(f"{row['wav']}: sample rate {rate} != configured {extractor.cfg.sample_rate}")
        frames, _, _ = load_motion(data_dir / row["motion"])
        conds = extractor.conditions_for_track(samples)
        mu, logvar = vae.encode_frames(frames)
        if sample_z:
            rng = np.random.default_rng(split_seed(seed, f"sample-z-{row['track']}"))
            z = mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)
        else:
            z = mu
        n = min(len(z), len(conds))
        pairs.append((z[:n], conds[:n]))
    return pairs


def build_chunks(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    chunk_len: int,
    stride: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Slice aligned tracks into fixed-length training chunks.

    Tracks shorter than chunk_len are skipped; stride defaults to
    chunk_len // 2 for 2x overlap.
    """
    if chunk_len < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    stride = stride or max(1, chunk_len // 2)
    zs, cs = [], []
    for z, c in pairs:
        if z.shape[0] != c.shape[0]:
            raise ValueError(f"latent/condition length mismatch: {z.shape[0]} vs {c.shape[0]}")
        for s in range(0, z.shape[0] - chunk_len + 1, stride):
            zs.append(z[s : s + chunk_len])
            cs.append(c[s : s + chunk_len])
    if not zs:
        raise ValueError(f"no track long enough for chunk_len={chunk_len}")
    return np.stack(zs), np.stack(cs)


# ---------------------------------------------------------------------------
# denoiser training


def denoiser_config(cfg: DenoiserTrainConfig, d_z: int, d_c: int) -> DenoiserConfig:
    return DenoiserConfig(
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        t_max=cfg.t_max,
        d_z=d_z,
        d_c=d_c,
        k_dim=cfg.k_dim,
        causal=cfg.causal,
    )


def train_denoiser(
    latent_chunks: np.ndarray,
    cond_chunks: np.ndarray,
    cfg: DenoiserTrainConfig,
    sched: ScheduleParams,
    seed: int = 0,
) -> tuple[DenoiserNet, dict]:
    """Hybrid-schedule flow matching over (N, T, d) chunk stacks.

    Condition normalization stats are estimated from the full chunk set
    and baked into the network as buffers so inference needs no side
    channel.  Returns the trained net (eval mode) and a loss report.
    """
    z = np.asarray(latent_chunks, dtype=np.float64)
    c = np.asarray(cond_chunks, dtype=np.float64)
    if z.ndim != 3 or c.ndim != 3 or z.shape[:2] != c.shape[:2]:
        raise ValueError(f"chunk stacks disagree: {z.shape} vs {c.shape}")
    n_chunks, T = z.shape[:2]
    if T > cfg.t_max:
        raise ValueError(f"chunk length {T} exceeds window capacity t_max={cfg.t_max}")

    net = DenoiserNet(denoiser_config(cfg, z.shape[2], c.shape[2]), seed=seed)
    flat_c = c.reshape(-1, c.shape[2])
    net.set_cond_stats(flat_c.mean(axis=0), flat_c.std(axis=0))

    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(seed)
    type_probs = (cfg.p_random, cfg.p_monotonic, cfg.p_trapezoid)
    history = []
    loss = float("nan")
    for step in range(cfg.steps):
        idx = rng.integers(0, n_chunks, size=min(cfg.batch_size, n_chunks))
        loss = training_step(net, opt, z[idx], c[idx], sched, rng,
                             type_probs=type_probs, p_drop=cfg.p_drop,
                             reduction=cfg.loss_reduction)
        if step % 50 == 0 or step == cfg.steps - 1:
            history.append([step, loss])
    net.eval()
    report = {
        "n_chunks": int(n_chunks),
        "chunk_len": int(T),
        "n_params": net.n_params,
        "steps": cfg.steps,
        "final_loss": loss,
        "loss_history": history,
    }
    return net, report


# ---------------------------------------------------------------------------
# offline generation


@dataclass(frozen=True)
class GeneratedMotion:
    """One offline rollout: emitted latents with their decoded motion."""

    latents: np.ndarray    # (n_ticks, d_z) real emitted tokens, warmup replays dropped
    frames: np.ndarray     # (n_ticks, frame_dim) decoded motion features
    positions: np.ndarray  # (n_ticks + 1, K, 3) world joint positions, rest pose first
    conds: np.ndarray      # (n_ticks, d_c) conditions the ticks consumed
    model_calls: int


def frames_to_positions(frames: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """Decode motion frames to world positions, prepending the rest pose.

    Index i of the result is the pose at time i / fps, matching the
    motion-beat detector's frame convention.
    """
    init = skeleton.rest_pose()
    pos = decode_positions(frames, init)
    return np.concatenate([init.joint_pos[None], pos], axis=0)


def generate_motion(
    samples: np.ndarray,
    extractor: AudioFeatureExtractor,
    vae: MotionVae,
    net: DenoiserNet,
    params: SamplerParams,
    seed: int = 0,
    skeleton: Skeleton | None = None,
    warmup_len: int | None = None,
) -> GeneratedMotion:
    """Roll the streaming sampler over a full track, one tick per hop.

    The track is padded with window_len - 1 hops of silence so the last
    real token clears the denoising window; emissions that merely replay
    warmup context are dropped.  Output row t is a function of audio
    through tick t only (the conditioner is causal and the sampler never
    reads ahead), so offline generation shares the live loop's causality.
    """
    skeleton = skeleton or SKELETONS["toy5"]
    samples = np.asarray(samples, dtype=np.float64)
    cfg = extractor.cfg
    hop = cfg.sample_rate // cfg.fps
    n_ticks = samples.shape[0] // hop
    if n_ticks < 1:
        raise ValueError(f"track shorter than one tick ({samples.shape[0]} samples)")
    flush = params.window_len - 1
    padded = np.concatenate([samples[: n_ticks * hop], np.zeros(flush * hop)])
    conds = extractor.conditions_for_track(padded)

    n_warm = params.ctx_len if warmup_len is None else warmup_len
    idle = rest_latent(vae, skeleton)
    state = new_stream(params, d_z=idle.shape[0], d_c=conds.shape[1], seed=seed)
    warmup(state, idle, n_warm, params, idle_cond=silence_condition(extractor))

    emitted = []
    for i in range(conds.shape[0]):
        tok = stream_step(state, conds[i], net, params)
        if tok is not None and state.tau - params.window_len + 1 > n_warm:
            emitted.append(tok)
    if len(emitted) != n_ticks:
        raise RuntimeError(f"expected {n_ticks} emitted tokens, got {len(emitted)}")

    latents = np.stack(emitted)
    frames = vae.decode_latents(latents)
    return GeneratedMotion(
        latents=latents,
        frames=frames,
        positions=frames_to_positions(frames, skeleton),
        conds=conds[:n_ticks],
        model_calls=state.model_calls,
    )


# ---------------------------------------------------------------------------
# evaluation over a manifest


def evaluate_generation(
    rows: list[dict],
    data_dir: str | Path,
    extractor: AudioFeatureExtractor,
    vae: MotionVae,
    net: DenoiserNet,
    params: SamplerParams,
    cfg: RunConfig,
    seed: int = 0,
) -> dict:
    """Generate on each track twice (guided at params.omega and history-only
    at omega 0) and score both against ground truth.

    The report carries one metrics block per branch plus the beat-alignment
    gap, the quantity conditioning is supposed to buy.
    """
    if not rows:
        raise ValueError("no tracks to evaluate")
    data_dir = Path(data_dir)
    skeleton = SKELETONS[cfg.motion.skeleton]
    uncond_params = dataclasses.replace(params, omega=0.0)
    real_pos, cond_pos, uncond_pos, beats = [], [], [], []
    for row in rows:
        samples, _ = load_wav(data_dir / row["wav"])
        frames, _, _ = load_motion(data_dir / row["motion"])
        with open(data_dir / row["beats"]) as fh:
            beats.append(np.asarray(json.load(fh), dtype=np.float64))
        real_pos.append(frames_to_positions(frames, skeleton))
        gen_seed = split_seed(seed, f"generate-{row['track']}")
        g = generate_motion(samples, extractor, vae, net, params, seed=gen_seed, skeleton=skeleton)
        u = generate_motion(samples, extractor, vae, net, uncond_params, seed=gen_seed, skeleton=skeleton)
        cond_pos.append(g.positions)
        uncond_pos.append(u.positions)
    fps = float(cfg.motion.fps)
    feet = skeleton.foot_indices
    report = {
        "conditional": evaluate_sets(real_pos, cond_pos, beats, feet, fps, cfg.eval),
        "unconditional": evaluate_sets(real_pos, uncond_pos, beats, feet, fps, cfg.eval),
        "omega": params.omega,
        "n_tracks": len(rows),
    }
    report["bas_gap"] = report["conditional"]["bas"] - report["unconditional"]["bas"]
    return report


def _load_motion_dir(path: Path) -> list[tuple[str, np.ndarray, Skeleton, float]]:
    files = sorted(path.glob("*.bfm")) + sorted(path.glob("*.csv"))
    if not files:
        raise ValueError(f"no motion files (*.bfm or *.csv) in {path}")
    out = []
    for f in files:
        frames, skel, fps = load_motion(f)
        out.append((f.stem, frames_to_positions(frames, skel), skel, fps))
    return out


def evaluate_dirs(gen_dir: str | Path, ref_dir: str | Path,
                  beats_dir: str | Path | None = None,
                  cfg: EvalConfig | None = None) -> dict:
    """Metric report comparing two directories of motion files.

    FID and diversity always run; BAS additionally needs a
    <stem>.beats.json next to each generated clip's stem in beats_dir
    (default ref_dir), and clips without annotations are left out of the
    BAS average (bas is null when none have them).
    """
    cfg = cfg or EvalConfig()
    gen = _load_motion_dir(Path(gen_dir))
    ref = _load_motion_dir(Path(ref_dir))
    names = {s.name for _, _, s, _ in gen} | {s.name for _, _, s, _ in ref}
    if len(names) > 1:
        raise ValueError(f"skeleton mismatch across directories: {sorted(names)}")
    skel = gen[0][2]
    beats_root = Path(beats_dir) if beats_dir is not None else Path(ref_dir)

    gen_k = FeatureSet.stack("kinetic", [kinetic_features(p) for _, p, _, _ in gen])
    ref_k = FeatureSet.stack("kinetic", [kinetic_features(p) for _, p, _, _ in ref])
    gen_g = FeatureSet.stack("geometric", [geometric_features(p) for _, p, _, _ in gen])
    ref_g = FeatureSet.stack("geometric", [geometric_features(p) for _, p, _, _ in ref])

    bas_vals, fsr_vals = [], []
    for stem, pos, _, fps in gen:
        fsr_vals.append(fsr(pos, skel.foot_indices, fps))
        beats_file = beats_root / f"{stem}.beats.json"
        if beats_file.exists():
            beats = np.asarray(json.loads(beats_file.read_text()), dtype=np.float64)
            mb = detect_motion_beats(pos) / fps
            bas_vals.append(bas(mb, beats, cfg.bas_sigma_s))
    return {
        "fid_k": fid(ref_k, gen_k, cfg.fid_eps),
        "fid_g": fid(ref_g, gen_g, cfg.fid_eps),
        "div_k": diversity(gen_k, cfg.n_diversity_pairs),
        "div_g": diversity(gen_g, cfg.n_diversity_pairs),
        "bas": float(np.mean(bas_vals)) if bas_vals else None,
        "fsr": float(np.mean(fsr_vals)),
        "n_sequences": len(gen),
        "n_with_beats": len(bas_vals),
    }


# ---------------------------------------------------------------------------
# full pipeline


@dataclass(frozen=True)
class PipelineArtifacts:
    run_dir: Path
    manifest: Path
    codec: Path
    vae: Path
    denoiser: Path
    report: Path


def _codec_windows(rows: list[dict], data_dir: Path, cfg: AudioConfig) -> np.ndarray:
    """Subsampled base-feature windows pooled across training tracks."""
    wins = []
    for row in rows:
        samples, _ = load_wav(data_dir / row["wav"])
        feats = track_base_features(samples, cfg)
        wins.append(feature_windows(feats, cfg)[:: cfg.train_window_stride])
    return np.concatenate(wins, axis=0)


def _train_frames(rows: list[dict], data_dir: Path) -> np.ndarray:
    return np.concatenate([load_motion(data_dir / row["motion"])[0] for row in rows], axis=0)


def stage_synth(cfg: RunConfig, out: str | Path) -> Path:
    """Write the synthetic corpus under out/dataset; returns the manifest."""
    specs = random_specs(cfg.synth, split_seed(cfg.seed, "synth-specs"))
    return build_dataset(specs, Path(out) / "dataset", cfg.audio,
                         holdout_frac=cfg.synth.holdout_frac,
                         seed=split_seed(cfg.seed, "synth-split"))


def train_split(out: str | Path) -> tuple[list[dict], Path]:
    """Training rows plus the dataset dir of an existing run directory."""
    manifest = Path(out) / "dataset" / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset at {manifest}; run the synth stage first")
    rows = [r for r in load_manifest(manifest) if r["split"] == "train"]
    if not rows:
        raise ValueError("dataset has no training tracks")
    return rows, manifest.parent


def stage_codec(cfg: RunConfig, out: str | Path) -> tuple[AudioFeatureExtractor, dict]:
    """Fit the music feature codec on the run's training split."""
    rows, data_dir = train_split(out)
    windows = _codec_windows(rows, data_dir, cfg.audio)
    ext, rep = vqpae_train(windows, cfg.audio.train_epochs, cfg.audio,
                           seed=split_seed(cfg.seed, "codec"))
    ext.save(Path(out) / "codec.ckpt")
    return ext, {"n_windows": int(windows.shape[0]), **rep}


def stage_vae(cfg: RunConfig, out: str | Path) -> tuple[MotionVae, dict]:
    """Fit the per-frame motion VAE on the run's training split."""
    rows, data_dir = train_split(out)
    frames = _train_frames(rows, data_dir)
    vae, rep = train_vae(frames, cfg.vae, seed=split_seed(cfg.seed, "vae"))
    vae.save(Path(out) / "vae.ckpt")
    return vae, {"n_frames": int(frames.shape[0]), **rep}


def stage_denoiser(cfg: RunConfig, out: str | Path,
                   extractor: AudioFeatureExtractor | None = None,
                   vae: MotionVae | None = None) -> tuple[DenoiserNet, dict]:
    """Train the velocity denoiser on latent/condition chunks.

    Loads codec.ckpt and vae.ckpt from the run directory unless the live
    objects are passed in.
    """
    rows, data_dir = train_split(out)
    if extractor is None:
        extractor = AudioFeatureExtractor.load(Path(out) / "codec.ckpt")
    if vae is None:
        vae = MotionVae.load(Path(out) / "vae.ckpt")
    pairs = track_pairs(rows, data_dir, extractor, vae,
                        sample_z=cfg.vae.sample_z, seed=split_seed(cfg.seed, "sample-z"))
    z, c = build_chunks(pairs, cfg.denoiser.chunk_len, cfg.denoiser.chunk_stride)
    sched = ScheduleParams(cfg.sampler.window_len, cfg.sampler.ctx_len, cfg.sampler.hist_ramp)
    net, rep = train_denoiser(z, c, cfg.denoiser, sched, seed=split_seed(cfg.seed, "denoiser"))
    net.save(Path(out) / "denoiser.ckpt")
    return net, rep


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None,
                 progress=None) -> tuple[PipelineArtifacts, dict]:
    """synth -> fit codec -> train VAE -> train denoiser, with artifacts.

    Writes dataset/, codec.ckpt, vae.ckpt, denoiser.ckpt, config.toml and
    report.json under out_dir (default cfg.out_dir) and returns the paths
    plus the in-memory report.  Deterministic given (config, seed).
    """
    say = progress or (lambda msg: None)
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.archive(out)
    report: dict = {"stages": {}}

    def stage(name, fn):
        t0 = time.perf_counter()
        result = fn()
        dt = time.perf_counter() - t0
        report["stages"][name] = round(dt, 3)
        say(f"{name}: {dt:.1f}s")
        return result

    manifest = stage("synth", lambda: stage_synth(cfg, out))
    rows = load_manifest(manifest)
    n_train = sum(r["split"] == "train" for r in rows)
    report["n_tracks"] = {"train": n_train, "holdout": len(rows) - n_train}

    def do_codec():
        ext, rep = stage_codec(cfg, out)
        report["codec"] = rep
        return ext

    extractor = stage("fit-codec", do_codec)

    def do_vae():
        vae, rep = stage_vae(cfg, out)
        report["vae"] = rep
        return vae

    vae = stage("train-vae", do_vae)

    def do_denoiser():
        net, rep = stage_denoiser(cfg, out, extractor=extractor, vae=vae)
        report["denoiser"] = rep
        return net

    stage("train-denoiser", do_denoiser)

    report["total_s"] = round(sum(report["stages"].values()), 3)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    artifacts = PipelineArtifacts(
        run_dir=out,
        manifest=manifest,
        codec=out / "codec.ckpt",
        vae=out / "vae.ckpt",
        denoiser=out / "denoiser.ckpt",
        report=report_path,
    )
    return artifacts, report


def load_stack(run_dir: str | Path) -> tuple[AudioFeatureExtractor, MotionVae, DenoiserNet, RunConfig]:
    """Load the trained triple plus the archived config from a run directory."""
    run = Path(run_dir)
    cfg = RunConfig.load(run / "config.toml")
    extractor = AudioFeatureExtractor.load(run / "codec.ckpt")
    vae = MotionVae.load(run / "vae.ckpt")
    net = DenoiserNet.load(run / "denoiser.ckpt")
    return extractor, vae, net, cfg


def save_generated(path: str | Path, gen: GeneratedMotion, skeleton: Skeleton, fps: float):
    """Persist a rollout's motion frames in the standard motion format."""
    save_motion(path, gen.frames, skeleton, fps)
