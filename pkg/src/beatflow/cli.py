"""Command-line entry points: every stage runnable from (config, seed).

One TOML config covers all modules; --set overrides win over the file,
and every option can also come from a BEATFLOW_* environment variable.
Stage commands read and write a single run directory so the chain
synth -> fit-codec -> train-vae -> train -> generate/eval/serve/bench
is restartable at any point.  All machine-readable outputs are JSON.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import time
from dataclasses import dataclass
from pathlib import Path

import click

from .audio import load_wav
from .config import RunConfig
from .motion import SKELETONS
from .pipeline import (
    evaluate_dirs,
    evaluate_generation,
    generate_motion,
    load_stack,
    run_pipeline,
    save_generated,
    stage_codec,
    stage_denoiser,
    stage_synth,
    stage_vae,
)
from .sampler import SamplerParams
from .service import WallClock, bench, serve, session_from_run
from .synth import load_manifest


@dataclass(frozen=True)
class CliState:
    """Resolved config plus the raw flags, so run-dir configs can re-apply them."""

    cfg: RunConfig
    overrides: tuple[str, ...]
    seed: int | None


def friendly(fn):
    """Turn expected failures into a message plus nonzero exit."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (ValueError, OSError, RuntimeError, KeyError) as exc:
            raise click.ClickException(str(exc))

    return wrapper


@click.group(context_settings={"auto_envvar_prefix": "BEATFLOW",
                               "help_option_names": ["-h", "--help"]})
@click.option("--config", "-c", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="TOML config file; documented defaults apply when omitted.")
@click.option("--set", "-s", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
              help="Override one config key (repeatable; wins over the file).")
@click.option("--run-dir", default=None, type=click.Path(file_okay=False),
              help="Run directory; overrides out_dir from the config.")
@click.option("--seed", default=None, type=int, help="Root seed; overrides the config.")
@click.pass_context
@friendly
def main(ctx, config_path, overrides, run_dir, seed):
    """Streaming audio-driven motion: train, roll out, and serve."""
    cfg = RunConfig.load(config_path, list(overrides))
    if run_dir is not None:
        cfg = dataclasses.replace(cfg, out_dir=run_dir)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    ctx.obj = CliState(cfg, tuple(overrides), seed)


def _merge_report(out: Path, fragment: dict):
    path = Path(out) / "report.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data.update(fragment)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _begin_stage(state: CliState) -> Path:
    out = Path(state.cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state.cfg.archive(out)
    return out


def _load_run(state: CliState):
    """Trained stack plus the archived config with CLI flags re-applied."""
    run = Path(state.cfg.out_dir)
    if not (run / "config.toml").exists():
        raise click.ClickException(f"no trained run at {run} (missing config.toml)")
    extractor, vae, net, _ = load_stack(run)
    cfg = RunConfig.load(run / "config.toml", list(state.overrides))
    if state.seed is not None:
        cfg = dataclasses.replace(cfg, seed=state.seed)
    return run, cfg, extractor, vae, net


def _emit_json(report: dict, out_file: str | None):
    text = json.dumps(report, indent=2, sort_keys=True)
    click.echo(text)
    if out_file:
        Path(out_file).write_text(text + "\n")


@main.command()
@click.pass_obj
@friendly
def synth(state):
    """Generate the paired audio/motion training corpus."""
    out = _begin_stage(state)
    manifest = stage_synth(state.cfg, out)
    rows = load_manifest(manifest)
    n_train = sum(r["split"] == "train" for r in rows)
    _merge_report(out, {"n_tracks": {"train": n_train, "holdout": len(rows) - n_train}})
    click.echo(f"wrote {len(rows)} tracks ({n_train} train) -> {manifest}")


@main.command("fit-codec")
@click.pass_obj
@friendly
def fit_codec(state):
    """Fit the causal music feature codec on the training split."""
    out = _begin_stage(state)
    _, rep = stage_codec(state.cfg, out)
    _merge_report(out, {"codec": rep})
    click.echo(f"codec fit on {rep['n_windows']} windows -> {out / 'codec.ckpt'}")


@main.command("train-vae")
@click.pass_obj
@friendly
def train_vae_cmd(state):
    """Train the per-frame motion VAE on the training split."""
    out = _begin_stage(state)
    _, rep = stage_vae(state.cfg, out)
    _merge_report(out, {"vae": rep})
    click.echo(f"vae trained on {rep['n_frames']} frames -> {out / 'vae.ckpt'}")


@main.command()
@click.pass_obj
@friendly
def train(state):
    """Train the windowed flow-matching denoiser (hybrid noise schedules)."""
    out = _begin_stage(state)
    _, rep = stage_denoiser(state.cfg, out)
    _merge_report(out, {"denoiser": rep})
    click.echo(f"denoiser final loss {rep['final_loss']:.4f} "
               f"({rep['steps']} steps) -> {out / 'denoiser.ckpt'}")


@main.command()
@click.pass_obj
@friendly
def pipeline(state):
    """Run all four training stages in one go."""
    artifacts, report = run_pipeline(state.cfg, progress=click.echo)
    click.echo(f"pipeline done in {report['total_s']}s -> {artifacts.run_dir}")


@main.command()
@click.argument("audio_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-file", "-o", default=None, type=click.Path(dir_okay=False),
              help="Motion output path (default: <audio stem>.bfm beside the input).")
@click.pass_obj
@friendly
def generate(state, audio_file, out_file):
    """Roll the trained stack causally over one WAV file."""
    _, cfg, extractor, vae, net = _load_run(state)
    samples, rate = load_wav(audio_file)
    if rate != extractor.cfg.sample_rate:
        raise click.ClickException(
            f"{audio_file}: sample rate {rate} != codec rate {extractor.cfg.sample_rate}")
    skeleton = SKELETONS[cfg.motion.skeleton]
    gen = generate_motion(samples, extractor, vae, net,
                          SamplerParams.from_config(cfg.sampler),
                          seed=cfg.seed, skeleton=skeleton)
    dest = Path(out_file) if out_file else Path(audio_file).with_suffix(".bfm")
    dest.parent.mkdir(parents=True, exist_ok=True)
    save_generated(dest, gen, skeleton, extractor.cfg.fps)
    click.echo(f"{gen.frames.shape[0]} frames, {gen.model_calls} model calls -> {dest}")


@main.command("eval")
@click.argument("gen_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("ref_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--beats-dir", default=None, type=click.Path(exists=True, file_okay=False),
              help="Directory with <stem>.beats.json annotations (default: REF_DIR).")
@click.option("--out-file", "-o", default=None, type=click.Path(dir_okay=False),
              help="Also write the metrics JSON here.")
@click.pass_obj
@friendly
def eval_cmd(state, gen_dir, ref_dir, beats_dir, out_file):
    """Compare a directory of generated motion against references."""
    report = evaluate_dirs(gen_dir, ref_dir, beats_dir, state.cfg.eval)
    _emit_json(report, out_file)


@main.command("eval-run")
@click.option("--split", default="holdout", show_default=True,
              type=click.Choice(["holdout", "train"]),
              help="Which dataset split to regenerate and score.")
@click.option("--out-file", "-o", default=None, type=click.Path(dir_okay=False),
              help="Also write the metrics JSON here.")
@click.pass_obj
@friendly
def eval_run(state, split, out_file):
    """Regenerate the run's dataset split and score it (cond vs uncond)."""
    run, cfg, extractor, vae, net = _load_run(state)
    rows = [r for r in load_manifest(run / "dataset" / "manifest.jsonl")
            if r["split"] == split]
    report = evaluate_generation(rows, run / "dataset", extractor, vae, net,
                                 SamplerParams.from_config(cfg.sampler), cfg,
                                 seed=cfg.seed)
    _emit_json(report, out_file)


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True, type=int)
@click.option("--sim-clock", is_flag=True,
              help="Simulated time: zero latencies, deterministic replay.")
@click.pass_obj
@friendly
def serve_cmd(state, host, port, sim_clock):
    """Serve the live websocket stream from a trained run."""
    run = Path(state.cfg.out_dir)
    if not (run / "config.toml").exists():
        raise click.ClickException(f"no trained run at {run} (missing config.toml)")
    serve(run, host=host, port=port, seed=state.seed, sim_clock=sim_clock)


@main.command("bench")
@click.option("--ticks", default=300, show_default=True, type=int)
@click.option("--out-file", "-o", default=None, type=click.Path(dir_okay=False),
              help="Also write the latency JSON here.")
@click.pass_obj
@friendly
def bench_cmd(state, ticks, out_file):
    """Per-stage latency percentiles over an unpaced wall-clock run."""
    session = session_from_run(Path(state.cfg.out_dir), clock=WallClock(),
                               seed=state.seed)
    t0 = time.perf_counter()
    report = bench(session, ticks)
    report["wall_s"] = round(time.perf_counter() - t0, 3)
    _emit_json(report, out_file)


if __name__ == "__main__":
    main()
