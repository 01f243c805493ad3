#!/usr/bin/env python3
"""End-to-end smoke run: synth -> fit-codec -> train-vae -> train -> generate -> eval.

Drives the beatflow CLI in-process against a single run directory and
finishes by generating motion for one held-out track and scoring the run.
With --quick the config shrinks to a toy size that completes in roughly a
minute on a laptop; without it the packaged defaults are used.

Usage:
    python scripts/run_pipeline.py --out runs/smoke --quick
    python scripts/run_pipeline.py --out runs/full --seed 3
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import click

from beatflow.cli import main as cli
from beatflow.synth import load_manifest

QUICK_TOML = """\
[synth]
n_tracks = 6
duration_s = 6.0
holdout_frac = 0.3

[audio]
train_epochs = 1
train_window_stride = 6

[vae]
train_steps = 120

[denoiser]
steps = 60
batch_size = 8
chunk_len = 60
chunk_stride = 60
"""


def run_cli(args: list[str]) -> None:
    print(f"+ beatflow {' '.join(args)}", flush=True)
    try:
        cli.main(args=args, standalone_mode=False)
    except click.ClickException as exc:
        print(f"error: {exc.format_message()}", file=sys.stderr)
        raise SystemExit(1) from exc


def pick_track(run: Path) -> tuple[Path, str]:
    """First held-out wav if any, else the first training wav."""
    rows = load_manifest(run / "dataset" / "manifest.jsonl")
    rows.sort(key=lambda r: (r["split"] != "holdout", r["track"]))
    row = rows[0]
    return run / "dataset" / row["wav"], row["split"]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/smoke", help="run directory")
    ap.add_argument("--quick", action="store_true", help="toy-sized config")
    ap.add_argument("--seed", type=int, default=None, help="override config seed")
    opts = ap.parse_args()

    run = Path(opts.out)
    run.mkdir(parents=True, exist_ok=True)

    base: list[str] = ["--run-dir", str(run)]
    if opts.quick:
        cfg_path = run / "quick.toml"
        cfg_path.write_text(QUICK_TOML)
        base += ["--config", str(cfg_path)]
    if opts.seed is not None:
        base += ["--seed", str(opts.seed)]

    for stage in ("synth", "fit-codec", "train-vae", "train"):
        run_cli(base + [stage])

    wav, split = pick_track(run)
    motion_out = run / "generated" / (wav.stem + ".bfm")
    run_cli(base + ["generate", str(wav), "-o", str(motion_out)])

    eval_out = run / "eval.json"
    run_cli(base + ["eval-run", "--split", split, "-o", str(eval_out)])

    expected = [
        run / "config.toml",
        run / "report.json",
        run / "dataset" / "manifest.jsonl",
        run / "codec.ckpt",
        run / "vae.ckpt",
        run / "denoiser.ckpt",
        motion_out,
        eval_out,
    ]
    missing = [p for p in expected if not p.exists()]
    if missing:
        print("MISSING ARTIFACTS:")
        for p in missing:
            print(f"  {p}")
        return 1

    scores = json.loads(eval_out.read_text())
    print("\nartifacts:")
    for p in expected:
        print(f"  {p} ({p.stat().st_size} bytes)")
    print(f"\neval ({split} split): " + json.dumps(scores, sort_keys=True))
    print("smoke run complete")
    return 0


if __name__ == "__main__":
    sys.exit(main())
