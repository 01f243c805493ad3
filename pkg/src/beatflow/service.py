"""30 Hz real-time loop: audio in, one denoised pose out, per tick.

A StreamSession binds the trained stack (conditioner, VAE, velocity net)
to one FIFO sampler stream plus a motion decoder, and advances them one
tick at a time with per-stage latency accounting.  Sessions are pure and
synchronous; pacing comes from a Clock (wall for live/bench, simulated
for byte-identical replay tests) and transport comes from the websocket
app at the bottom of the module.  Commands are queued on submit and take
effect at the next tick boundary, so a report stream is a deterministic
function of (config, seed, command script) under the simulated clock.
"""

from __future__ import annotations

import asyncio
import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .audio import AudioRingBuffer, load_wav
from .config import RunConfig
from .motion import SKELETONS, GlobalPose, MotionDecoder, Skeleton
from .pipeline import load_stack, rest_latent, silence_condition
from .sampler import SamplerParams, StreamingError, new_stream, stream_step, warmup
from .synth import load_manifest

log = logging.getLogger("beatflow.service")

COMMANDS = ("select_track", "mute", "tempo_scale", "set_omega", "reset")
TEMPO_BOUNDS = (0.25, 4.0)


# ---------------------------------------------------------------------------
# clocks


class WallClock:
    """Real time; sleep_until blocks."""

    def now(self) -> float:
        return time.perf_counter()

    def sleep_until(self, t: float):
        dt = t - self.now()
        if dt > 0:
            time.sleep(dt)


class SimClock:
    """Deterministic time; advances only when slept.

    Every call inside one tick sees the same timestamp, so simulated
    latencies are exactly zero and replayed report streams match byte for
    byte.
    """

    def __init__(self, t0: float = 0.0):
        self.t = float(t0)

    def now(self) -> float:
        return self.t

    def sleep_until(self, t: float):
        if t > self.t:
            self.t = float(t)


# ---------------------------------------------------------------------------
# audio sources


@dataclass
class TrackEntry:
    """One preloaded library item: samples plus its beat annotations."""

    track_id: int
    name: str
    samples: np.ndarray
    beats_s: np.ndarray
    sample_rate: int

    @property
    def duration_s(self) -> float:
        return self.samples.shape[0] / self.sample_rate


class TrackPlayer:
    """Looping, tempo-scalable reader over a TrackEntry.

    read(hop, tempo) consumes hop * tempo source samples, linearly
    resampled down to hop output samples, and reports whether an annotated
    beat fell inside the consumed span.  Position wraps at the end of the
    track.
    """

    def __init__(self, entry: TrackEntry):
        self.entry = entry
        self.pos = 0.0  # source sample offset

    def reset(self):
        self.pos = 0.0

    def read(self, hop: int, tempo: float) -> tuple[np.ndarray, bool]:
        src = self.entry.samples
        n = src.shape[0]
        xs = (self.pos + np.arange(hop, dtype=np.float64) * tempo) % n
        base = xs.astype(np.int64)
        frac = xs - base
        nxt = (base + 1) % n
        chunk = src[base] * (1.0 - frac) + src[nxt] * frac
        start, span = self.pos, hop * tempo
        self.pos = (self.pos + span) % n
        beat = self._beat_in(start, span)
        return chunk, beat

    def _beat_in(self, start: float, span: float) -> bool:
        rate = self.entry.sample_rate
        beats = self.entry.beats_s * rate
        n = self.entry.samples.shape[0]
        end = start + span
        if end <= n:
            return bool(np.any((beats >= start) & (beats < end)))
        # wrapped interval: [start, n) plus [0, end - n)
        return bool(np.any(beats >= start) or np.any(beats < end - n))


def load_track_library(run_dir: str | Path, limit: int | None = None) -> list[TrackEntry]:
    """Preload dataset tracks (holdout first, so live use defaults to
    material the model never trained on)."""
    run = Path(run_dir)
    rows = load_manifest(run / "dataset" / "manifest.jsonl")
    rows.sort(key=lambda r: (r["split"] != "holdout", r["track"]))
    if limit is not None:
        rows = rows[:limit]
    entries = []
    for row in rows:
        samples, rate = load_wav(run / "dataset" / row["wav"])
        with open(run / "dataset" / row["beats"]) as fh:
            beats = np.asarray(json.load(fh), dtype=np.float64)
        entries.append(TrackEntry(int(row["track"]), Path(row["wav"]).stem, samples, beats, rate))
    return entries


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class TickReport:
    tick: int
    pose: GlobalPose
    cond_ms: float
    sample_ms: float
    decode_ms: float
    total_ms: float
    track_id: int
    omega: float
    beat: bool

    def to_frame(self) -> dict:
        """The documented server->client tick frame."""
        return {
            "type": "tick",
            "tick": self.tick,
            "pose": {
                "root": [float(v) for v in self.pose.root_pos],
                "joints": [[float(v) for v in row] for row in self.pose.joint_pos],
            },
            "latency_ms": {
                "cond": self.cond_ms,
                "sample": self.sample_ms,
                "decode": self.decode_ms,
                "total": self.total_ms,
            },
            "track": self.track_id,
            "omega": self.omega,
            "beat": self.beat,
        }

    def json_line(self) -> str:
        return json.dumps(self.to_frame(), sort_keys=True)


# ---------------------------------------------------------------------------
# session


class StreamSession:
    """One live generation loop over a track library.

    step() computes exactly one tick: pull one hop of audio from the
    selected player (silence while muted), extract the causal condition,
    advance the FIFO sampler one step, and decode the emitted latent to a
    world pose.  submit() validates a command immediately but applies it
    at the next step() call, acknowledging the tick it will first affect.
    """

    def __init__(
        self,
        extractor,
        vae,
        net,
        tracks: list[TrackEntry],
        params: SamplerParams,
        clock=None,
        tick_hz: float = 30.0,
        seed: int = 0,
        skeleton: Skeleton | None = None,
    ):
        if not tracks:
            raise ValueError("track library is empty")
        if tick_hz <= 0:
            raise ValueError(f"tick rate must be positive, got {tick_hz}")
        self.extractor = extractor
        self.vae = vae
        self.net = net
        self.tracks = {t.track_id: t for t in tracks}
        self.params = params
        self.clock = clock or WallClock()
        self.tick_hz = tick_hz
        self.seed = seed
        self.skeleton = skeleton or SKELETONS["toy5"]
        self.hop = extractor.cfg.sample_rate // extractor.cfg.fps
        self._idle = rest_latent(vae, self.skeleton)
        self._idle_cond = silence_condition(extractor)

        self.tick = 0
        self.omega = params.omega
        self.tempo = 1.0
        self.muted = False
        self.player = TrackPlayer(next(iter(self.tracks.values())))
        self.pending: list[dict] = []
        self.overruns: list[int] = []
        self._reset_generation()

    # -- lifecycle

    def _reset_generation(self):
        """Fresh buffer, sampler state, and decoder; warmup reapplied."""
        cfg = self.extractor.cfg
        self.buf = AudioRingBuffer(cfg.sample_rate, cfg.window_s, cfg.fps)
        self.state = new_stream(self.params, d_z=self._idle.shape[0],
                                d_c=self._idle_cond.shape[0], seed=self.seed)
        n_warm = max(self.params.ctx_len, self.params.window_len - 1)
        warmup(self.state, self._idle, n_warm, self.params, idle_cond=self._idle_cond)
        self.decoder = MotionDecoder(self.skeleton, self.skeleton.rest_pose())
        self.player.reset()

    # -- commands

    def submit(self, cmd: dict) -> dict:
        """Validate now, apply at the next tick boundary, ack with that tick."""
        if not isinstance(cmd, dict) or cmd.get("type") != "cmd":
            return {"type": "error", "message": "expected {\"type\": \"cmd\", ...}"}
        name = cmd.get("cmd")
        if name not in COMMANDS:
            return {"type": "error", "message": f"unknown command {name!r}"}
        value = cmd.get("value")
        err = self._validate(name, value)
        if err:
            return {"type": "error", "message": err}
        self.pending.append({"cmd": name, "value": value})
        return {"type": "ack", "cmd": name, "applies_at_tick": self.tick}

    def _validate(self, name: str, value) -> str | None:
        if name == "select_track":
            if not isinstance(value, int) or isinstance(value, bool) or value not in self.tracks:
                return f"unknown track id {value!r}"
        elif name == "mute":
            if not isinstance(value, bool):
                return "mute expects a boolean value"
        elif name == "tempo_scale":
            if not isinstance(value, (int, float)) or isinstance(value, bool) \
                    or not np.isfinite(value) or not (TEMPO_BOUNDS[0] <= value <= TEMPO_BOUNDS[1]):
                return f"tempo_scale expects a factor in [{TEMPO_BOUNDS[0]}, {TEMPO_BOUNDS[1]}]"
        elif name == "set_omega":
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not np.isfinite(value):
                return "set_omega expects a finite number"
        return None

    def _apply(self, cmd: dict):
        name, value = cmd["cmd"], cmd["value"]
        if name == "select_track":
            self.player = TrackPlayer(self.tracks[value])
        elif name == "mute":
            self.muted = bool(value)
        elif name == "tempo_scale":
            self.tempo = float(value)
        elif name == "set_omega":
            self.omega = float(value)
            self.params = dataclasses.replace(self.params, omega=self.omega)
        elif name == "reset":
            self._reset_generation()

    # -- the tick

    def step(self) -> TickReport:
        now = self.clock.now
        t0 = now()
        for cmd in self.pending:
            self._apply(cmd)
        self.pending.clear()

        if self.muted:
            chunk, beat = np.zeros(self.hop), False
        else:
            chunk, beat = self.player.read(self.hop, self.tempo)
        self.buf.push_samples(chunk, self.extractor.cfg.sample_rate)
        cond = self.extractor.condition_from_buffer(self.buf, self.tick).vector
        t1 = now()

        token = stream_step(self.state, cond, self.net, self.params)
        if token is None:  # warmup >= window_len - 1 makes this unreachable
            raise StreamingError("sampler produced no token", {"tick": self.tick})
        t2 = now()

        frame = self.vae.decode_latents(token)
        pose = self.decoder.step(frame)
        t3 = now()

        report = TickReport(
            tick=self.tick,
            pose=pose,
            cond_ms=(t1 - t0) * 1e3,
            sample_ms=(t2 - t1) * 1e3,
            decode_ms=(t3 - t2) * 1e3,
            total_ms=(t3 - t0) * 1e3,
            track_id=self.player.entry.track_id,
            omega=self.omega,
            beat=beat,
        )
        if report.total_ms > self.tick_budget_ms:
            self.overruns.append(self.tick)
            log.warning("tick %d overran budget: %.2f ms > %.2f ms",
                        self.tick, report.total_ms, self.tick_budget_ms)
        self.tick += 1
        return report

    @property
    def tick_budget_ms(self) -> float:
        return 1000.0 / self.tick_hz

    def hello_frame(self) -> dict:
        """Connection preamble: skeleton geometry and the track library."""
        sk = self.skeleton
        return {
            "type": "hello",
            "fps": self.tick_hz,
            "omega": self.omega,
            "tick_budget_ms": self.tick_budget_ms,
            "skeleton": {
                "name": sk.name,
                "parents": list(sk.parents),
                "joint_names": list(sk.joint_names),
                "foot_indices": list(sk.foot_indices),
            },
            "tracks": [
                {"id": t.track_id, "name": t.name, "duration_s": round(t.duration_s, 3)}
                for t in self.tracks.values()
            ],
        }


def session_from_run(run_dir: str | Path, clock=None, seed: int | None = None,
                     max_tracks: int | None = 8) -> StreamSession:
    """Build a live session from a pipeline run directory."""
    extractor, vae, net, cfg = load_stack(run_dir)
    tracks = load_track_library(run_dir, limit=max_tracks)
    return StreamSession(
        extractor, vae, net, tracks,
        SamplerParams.from_config(cfg.sampler),
        clock=clock,
        tick_hz=cfg.service.tick_hz,
        seed=cfg.seed if seed is None else seed,
        skeleton=SKELETONS[cfg.motion.skeleton],
    )


# ---------------------------------------------------------------------------
# paced loops


def run_session(session: StreamSession, n_ticks: int, paced: bool = True):
    """Yield n_ticks reports, sleeping to the tick grid when paced."""
    period = 1.0 / session.tick_hz
    start = session.clock.now()
    for i in range(n_ticks):
        yield session.step()
        if paced:
            session.clock.sleep_until(start + (i + 1) * period)


def run_scripted(session: StreamSession, n_ticks: int,
                 script: dict[int, list[dict]] | None = None) -> tuple[list[str], list[dict]]:
    """Deterministic replay driver: commands keyed by the tick after which
    they are submitted.  Returns (report json lines, command replies)."""
    script = script or {}
    lines, replies = [], []
    for report in run_session(session, n_ticks):
        lines.append(report.json_line())
        for cmd in script.get(report.tick, []):
            replies.append(session.submit(cmd))
    return lines, replies


def bench(session: StreamSession, n_ticks: int) -> dict:
    """Latency percentiles per stage over an unpaced wall-clock run."""
    stages = {"cond": [], "sample": [], "decode": [], "total": []}
    for report in run_session(session, n_ticks, paced=False):
        stages["cond"].append(report.cond_ms)
        stages["sample"].append(report.sample_ms)
        stages["decode"].append(report.decode_ms)
        stages["total"].append(report.total_ms)
    out = {"n_ticks": n_ticks, "tick_budget_ms": session.tick_budget_ms,
           "overruns": len(session.overruns), "stages": {}}
    for name, vals in stages.items():
        arr = np.asarray(vals)
        out["stages"][name] = {} if arr.size == 0 else {
            "p50_ms": round(float(np.percentile(arr, 50)), 3),
            "p95_ms": round(float(np.percentile(arr, 95)), 3),
            "max_ms": round(float(arr.max()), 3),
        }
    return out


# ---------------------------------------------------------------------------
# websocket transport

SEND_QUEUE_LIMIT = 16  # pending frames before a client counts as lagging


def build_app(run_dir: str | Path, seed: int | None = None, sim_clock: bool = False,
              static_dir: str | Path | None = None):
    """FastAPI app: one independent StreamSession per websocket connection.

    The tick loop never blocks on a slow consumer: outbound frames go
    through a bounded queue and a client that lets it fill is dropped.
    """
    app = FastAPI(title="beatflow stream service")
    run_dir = Path(run_dir)

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        clock = SimClock() if sim_clock else WallClock()
        session = session_from_run(run_dir, clock=clock, seed=seed)
        await ws.send_text(json.dumps(session.hello_frame(), sort_keys=True))
        queue: asyncio.Queue[str] = asyncio.Queue(maxsize=SEND_QUEUE_LIMIT)
        lagging = asyncio.Event()

        async def sender():
            while True:
                await ws.send_text(await queue.get())

        async def receiver():
            while True:
                raw = await ws.receive_text()
                try:
                    cmd = json.loads(raw)
                except json.JSONDecodeError:
                    reply = {"type": "error", "message": "invalid JSON"}
                else:
                    reply = session.submit(cmd)
                _offer(queue, json.dumps(reply, sort_keys=True), lagging)

        async def ticker():
            period = 1.0 / session.tick_hz
            loop = asyncio.get_running_loop()
            next_deadline = loop.time()
            while not lagging.is_set():
                report = session.step()
                _offer(queue, report.json_line(), lagging)
                next_deadline += period
                if not sim_clock:
                    await asyncio.sleep(max(0.0, next_deadline - loop.time()))
                else:
                    await asyncio.sleep(0)

        tasks = [asyncio.create_task(t()) for t in (sender, receiver, ticker)]
        try:
            done, _ = await asyncio.wait(tasks, return_when=asyncio.FIRST_EXCEPTION)
            for task in done:
                exc = task.exception()
                if exc is not None and not isinstance(exc, WebSocketDisconnect):
                    log.error("session error at tick %d: %s", session.tick, exc)
                    try:
                        await ws.send_text(json.dumps(
                            {"type": "error", "message": f"session terminated: {exc}"}))
                    except Exception:
                        pass
                    break
        finally:
            for task in tasks:
                task.cancel()
            try:
                await ws.close()
            except Exception:
                pass
            if lagging.is_set():
                log.warning("disconnected lagging client at tick %d", session.tick)

    static = Path(static_dir) if static_dir else Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if static.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static, html=True), name="ui")
    return app


def _offer(queue: asyncio.Queue, item: str, lagging: asyncio.Event):
    try:
        queue.put_nowait(item)
    except asyncio.QueueFull:
        lagging.set()


def serve(run_dir: str | Path, host: str = "127.0.0.1", port: int = 8765,
          seed: int | None = None, sim_clock: bool = False):
    """Blocking entry point used by the CLI."""
    import uvicorn

    app = build_app(run_dir, seed=seed, sim_clock=sim_clock)
    uvicorn.run(app, host=host, port=port, log_level="info")
