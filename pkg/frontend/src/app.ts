/**
 * Browser entry point: wires the stream client and UI state to the DOM.
 *
 * The render loop runs on requestAnimationFrame and always draws only
 * the latest tick, so a slow tab drops frames instead of falling behind
 * the stream. Control changes go through the websocket and update the
 * panel only after the server acknowledges them.
 */

import { StreamClient } from "./client.js";
import { CommandName, ServerFrame } from "./protocol.js";
import { UiState } from "./state.js";
import {
  drawPanel,
  followViewport,
  projectSide,
  projectTop,
  SIDE_STYLE,
  TOP_STYLE,
  Viewport,
} from "./render.js";

const STALE_MS = 1500;
const BEAT_FLASH_MS = 120;

function getElement<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing element #${id}`);
  return el as T;
}

function wsUrl(): string {
  const proto = window.location.protocol === "https:" ? "wss" : "ws";
  return `${proto}://${window.location.host}/ws`;
}

function main(): void {
  const state = new UiState();

  const statusEl = getElement<HTMLSpanElement>("status");
  const staleEl = getElement<HTMLSpanElement>("stale");
  const errorEl = getElement<HTMLDivElement>("error-banner");
  const ackEl = getElement<HTMLSpanElement>("ack");
  const tickEl = getElement<HTMLSpanElement>("tick");
  const latencyEl = getElement<HTMLSpanElement>("latency");
  const budgetEl = getElement<HTMLSpanElement>("budget");
  const trackSel = getElement<HTMLSelectElement>("track");
  const muteBtn = getElement<HTMLButtonElement>("mute");
  const resetBtn = getElement<HTMLButtonElement>("reset");
  const tempoSlider = getElement<HTMLInputElement>("tempo");
  const tempoLabel = getElement<HTMLSpanElement>("tempo-label");
  const omegaSlider = getElement<HTMLInputElement>("omega");
  const omegaLabel = getElement<HTMLSpanElement>("omega-label");
  const sideCanvas = getElement<HTMLCanvasElement>("side-view");
  const topCanvas = getElement<HTMLCanvasElement>("top-view");
  const sideCtx = sideCanvas.getContext("2d");
  const topCtx = topCanvas.getContext("2d");
  if (sideCtx === null || topCtx === null) throw new Error("canvas 2d unavailable");

  let sideViewport: Viewport | null = null;
  let topViewport: Viewport | null = null;
  let lastBeatAt = 0;
  let errorShownAt = 0;

  const client = new StreamClient(
    wsUrl(),
    {
      onFrame: (frame: ServerFrame) => {
        if (frame.type === "tick") {
          state.onTick(frame, performance.now());
          if (frame.beat) lastBeatAt = performance.now();
        } else if (frame.type === "hello") {
          state.onHello(frame);
          populateControls();
        } else if (frame.type === "ack") {
          state.onAck(frame);
        } else {
          state.onError(frame);
          errorShownAt = performance.now();
        }
      },
      onStatus: (status) => state.onStatus(status),
    },
  );

  function sendCommand(cmd: CommandName, value?: number | boolean): void {
    const payload = value === undefined ? { type: "cmd" as const, cmd } : { type: "cmd" as const, cmd, value };
    if (client.send(payload)) {
      state.onSent({ cmd, value });
    } else {
      state.lastError = "not connected; command dropped";
      errorShownAt = performance.now();
    }
  }

  function populateControls(): void {
    const hello = state.hello;
    if (hello === null) return;
    budgetEl.textContent = `${hello.tick_budget_ms.toFixed(1)} ms budget @ ${hello.fps} fps`;
    trackSel.innerHTML = "";
    for (const t of hello.tracks) {
      const opt = document.createElement("option");
      opt.value = String(t.id);
      opt.textContent = `${t.name} (${t.duration_s.toFixed(1)}s)`;
      trackSel.appendChild(opt);
    }
    omegaSlider.value = String(hello.omega);
    tempoSlider.value = "1";
  }

  trackSel.addEventListener("change", () => {
    sendCommand("select_track", Number(trackSel.value));
  });
  muteBtn.addEventListener("click", () => {
    const next = !(state.knobs?.muted ?? false);
    sendCommand("mute", next);
  });
  resetBtn.addEventListener("click", () => sendCommand("reset"));
  tempoSlider.addEventListener("change", () => {
    sendCommand("tempo_scale", Number(tempoSlider.value));
  });
  omegaSlider.addEventListener("change", () => {
    sendCommand("set_omega", Number(omegaSlider.value));
  });

  function renderHud(now: number): void {
    statusEl.textContent = state.status;
    statusEl.className = `pill ${state.status}`;
    staleEl.hidden = !state.isStale(now, STALE_MS);

    if (state.lastError !== null && now - errorShownAt < 4000) {
      errorEl.textContent = state.lastError;
      errorEl.hidden = false;
    } else {
      errorEl.hidden = true;
    }

    const ack = state.lastAck;
    ackEl.textContent =
      ack === null ? "-" : `${ack.cmd} @ tick ${ack.applies_at_tick}`;

    const knobs = state.knobs;
    if (knobs !== null) {
      tempoLabel.textContent = `${knobs.tempo.toFixed(2)}x`;
      omegaLabel.textContent = knobs.omega.toFixed(2);
      muteBtn.textContent = knobs.muted ? "unmute" : "mute";
      if (document.activeElement !== trackSel) {
        trackSel.value = String(knobs.track);
      }
    }

    const tick = state.latestTick();
    if (tick !== null) {
      tickEl.textContent = String(tick.tick);
      const lat = tick.latency_ms;
      latencyEl.textContent =
        `cond ${lat.cond.toFixed(1)} / sample ${lat.sample.toFixed(1)} / ` +
        `decode ${lat.decode.toFixed(1)} / total ${lat.total.toFixed(1)} ms`;
    }
  }

  function renderPose(now: number): void {
    const tick = state.latestTick();
    const hello = state.hello;
    if (tick === null || hello === null) return;
    const beat = now - lastBeatAt < BEAT_FLASH_MS;
    const joints = tick.pose.joints;
    const parents = hello.skeleton.parents;

    const sidePts = joints.map(projectSide);
    sideViewport = followViewport(
      sideViewport,
      sidePts,
      sideCanvas.width,
      sideCanvas.height,
    );
    drawPanel(sideCtx!, joints, parents, projectSide, sideViewport, SIDE_STYLE, beat);

    const topPts = joints.map(projectTop);
    topViewport = followViewport(topViewport, topPts, topCanvas.width, topCanvas.height);
    drawPanel(topCtx!, joints, parents, projectTop, topViewport, TOP_STYLE, beat);
  }

  function frame(): void {
    const now = performance.now();
    renderHud(now);
    renderPose(now);
    requestAnimationFrame(frame);
  }

  client.connect();
  requestAnimationFrame(frame);
}

main();
