/**
 * Client-side view of the stream session.
 *
 * The UI never shows a knob value the server has not confirmed: commands
 * sit in a pending queue until the matching ack arrives, and only then do
 * the displayed omega / tempo / mute values change. Render state keeps a
 * bounded window of recent ticks for the latency sparkline.
 */

import {
  AckFrame,
  CommandName,
  ErrorFrame,
  HelloFrame,
  TickFrame,
} from "./protocol.js";

export const TICK_WINDOW = 90;

export type ConnectionStatus = "connecting" | "open" | "closed";

export interface PendingCommand {
  cmd: CommandName;
  value?: number | boolean;
}

export interface KnobState {
  omega: number;
  tempo: number;
  muted: boolean;
  track: number;
}

export class UiState {
  status: ConnectionStatus = "connecting";
  hello: HelloFrame | null = null;
  /** Server-acknowledged knob values; null until the hello frame lands. */
  knobs: KnobState | null = null;
  lastAck: AckFrame | null = null;
  lastError: string | null = null;
  /** Wall time of the most recent tick, for staleness detection. */
  lastTickAt = 0;

  private ticks: TickFrame[] = [];
  private pending: PendingCommand[] = [];

  onStatus(status: ConnectionStatus): void {
    this.status = status;
    if (status !== "open") {
      // A reconnect starts a fresh session; queued commands died with
      // the old socket and must not be committed against the new one.
      this.pending = [];
    }
  }

  onHello(frame: HelloFrame): void {
    this.hello = frame;
    this.ticks = [];
    this.pending = [];
    this.lastError = null;
    const track = frame.tracks.length > 0 ? frame.tracks[0]!.id : 0;
    this.knobs = { omega: frame.omega, tempo: 1.0, muted: false, track };
  }

  onTick(frame: TickFrame, now: number): void {
    this.ticks.push(frame);
    if (this.ticks.length > TICK_WINDOW) {
      this.ticks.splice(0, this.ticks.length - TICK_WINDOW);
    }
    this.lastTickAt = now;
    if (this.knobs !== null) {
      // Track and omega ride along on every tick, so reflect them even
      // if an ack was dropped.
      this.knobs.track = frame.track;
      this.knobs.omega = frame.omega;
    }
  }

  /** Record a command sent to the server; displayed state is unchanged. */
  onSent(cmd: PendingCommand): void {
    this.pending.push(cmd);
  }

  onAck(frame: AckFrame, now?: number): void {
    this.lastAck = frame;
    const idx = this.pending.findIndex((p) => p.cmd === frame.cmd);
    if (idx < 0) return;
    const [confirmed] = this.pending.splice(idx, 1);
    if (this.knobs === null || confirmed === undefined) return;
    switch (confirmed.cmd) {
      case "set_omega":
        if (typeof confirmed.value === "number") this.knobs.omega = confirmed.value;
        break;
      case "tempo_scale":
        if (typeof confirmed.value === "number") this.knobs.tempo = confirmed.value;
        break;
      case "mute":
        if (typeof confirmed.value === "boolean") this.knobs.muted = confirmed.value;
        break;
      case "select_track":
        if (typeof confirmed.value === "number") this.knobs.track = confirmed.value;
        break;
      case "reset":
        break;
    }
    void now;
  }

  onError(frame: ErrorFrame): void {
    this.lastError = frame.message;
    // A rejected command never applies; drop the oldest pending entry so
    // later acks match the right submission.
    this.pending.shift();
  }

  latestTick(): TickFrame | null {
    return this.ticks.length > 0 ? this.ticks[this.ticks.length - 1]! : null;
  }

  recentTicks(): readonly TickFrame[] {
    return this.ticks;
  }

  pendingCount(): number {
    return this.pending.length;
  }

  /** True when the stream has gone quiet for longer than `maxAgeMs`. */
  isStale(now: number, maxAgeMs: number): boolean {
    if (this.status !== "open" || this.lastTickAt === 0) return false;
    return now - this.lastTickAt > maxAgeMs;
  }
}
