/**
 * Websocket client with automatic reconnect.
 *
 * The socket constructor and timer functions are injectable so the
 * reconnect/backoff logic is testable with a fake socket and fake clock.
 * Commands are only ever sent on an open socket; the caller is told when
 * a send was dropped so it can avoid queueing optimistic UI changes.
 */

import { ClientCommand, parseServerFrame, ServerFrame } from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ClientHooks {
  onFrame: (frame: ServerFrame) => void;
  onStatus: (status: "connecting" | "open" | "closed") => void;
}

export interface ClientOptions {
  socketFactory?: SocketFactory;
  setTimeoutFn?: (fn: () => void, ms: number) => number;
  backoffBaseMs?: number;
  backoffCapMs?: number;
}

export const BACKOFF_BASE_MS = 500;
export const BACKOFF_CAP_MS = 8000;

export function backoffDelay(attempt: number, baseMs: number, capMs: number): number {
  return Math.min(capMs, baseMs * 2 ** attempt);
}

export class StreamClient {
  private readonly url: string;
  private readonly hooks: ClientHooks;
  private readonly makeSocket: SocketFactory;
  private readonly schedule: (fn: () => void, ms: number) => number;
  private readonly baseMs: number;
  private readonly capMs: number;

  private socket: SocketLike | null = null;
  private open = false;
  private attempts = 0;
  private stopped = false;

  constructor(url: string, hooks: ClientHooks, opts: ClientOptions = {}) {
    this.url = url;
    this.hooks = hooks;
    this.makeSocket =
      opts.socketFactory ?? ((u) => new WebSocket(u) as unknown as SocketLike);
    this.schedule =
      opts.setTimeoutFn ?? ((fn, ms) => setTimeout(fn, ms) as unknown as number);
    this.baseMs = opts.backoffBaseMs ?? BACKOFF_BASE_MS;
    this.capMs = opts.backoffCapMs ?? BACKOFF_CAP_MS;
  }

  connect(): void {
    if (this.stopped) return;
    this.hooks.onStatus("connecting");
    const sock = this.makeSocket(this.url);
    this.socket = sock;
    sock.onopen = () => {
      this.open = true;
      this.attempts = 0;
      this.hooks.onStatus("open");
    };
    sock.onmessage = (ev) => {
      if (typeof ev.data !== "string") return;
      const frame = parseServerFrame(ev.data);
      if (frame !== null) this.hooks.onFrame(frame);
    };
    sock.onclose = () => this.handleClose(sock);
    sock.onerror = () => this.handleClose(sock);
  }

  private handleClose(sock: SocketLike): void {
    if (sock !== this.socket) return;
    this.socket = null;
    this.open = false;
    this.hooks.onStatus("closed");
    if (this.stopped) return;
    const delay = backoffDelay(this.attempts, this.baseMs, this.capMs);
    this.attempts += 1;
    this.schedule(() => this.connect(), delay);
  }

  /** Send a command; false when the socket is not open (command dropped). */
  send(cmd: ClientCommand): boolean {
    if (!this.open || this.socket === null) return false;
    this.socket.send(JSON.stringify(cmd));
    return true;
  }

  isOpen(): boolean {
    return this.open;
  }

  stop(): void {
    this.stopped = true;
    if (this.socket !== null) this.socket.close();
  }
}
