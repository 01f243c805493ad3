/**
 * Wire protocol spoken by the stream service websocket.
 *
 * Runtime guards mirror the server's JSON schema exactly; anything that
 * fails a guard is dropped by the client rather than rendered, so a
 * protocol drift shows up as a validation error instead of NaN geometry.
 */

export interface SkeletonInfo {
  name: string;
  parents: number[];
  joint_names: string[];
  foot_indices: number[];
}

export interface TrackInfo {
  id: number;
  name: string;
  duration_s: number;
}

export interface HelloFrame {
  type: "hello";
  fps: number;
  omega: number;
  tick_budget_ms: number;
  skeleton: SkeletonInfo;
  tracks: TrackInfo[];
}

export interface TickFrame {
  type: "tick";
  tick: number;
  pose: {
    root: number[];
    joints: number[][];
  };
  latency_ms: {
    cond: number;
    sample: number;
    decode: number;
    total: number;
  };
  track: number;
  omega: number;
  beat: boolean;
}

export interface AckFrame {
  type: "ack";
  cmd: string;
  applies_at_tick: number;
}

export interface ErrorFrame {
  type: "error";
  message: string;
}

export type ServerFrame = HelloFrame | TickFrame | AckFrame | ErrorFrame;

export type CommandName =
  | "select_track"
  | "mute"
  | "tempo_scale"
  | "set_omega"
  | "reset";

export interface ClientCommand {
  type: "cmd";
  cmd: CommandName;
  value?: number | boolean;
}

function isRecord(v: unknown): v is Record<string, unknown> {
  return typeof v === "object" && v !== null && !Array.isArray(v);
}

function isNum(v: unknown): v is number {
  return typeof v === "number" && Number.isFinite(v);
}

function isVec3(v: unknown): v is number[] {
  return Array.isArray(v) && v.length === 3 && v.every(isNum);
}

function isNumArray(v: unknown): v is number[] {
  return Array.isArray(v) && v.every(isNum);
}

function isStringArray(v: unknown): v is string[] {
  return Array.isArray(v) && v.every((s) => typeof s === "string");
}

export function isHelloFrame(v: unknown): v is HelloFrame {
  if (!isRecord(v) || v.type !== "hello") return false;
  if (!isNum(v.fps) || !isNum(v.omega) || !isNum(v.tick_budget_ms)) return false;
  const sk = v.skeleton;
  if (!isRecord(sk) || typeof sk.name !== "string") return false;
  if (!isNumArray(sk.parents) || !isStringArray(sk.joint_names)) return false;
  if (!isNumArray(sk.foot_indices)) return false;
  if (sk.parents.length !== sk.joint_names.length) return false;
  const tracks = v.tracks;
  if (!Array.isArray(tracks)) return false;
  return tracks.every(
    (t) =>
      isRecord(t) && isNum(t.id) && typeof t.name === "string" && isNum(t.duration_s),
  );
}

export function isTickFrame(v: unknown): v is TickFrame {
  if (!isRecord(v) || v.type !== "tick" || !isNum(v.tick)) return false;
  const pose = v.pose;
  if (!isRecord(pose) || !isVec3(pose.root)) return false;
  if (!Array.isArray(pose.joints) || !pose.joints.every(isVec3)) return false;
  const lat = v.latency_ms;
  if (!isRecord(lat)) return false;
  for (const key of ["cond", "sample", "decode", "total"]) {
    if (!isNum(lat[key])) return false;
  }
  return isNum(v.track) && isNum(v.omega) && typeof v.beat === "boolean";
}

export function isAckFrame(v: unknown): v is AckFrame {
  return (
    isRecord(v) &&
    v.type === "ack" &&
    typeof v.cmd === "string" &&
    isNum(v.applies_at_tick)
  );
}

export function isErrorFrame(v: unknown): v is ErrorFrame {
  return isRecord(v) && v.type === "error" && typeof v.message === "string";
}

/** Parse one websocket message; null when malformed or unrecognized. */
export function parseServerFrame(raw: string): ServerFrame | null {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    return null;
  }
  if (isTickFrame(data)) return data;
  if (isHelloFrame(data)) return data;
  if (isAckFrame(data)) return data;
  if (isErrorFrame(data)) return data;
  return null;
}

export function makeCommand(cmd: CommandName, value?: number | boolean): ClientCommand {
  return value === undefined ? { type: "cmd", cmd } : { type: "cmd", cmd, value };
}
