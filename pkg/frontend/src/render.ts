/**
 * Pose rendering: pure projection math plus a thin canvas layer.
 *
 * The character streams in as world-space joint positions, drawn in two
 * orthographic panels: a side elevation (x right, y up) and a top-down
 * plan (x right, z down the screen). All the geometry helpers are pure
 * functions over number arrays so they can be unit tested headlessly.
 */

export type Vec3 = readonly number[];

export interface Segment {
  a: Vec3;
  b: Vec3;
}

export interface Viewport {
  scale: number;
  offsetX: number;
  offsetY: number;
}

/** Bone list from a parent table: one segment per non-root joint. */
export function boneSegments(joints: readonly Vec3[], parents: readonly number[]): Segment[] {
  const out: Segment[] = [];
  for (let i = 0; i < parents.length; i++) {
    const p = parents[i];
    if (p === undefined || p < 0 || p >= joints.length) continue;
    const a = joints[p];
    const b = joints[i];
    if (a === undefined || b === undefined) continue;
    out.push({ a, b });
  }
  return out;
}

/** Side elevation: world x/y onto the plane, y increasing upward. */
export function projectSide(p: Vec3): [number, number] {
  return [p[0] ?? 0, p[1] ?? 0];
}

/** Top-down plan: world x/z onto the plane. */
export function projectTop(p: Vec3): [number, number] {
  return [p[0] ?? 0, p[2] ?? 0];
}

export interface Bounds {
  minX: number;
  maxX: number;
  minY: number;
  maxY: number;
}

export function bounds2d(points: readonly [number, number][]): Bounds {
  let minX = Infinity;
  let maxX = -Infinity;
  let minY = Infinity;
  let maxY = -Infinity;
  for (const [x, y] of points) {
    if (x < minX) minX = x;
    if (x > maxX) maxX = x;
    if (y < minY) minY = y;
    if (y > maxY) maxY = y;
  }
  if (!Number.isFinite(minX)) {
    return { minX: -1, maxX: 1, minY: -1, maxY: 1 };
  }
  return { minX, maxX, minY, maxY };
}

/**
 * Uniform-scale mapping from a world-space box onto a canvas, centered,
 * with a fractional margin. Aspect ratio is preserved: the tighter axis
 * just gets extra padding.
 */
export function fitViewport(
  b: Bounds,
  width: number,
  height: number,
  margin = 0.1,
): Viewport {
  const spanX = Math.max(b.maxX - b.minX, 1e-6);
  const spanY = Math.max(b.maxY - b.minY, 1e-6);
  const usableW = width * (1 - 2 * margin);
  const usableH = height * (1 - 2 * margin);
  const scale = Math.min(usableW / spanX, usableH / spanY);
  const cx = (b.minX + b.maxX) / 2;
  const cy = (b.minY + b.maxY) / 2;
  return {
    scale,
    offsetX: width / 2 - cx * scale,
    offsetY: height / 2 + cy * scale,
  };
}

/** World plane coords to canvas pixels; canvas y grows downward. */
export function toPixel(v: Viewport, x: number, y: number): [number, number] {
  return [v.offsetX + x * v.scale, v.offsetY - y * v.scale];
}

export type Projector = (p: Vec3) => [number, number];

export interface PanelStyle {
  bone: string;
  joint: string;
  ground: string | null;
  beat: string;
}

export const SIDE_STYLE: PanelStyle = {
  bone: "#9ecbff",
  joint: "#ffffff",
  ground: "#2a3442",
  beat: "#ffb454",
};

export const TOP_STYLE: PanelStyle = {
  bone: "#8ef0c0",
  joint: "#ffffff",
  ground: null,
  beat: "#ffb454",
};

export function drawPanel(
  ctx: CanvasRenderingContext2D,
  joints: readonly Vec3[],
  parents: readonly number[],
  project: Projector,
  viewport: Viewport,
  style: PanelStyle,
  beat: boolean,
): void {
  const w = ctx.canvas.width;
  const h = ctx.canvas.height;
  ctx.clearRect(0, 0, w, h);

  if (beat) {
    ctx.fillStyle = style.beat;
    ctx.globalAlpha = 0.18;
    ctx.fillRect(0, 0, w, h);
    ctx.globalAlpha = 1.0;
  }

  if (style.ground !== null) {
    const [, gy] = toPixel(viewport, 0, 0);
    ctx.strokeStyle = style.ground;
    ctx.lineWidth = 1;
    ctx.beginPath();
    ctx.moveTo(0, gy);
    ctx.lineTo(w, gy);
    ctx.stroke();
  }

  ctx.strokeStyle = style.bone;
  ctx.lineWidth = 2;
  for (const seg of boneSegments(joints, parents)) {
    const [ax, ay] = project(seg.a);
    const [bx, by] = project(seg.b);
    const [px1, py1] = toPixel(viewport, ax, ay);
    const [px2, py2] = toPixel(viewport, bx, by);
    ctx.beginPath();
    ctx.moveTo(px1, py1);
    ctx.lineTo(px2, py2);
    ctx.stroke();
  }

  ctx.fillStyle = style.joint;
  for (const j of joints) {
    const [x, y] = project(j);
    const [px, py] = toPixel(viewport, x, y);
    ctx.beginPath();
    ctx.arc(px, py, 2.5, 0, Math.PI * 2);
    ctx.fill();
  }
}

/**
 * Viewport that tracks the figure smoothly: fits the current joints but
 * blends toward the previous frame's mapping so the camera does not
 * jitter with every step.
 */
export function followViewport(
  prev: Viewport | null,
  points: readonly [number, number][],
  width: number,
  height: number,
  blend = 0.15,
): Viewport {
  const target = fitViewport(bounds2d(points), width, height);
  if (prev === null) return target;
  const mix = (a: number, b: number) => a + (b - a) * blend;
  return {
    scale: mix(prev.scale, target.scale),
    offsetX: mix(prev.offsetX, target.offsetX),
    offsetY: mix(prev.offsetY, target.offsetY),
  };
}
