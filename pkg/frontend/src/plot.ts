/**
 * Space-time plot geometry: box footprints of the selected grounding's
 * observations in the x-y plane plus a time axis, normalized into a
 * viewport. Pure layout so it can be tested without a DOM; the app draws
 * the returned primitives onto a canvas.
 */
import { GroundingDetail } from "./results.js";

export interface PlotRect {
  x: number;
  y: number;
  w: number;
  h: number;
  label: string;
  t: number;
}

export interface PlotTick {
  x: number;
  t: number;
  label: string;
}

export interface SpaceTimePlot {
  width: number;
  height: number;
  rects: PlotRect[];
  timeTicks: PlotTick[];
  tStart: number;
  tEnd: number;
}

const PAD = 24;
const TIME_AXIS_HEIGHT = 34;

export function layoutSpaceTime(
  detail: GroundingDetail,
  width = 420,
  height = 360,
): SpaceTimePlot {
  const obs = Object.entries(detail.observations);
  const xs: number[] = [];
  const ys: number[] = [];
  const ts: number[] = [];
  for (const [, o] of obs) {
    xs.push(o.box[0], o.box[0] + o.box[2]);
    ys.push(o.box[1], o.box[1] + o.box[3]);
    ts.push(o.t);
  }
  const x0 = Math.min(...xs);
  const x1 = Math.max(...xs);
  const y0 = Math.min(...ys);
  const y1 = Math.max(...ys);
  const span = Math.max(x1 - x0, y1 - y0, 1);
  const usableW = width - 2 * PAD;
  const usableH = height - TIME_AXIS_HEIGHT - 2 * PAD;
  const scale = Math.min(usableW, usableH) / span;

  const labelOf: Record<string, string> = {};
  for (const [q, obsId] of Object.entries(detail.mapping)) {
    labelOf[String(obsId)] = q;
  }
  const rects = obs.map(([obsId, o]) => ({
    x: PAD + (o.box[0] - x0) * scale,
    y: PAD + (o.box[1] - y0) * scale,
    w: Math.max(o.box[2] * scale, 2),
    h: Math.max(o.box[3] * scale, 2),
    label: labelOf[obsId] ?? obsId,
    t: o.t,
  }));

  const tStart = Math.min(...ts);
  const tEnd = Math.max(...ts);
  const tSpan = Math.max(tEnd - tStart, 1);
  const timeTicks = obs.map(([obsId, o]) => ({
    x: PAD + ((o.t - tStart) / tSpan) * usableW,
    t: o.t,
    label: labelOf[obsId] ?? obsId,
  }));
  return { width, height, rects, timeTicks, tStart, tEnd };
}
