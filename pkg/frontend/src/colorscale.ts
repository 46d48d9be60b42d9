// Color scaling for raster layers: "fixed" uses the global range across
// all years (comparable legends between years), "dynamic" stretches to the
// displayed year's own range.

import type { LayerEntry, Manifest } from "./types.js";

export type ScaleMode = "fixed" | "dynamic";

export interface ScaleRange {
  min: number;
  max: number;
}

export function scaleRange(manifest: Manifest, target: string, timeIndex: number,
                           mode: ScaleMode): ScaleRange {
  if (mode === "fixed") {
    const range = manifest.fixed_ranges[target];
    if (!range) throw new Error(`no fixed range for layer ${target}`);
    return { min: range[0], max: range[1] };
  }
  const layer = manifest.layers.find(
    (l: LayerEntry) => l.target === target && l.time_index === timeIndex);
  if (!layer) throw new Error(`missing layer ${target} at time index ${timeIndex}`);
  return { min: layer.min, max: layer.max };
}

/** value -> [0, 1] position within the range (clamped). */
export function normalize(value: number, range: ScaleRange): number {
  if (range.max <= range.min) return 0.5;
  const t = (value - range.min) / (range.max - range.min);
  return Math.min(1, Math.max(0, t));
}

// compact viridis-like ramp; enough stops for smooth raster shading
const RAMP: Array<[number, number, number]> = [
  [68, 1, 84], [71, 44, 122], [59, 81, 139], [44, 113, 142], [33, 144, 141],
  [39, 173, 129], [92, 200, 99], [170, 220, 50], [253, 231, 37],
];

export function colorFor(t: number): [number, number, number] {
  const x = Math.min(1, Math.max(0, t)) * (RAMP.length - 1);
  const i = Math.min(Math.floor(x), RAMP.length - 2);
  const f = x - i;
  const a = RAMP[i];
  const b = RAMP[i + 1];
  return [
    Math.round(a[0] + f * (b[0] - a[0])),
    Math.round(a[1] + f * (b[1] - a[1])),
    Math.round(a[2] + f * (b[2] - a[2])),
  ];
}

export interface LegendTick {
  value: number;
  position: number; // 0 at min, 1 at max
}

export function legendTicks(range: ScaleRange, count = 5): LegendTick[] {
  const ticks: LegendTick[] = [];
  for (let k = 0; k < count; k++) {
    const position = k / (count - 1);
    ticks.push({ value: range.min + position * (range.max - range.min), position });
  }
  return ticks;
}
