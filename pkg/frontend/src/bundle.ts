// Bundle access: manifest parsing plus lazy, cached layer loading. The
// loader is injectable so tests can read from disk while the app fetches
// over HTTP.

import type { DistrictRow, Manifest } from "./types.js";

export type BytesLoader = (path: string) => Promise<ArrayBuffer>;

export function parseManifest(text: string): Manifest {
  const doc = JSON.parse(text) as Manifest;
  if (doc.format !== "prevmap-viewer-v1") {
    throw new Error(`unsupported bundle format: ${doc.format}`);
  }
  const expected = doc.grid.nx * doc.grid.ny;
  for (const layer of doc.layers) {
    if (layer.time_index < 0 || layer.time_index >= doc.times.length) {
      throw new Error(`layer ${layer.target} references unknown time index ${layer.time_index}`);
    }
  }
  if (doc.sketch.some((s) => s.shape[0] !== expected || s.shape[1] !== 101)) {
    throw new Error("sketch layers must hold 101 quantiles per grid cell");
  }
  const sorted = [...doc.times].every((t, i) => i === 0 || doc.times[i - 1] < t);
  if (!sorted) throw new Error("bundle times must be strictly increasing");
  return doc;
}

export class Bundle {
  private cache = new Map<string, Float32Array>();

  constructor(readonly manifest: Manifest, private readonly loader: BytesLoader) {}

  get nCells(): number {
    return this.manifest.grid.nx * this.manifest.grid.ny;
  }

  layerEntry(target: string, timeIndex: number) {
    const layer = this.manifest.layers.find(
      (l) => l.target === target && l.time_index === timeIndex);
    if (!layer) throw new Error(`missing layer ${target} at time index ${timeIndex}`);
    return layer;
  }

  async layer(target: string, timeIndex: number): Promise<Float32Array> {
    const entry = this.layerEntry(target, timeIndex);
    return this.loadFloat32(entry.path, this.nCells);
  }

  async sketch(timeIndex: number): Promise<Float32Array> {
    const entry = this.manifest.sketch.find((s) => s.time_index === timeIndex);
    if (!entry) throw new Error(`no sketch for time index ${timeIndex}`);
    return this.loadFloat32(entry.path, this.nCells * 101);
  }

  private async loadFloat32(path: string, expected: number): Promise<Float32Array> {
    const hit = this.cache.get(path);
    if (hit) return hit;
    const bytes = await this.loader(path);
    const values = new Float32Array(bytes);
    if (values.length !== expected) {
      throw new Error(`${path}: expected ${expected} float32 values, got ${values.length}`);
    }
    this.cache.set(path, values);
    return values;
  }
}

/** districts.csv rows: district,time,mean,lower95,upper95[,exceed_<l>...] */
export function parseDistrictCsv(text: string): DistrictRow[] {
  const lines = text.trim().split(/\r?\n/);
  if (lines.length < 2) return [];
  const header = lines[0].split(",");
  const exceedCols: Array<[number, string]> = [];
  header.forEach((name, i) => {
    if (name.startsWith("exceed_")) exceedCols.push([i, name.slice("exceed_".length)]);
  });
  return lines.slice(1).map((line) => {
    const cells = line.split(",");
    const exceedances: Record<string, number> = {};
    for (const [i, label] of exceedCols) exceedances[label] = Number(cells[i]);
    return {
      district: cells[0],
      time: Number(cells[1]),
      mean: Number(cells[2]),
      lower95: Number(cells[3]),
      upper95: Number(cells[4]),
      exceedances,
    };
  });
}
