// Shapes of the viewer bundle written by `prevmap export-viewer`.

export interface GridSpec {
  nx: number;
  ny: number;
  x0: number;
  y0: number;
  dx: number;
  dy: number;
  order: string; // "row-major-y-outer": index = iy * nx + ix
}

export interface LayerEntry {
  target: string;
  time_index: number;
  time: number;
  path: string;
  min: number;
  max: number;
}

export interface SketchEntry {
  time_index: number;
  time: number;
  path: string;
  shape: [number, number]; // cells x 101
}

export interface Manifest {
  format: string;
  grid: GridSpec;
  times: number[];
  mode: string;
  seed: number;
  thresholds: number[];
  alphas: number[];
  layers: LayerEntry[];
  sketch: SketchEntry[];
  fixed_ranges: Record<string, [number, number]>;
  districts: string | null;
}

export interface DistrictRow {
  district: string;
  time: number;
  mean: number;
  lower95: number;
  upper95: number;
  exceedances: Record<string, number>;
}
