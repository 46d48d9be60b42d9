// Raster shading: grid-ordered Float32 values -> RGBA pixels. Cells
// outside the region come through as NaN and stay transparent.

import { colorFor, normalize, ScaleRange } from "./colorscale.js";
import type { GridSpec } from "./types.js";

export function shadeRaster(values: Float32Array, grid: GridSpec,
                            range: ScaleRange): Uint8ClampedArray {
  const { nx, ny } = grid;
  const pixels = new Uint8ClampedArray(nx * ny * 4);
  for (let iy = 0; iy < ny; iy++) {
    // raster row 0 is the southernmost; canvas row 0 is the top
    const canvasRow = ny - 1 - iy;
    for (let ix = 0; ix < nx; ix++) {
      const v = values[iy * nx + ix];
      const o = (canvasRow * nx + ix) * 4;
      if (Number.isNaN(v)) {
        pixels[o + 3] = 0;
        continue;
      }
      const [r, g, b] = colorFor(normalize(v, range));
      pixels[o] = r;
      pixels[o + 1] = g;
      pixels[o + 2] = b;
      pixels[o + 3] = 255;
    }
  }
  return pixels;
}

/** Value at a cell, addressed by grid indices (debug probe). */
export function probe(values: Float32Array, grid: GridSpec, ix: number, iy: number): number {
  if (ix < 0 || ix >= grid.nx || iy < 0 || iy >= grid.ny) return NaN;
  return values[iy * grid.nx + ix];
}
