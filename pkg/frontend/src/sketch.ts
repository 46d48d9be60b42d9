// Client-side interpolation of the 101-point quantile sketch.
//
// Each cell stores the empirical quantiles of its predictive prevalence
// distribution at probabilities 0, 0.01, ..., 1. Everything displayed for
// arbitrary thresholds or probabilities is linear interpolation of that
// sketch, accurate to one sketch bin (0.01 in probability), matching the
// reference computation in the pipeline exactly.

/** Per-cell alpha-quantile from a (cells x 101) sketch. NaN rows pass through. */
export function sketchQuantile(sketch: Float32Array, nCells: number, alpha: number): Float32Array {
  if (!(alpha > 0 && alpha < 1)) {
    throw new RangeError(`alpha must be in (0, 1), got ${alpha}`);
  }
  const pos = alpha * 100;
  const lo = Math.min(Math.floor(pos), 99);
  const frac = pos - lo;
  const out = new Float32Array(nCells);
  for (let c = 0; c < nCells; c++) {
    const a = sketch[c * 101 + lo];
    const b = sketch[c * 101 + lo + 1];
    out[c] = (1 - frac) * a + frac * b;
  }
  return out;
}

/**
 * Per-cell exceedance probability P(prevalence > threshold) from the sketch:
 * one minus the linearly interpolated CDF at the threshold.
 */
export function sketchExceedance(sketch: Float32Array, nCells: number, threshold: number): Float32Array {
  const out = new Float32Array(nCells);
  for (let c = 0; c < nCells; c++) {
    out[c] = cellExceedance(sketch, c * 101, threshold);
  }
  return out;
}

function cellExceedance(sketch: Float32Array, base: number, threshold: number): number {
  const first = sketch[base];
  const last = sketch[base + 100];
  if (Number.isNaN(first)) return NaN;
  if (threshold < first) return 1;
  if (threshold >= last) return 0;
  // rightmost index j with sketch[j] <= threshold (binary search, side "right")
  let lo = 0;
  let hi = 101;
  while (lo < hi) {
    const mid = (lo + hi) >>> 1;
    if (sketch[base + mid] <= threshold) {
      lo = mid + 1;
    } else {
      hi = mid;
    }
  }
  let j = lo - 1;
  if (j > 99) j = 99;
  const width = sketch[base + j + 1] - sketch[base + j];
  const frac = width <= 0 ? 0 : (threshold - sketch[base + j]) / width;
  return 1 - (j / 100 + frac * 0.01);
}
