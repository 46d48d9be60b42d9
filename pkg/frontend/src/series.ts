// Country/district time-series view data: the chart plots the bundle CSV
// verbatim (means with the 95% band), no recomputation.

import type { DistrictRow } from "./types.js";

export interface SeriesPoint {
  time: number;
  mean: number;
  lower95: number;
  upper95: number;
}

export function districtSeries(rows: DistrictRow[], district: string): SeriesPoint[] {
  return rows
    .filter((r) => r.district === district)
    .sort((a, b) => a.time - b.time)
    .map((r) => ({ time: r.time, mean: r.mean, lower95: r.lower95, upper95: r.upper95 }));
}

export function districtNames(rows: DistrictRow[]): string[] {
  return [...new Set(rows.map((r) => r.district))].sort();
}

export function exceedanceSeries(rows: DistrictRow[], district: string,
                                 threshold: string): SeriesPoint[] {
  return rows
    .filter((r) => r.district === district && threshold in r.exceedances)
    .sort((a, b) => a.time - b.time)
    .map((r) => ({ time: r.time, mean: r.exceedances[threshold],
                   lower95: r.exceedances[threshold], upper95: r.exceedances[threshold] }));
}
