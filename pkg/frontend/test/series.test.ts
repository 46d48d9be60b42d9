import { describe, expect, it } from "vitest";

import { parseDistrictCsv } from "../src/bundle.js";
import { districtNames, districtSeries, exceedanceSeries } from "../src/series.js";
import { readDemoText } from "./helpers.js";

describe("country-wide series", () => {
  it("plots the CSV verbatim with interval endpoints from the columns", async () => {
    const rows = parseDistrictCsv(await readDemoText("districts.csv"));
    const names = districtNames(rows);
    expect(names).toContain("country");
    const pts = districtSeries(rows, "country");
    expect(pts.length).toBe(3);
    expect(pts.map((p) => p.time)).toEqual([2000, 2005, 2010]);
    for (const p of pts) {
      expect(p.lower95).toBeLessThanOrEqual(p.mean);
      expect(p.mean).toBeLessThanOrEqual(p.upper95);
    }
    const raw = rows.filter((r) => r.district === "country").sort((a, b) => a.time - b.time);
    pts.forEach((p, i) => {
      expect(p.mean).toBe(raw[i].mean);
      expect(p.lower95).toBe(raw[i].lower95);
      expect(p.upper95).toBe(raw[i].upper95);
    });
  });

  it("exposes threshold-exceedance series when stored", async () => {
    const rows = parseDistrictCsv(await readDemoText("districts.csv"));
    const pts = exceedanceSeries(rows, "country", "0.05");
    expect(pts.length).toBe(3);
    for (const p of pts) {
      expect(p.mean).toBeGreaterThanOrEqual(0);
      expect(p.mean).toBeLessThanOrEqual(1);
    }
  });
});
