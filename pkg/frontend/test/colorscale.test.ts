import { describe, expect, it } from "vitest";

import { colorFor, legendTicks, normalize, scaleRange } from "../src/colorscale.js";
import { parseManifest } from "../src/bundle.js";
import { readDemoText } from "./helpers.js";

describe("scale modes", () => {
  it("fixed mode gives the identical legend range for every year", async () => {
    const manifest = parseManifest(await readDemoText("manifest.json"));
    const ranges = manifest.times.map((_, s) => scaleRange(manifest, "mean", s, "fixed"));
    for (const r of ranges) {
      expect(r).toEqual(ranges[0]);
    }
    expect(ranges[0].min).toBe(manifest.fixed_ranges["mean"][0]);
    expect(ranges[0].max).toBe(manifest.fixed_ranges["mean"][1]);
  });

  it("dynamic mode spans exactly that year's min and max", async () => {
    const manifest = parseManifest(await readDemoText("manifest.json"));
    for (let s = 0; s < manifest.times.length; s++) {
      const r = scaleRange(manifest, "mean", s, "dynamic");
      const layer = manifest.layers.find((l) => l.target === "mean" && l.time_index === s)!;
      expect(r.min).toBe(layer.min);
      expect(r.max).toBe(layer.max);
    }
  });

  it("fixed range contains every dynamic range", async () => {
    const manifest = parseManifest(await readDemoText("manifest.json"));
    const fixed = scaleRange(manifest, "sd", 0, "fixed");
    for (let s = 0; s < manifest.times.length; s++) {
      const dyn = scaleRange(manifest, "sd", s, "dynamic");
      expect(dyn.min).toBeGreaterThanOrEqual(fixed.min);
      expect(dyn.max).toBeLessThanOrEqual(fixed.max);
    }
  });
});

describe("normalization and ramp", () => {
  it("clamps to [0, 1]", () => {
    const range = { min: 0.2, max: 0.6 };
    expect(normalize(0.2, range)).toBe(0);
    expect(normalize(0.6, range)).toBe(1);
    expect(normalize(-5, range)).toBe(0);
    expect(normalize(5, range)).toBe(1);
    expect(normalize(0.4, range)).toBeCloseTo(0.5, 12);
  });

  it("ramp endpoints are distinct colors and midpoints interpolate", () => {
    const lo = colorFor(0);
    const hi = colorFor(1);
    expect(lo).not.toEqual(hi);
    const mid = colorFor(0.5);
    for (const channel of mid) {
      expect(channel).toBeGreaterThanOrEqual(0);
      expect(channel).toBeLessThanOrEqual(255);
    }
  });

  it("legend ticks span the range", () => {
    const ticks = legendTicks({ min: 0.1, max: 0.9 });
    expect(ticks[0].value).toBeCloseTo(0.1, 12);
    expect(ticks[ticks.length - 1].value).toBeCloseTo(0.9, 12);
    expect(ticks[0].position).toBe(0);
    expect(ticks[ticks.length - 1].position).toBe(1);
  });
});
