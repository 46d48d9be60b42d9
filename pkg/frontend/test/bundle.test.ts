import { describe, expect, it } from "vitest";

import { parseDistrictCsv, parseManifest } from "../src/bundle.js";
import { openDemoBundle, readDemoText } from "./helpers.js";

describe("manifest", () => {
  it("parses the demo manifest with sorted times", async () => {
    const manifest = parseManifest(await readDemoText("manifest.json"));
    expect(manifest.format).toBe("prevmap-viewer-v1");
    expect(manifest.times.length).toBe(3);
    expect([...manifest.times].sort((a, b) => a - b)).toEqual(manifest.times);
    expect(manifest.grid.nx * manifest.grid.ny).toBe(144);
  });

  it("declares every (target, time) layer and each resolves to data", async () => {
    const bundle = await openDemoBundle();
    const manifest = bundle.manifest;
    const targets = new Set(manifest.layers.map((l) => l.target));
    for (const target of ["mean", "sd", "exceedance_0.05", "exceedance_0.2",
                          "quantile_0.1", "quantile_0.5", "quantile_0.9"]) {
      expect(targets.has(target)).toBe(true);
    }
    for (const layer of manifest.layers) {
      const values = await bundle.layer(layer.target, layer.time_index);
      expect(values.length).toBe(bundle.nCells);
    }
    for (const entry of manifest.sketch) {
      const sk = await bundle.sketch(entry.time_index);
      expect(sk.length).toBe(bundle.nCells * 101);
    }
  });

  it("sketch layers carry 101 quantiles per cell", async () => {
    const manifest = parseManifest(await readDemoText("manifest.json"));
    for (const entry of manifest.sketch) {
      expect(entry.shape[1]).toBe(101);
      expect(entry.shape[0]).toBe(manifest.grid.nx * manifest.grid.ny);
    }
  });

  it("reports missing layers", async () => {
    const bundle = await openDemoBundle();
    await expect(bundle.layer("nonexistent", 0)).rejects.toThrow(/missing layer/);
  });

  it("rejects foreign formats", () => {
    expect(() => parseManifest(JSON.stringify({ format: "something-else" })))
      .toThrow(/unsupported bundle format/);
  });
});

describe("district csv", () => {
  it("round-trips the numbers verbatim", async () => {
    const text = await readDemoText("districts.csv");
    const rows = parseDistrictCsv(text);
    const lines = text.trim().split("\n").slice(1);
    expect(rows.length).toBe(lines.length);
    const first = lines[0].split(",");
    expect(rows[0].district).toBe(first[0]);
    expect(rows[0].time).toBe(Number(first[1]));
    expect(rows[0].mean).toBe(Number(first[2]));
    expect(rows[0].lower95).toBe(Number(first[3]));
    expect(rows[0].upper95).toBe(Number(first[4]));
    expect(rows[0].exceedances["0.05"]).toBe(Number(first[5]));
  });
});
