// Single-page viewer over a static prediction bundle. Four panels:
// prediction maps (mean / sd / stored quantile layers), exceedance maps
// with a free threshold input recomputed client-side from the quantile
// sketch, quantile maps with a free probability slider, and the
// country-wide average prevalence series. A year slider (with autoplay)
// and a fixed/dynamic color-scale toggle apply to all map panels.

import { Bundle, parseDistrictCsv, parseManifest } from "./bundle.js";
import { legendTicks, scaleRange, ScaleMode, ScaleRange } from "./colorscale.js";
import { shadeRaster, probe } from "./raster.js";
import { sketchExceedance, sketchQuantile } from "./sketch.js";
import { districtNames, districtSeries } from "./series.js";
import type { DistrictRow } from "./types.js";

type Panel = "prediction" | "exceedance" | "quantile" | "series";

interface ViewState {
  panel: Panel;
  timeIndex: number;
  target: string;        // prediction panel layer
  scaleMode: ScaleMode;
  threshold: number;     // exceedance panel
  alpha: number;         // quantile panel
  district: string;
  playing: boolean;
}

const PIXELS_PER_CELL = 36;

// bundle location: ?bundle=<relative-or-absolute-url>, default alongside the page
function bundleBase(): string {
  const param = new URLSearchParams(window.location.search).get("bundle");
  if (!param) return "";
  return param.endsWith("/") ? param : param + "/";
}

async function fetchBytes(path: string): Promise<ArrayBuffer> {
  const res = await fetch(bundleBase() + path);
  if (!res.ok) throw new Error(`failed to load ${path}: ${res.status}`);
  return res.arrayBuffer();
}

async function fetchText(path: string): Promise<string> {
  const res = await fetch(bundleBase() + path);
  if (!res.ok) throw new Error(`failed to load ${path}: ${res.status}`);
  return res.text();
}

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export async function startApp(): Promise<void> {
  const manifest = parseManifest(await fetchText("manifest.json"));
  const bundle = new Bundle(manifest, fetchBytes);
  let districts: DistrictRow[] = [];
  if (manifest.districts) {
    districts = parseDistrictCsv(await fetchText(manifest.districts));
  }

  const state: ViewState = {
    panel: "prediction",
    timeIndex: 0,
    target: "mean",
    scaleMode: "fixed",
    threshold: manifest.thresholds[0] ?? 0.05,
    alpha: 0.5,
    district: districts.length ? districtNames(districts)[0] : "",
    playing: false,
  };

  const canvas = el<HTMLCanvasElement>("map");
  const seriesCanvas = el<HTMLCanvasElement>("series");
  const legend = el<HTMLCanvasElement>("legend");
  const yearSlider = el<HTMLInputElement>("year");
  const yearLabel = el<HTMLSpanElement>("year-label");
  const status = el<HTMLSpanElement>("status");
  const panelSelect = el<HTMLSelectElement>("panel");
  const targetSelect = el<HTMLSelectElement>("target");
  const scaleSelect = el<HTMLSelectElement>("scale-mode");
  const thresholdInput = el<HTMLInputElement>("threshold");
  const alphaInput = el<HTMLInputElement>("alpha");
  const districtSelect = el<HTMLSelectElement>("district");
  const playButton = el<HTMLButtonElement>("play");

  const predictionTargets = [...new Set(manifest.layers.map((l) => l.target))]
    .filter((t) => !t.startsWith("exceedance_"))
    .sort();
  for (const t of predictionTargets) {
    const option = document.createElement("option");
    option.value = option.textContent = t;
    targetSelect.appendChild(option);
  }
  for (const d of districtNames(districts)) {
    const option = document.createElement("option");
    option.value = option.textContent = d;
    districtSelect.appendChild(option);
  }
  yearSlider.min = "0";
  yearSlider.max = String(manifest.times.length - 1);
  yearSlider.step = "1";
  thresholdInput.value = String(state.threshold);
  alphaInput.value = String(state.alpha);

  const { nx, ny } = manifest.grid;
  canvas.width = nx * PIXELS_PER_CELL;
  canvas.height = ny * PIXELS_PER_CELL;

  function drawLegend(range: ScaleRange): void {
    const ctx = legend.getContext("2d")!;
    ctx.clearRect(0, 0, legend.width, legend.height);
    const grad = ctx.createLinearGradient(0, 0, legend.width, 0);
    for (let k = 0; k <= 10; k++) {
      const t = k / 10;
      const pix = shadeRaster(new Float32Array([range.min + t * (range.max - range.min)]),
                              { nx: 1, ny: 1, x0: 0, y0: 0, dx: 1, dy: 1, order: "" }, range);
      grad.addColorStop(t, `rgb(${pix[0]},${pix[1]},${pix[2]})`);
    }
    ctx.fillStyle = grad;
    ctx.fillRect(0, 0, legend.width, legend.height - 14);
    ctx.fillStyle = "#222";
    ctx.font = "10px sans-serif";
    for (const tick of legendTicks(range)) {
      const x = tick.position * (legend.width - 24);
      ctx.fillText(tick.value.toFixed(2), x, legend.height - 2);
    }
  }

  function paint(values: Float32Array, range: ScaleRange): void {
    const pixels = shadeRaster(values, manifest.grid, range);
    const image = new ImageData(new Uint8ClampedArray(pixels), nx, ny);
    const off = document.createElement("canvas");
    off.width = nx;
    off.height = ny;
    off.getContext("2d")!.putImageData(image, 0, 0);
    const ctx = canvas.getContext("2d")!;
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
    drawLegend(range);
  }

  function drawSeries(): void {
    const ctx = seriesCanvas.getContext("2d")!;
    const w = seriesCanvas.width;
    const h = seriesCanvas.height;
    ctx.clearRect(0, 0, w, h);
    const pts = districtSeries(districts, state.district);
    if (!pts.length) return;
    const t0 = pts[0].time;
    const t1 = pts[pts.length - 1].time;
    const sx = (t: number) => 40 + (w - 60) * (t1 === t0 ? 0.5 : (t - t0) / (t1 - t0));
    const sy = (p: number) => h - 25 - (h - 45) * p;
    ctx.fillStyle = "rgba(60, 120, 180, 0.25)";
    ctx.beginPath();
    pts.forEach((p, i) => (i ? ctx.lineTo(sx(p.time), sy(p.upper95)) : ctx.moveTo(sx(p.time), sy(p.upper95))));
    [...pts].reverse().forEach((p) => ctx.lineTo(sx(p.time), sy(p.lower95)));
    ctx.closePath();
    ctx.fill();
    ctx.strokeStyle = "#2a6aa8";
    ctx.lineWidth = 2;
    ctx.beginPath();
    pts.forEach((p, i) => (i ? ctx.lineTo(sx(p.time), sy(p.mean)) : ctx.moveTo(sx(p.time), sy(p.mean))));
    ctx.stroke();
    ctx.fillStyle = "#222";
    ctx.font = "11px sans-serif";
    for (const p of pts) ctx.fillText(String(p.time), sx(p.time) - 12, h - 8);
    for (const v of [0, 0.25, 0.5, 0.75, 1]) ctx.fillText(v.toFixed(2), 4, sy(v) + 4);
  }

  async function render(): Promise<void> {
    yearLabel.textContent = String(manifest.times[state.timeIndex]);
    yearSlider.value = String(state.timeIndex);
    const mapVisible = state.panel !== "series";
    canvas.style.display = mapVisible ? "block" : "none";
    legend.style.display = mapVisible ? "block" : "none";
    seriesCanvas.style.display = mapVisible ? "none" : "block";
    if (state.panel === "prediction") {
      const values = await bundle.layer(state.target, state.timeIndex);
      paint(values, scaleRange(manifest, state.target, state.timeIndex, state.scaleMode));
      status.textContent = `${state.target} @ ${manifest.times[state.timeIndex]}`;
    } else if (state.panel === "exceedance") {
      const sketch = await bundle.sketch(state.timeIndex);
      const start = performance.now();
      const values = sketchExceedance(sketch, bundle.nCells, state.threshold);
      const ms = performance.now() - start;
      const range: ScaleRange = state.scaleMode === "fixed"
        ? { min: 0, max: 1 }
        : rangeOf(values);
      paint(values, range);
      status.textContent = `P(prevalence > ${state.threshold}) recomputed in ${ms.toFixed(1)} ms`;
    } else if (state.panel === "quantile") {
      const sketch = await bundle.sketch(state.timeIndex);
      const values = sketchQuantile(sketch, bundle.nCells, state.alpha);
      const range = state.scaleMode === "fixed"
        ? fixedQuantileRange()
        : rangeOf(values);
      paint(values, range);
      status.textContent = `${state.alpha}-quantile of prevalence`;
    } else {
      drawSeries();
      status.textContent = `average prevalence, ${state.district}`;
    }
  }

  function rangeOf(values: Float32Array): ScaleRange {
    let lo = Infinity;
    let hi = -Infinity;
    for (const v of values) {
      if (Number.isNaN(v)) continue;
      if (v < lo) lo = v;
      if (v > hi) hi = v;
    }
    return Number.isFinite(lo) ? { min: lo, max: hi } : { min: 0, max: 1 };
  }

  function fixedQuantileRange(): ScaleRange {
    // the sketch spans every displayable quantile; its global extremes
    // bound any alpha at any year
    let lo = Infinity;
    let hi = -Infinity;
    for (const key of Object.keys(manifest.fixed_ranges)) {
      if (!key.startsWith("quantile_") && key !== "mean") continue;
      lo = Math.min(lo, manifest.fixed_ranges[key][0]);
      hi = Math.max(hi, manifest.fixed_ranges[key][1]);
    }
    return Number.isFinite(lo) ? { min: lo, max: hi } : { min: 0, max: 1 };
  }

  panelSelect.addEventListener("change", () => {
    state.panel = panelSelect.value as Panel;
    void render();
  });
  targetSelect.addEventListener("change", () => {
    state.target = targetSelect.value;
    void render();
  });
  scaleSelect.addEventListener("change", () => {
    state.scaleMode = scaleSelect.value as ScaleMode;
    void render();
  });
  yearSlider.addEventListener("input", () => {
    state.timeIndex = Number(yearSlider.value);
    void render();
  });
  thresholdInput.addEventListener("input", () => {
    const v = Number(thresholdInput.value);
    if (v > 0 && v <= 1) {
      state.threshold = v;
      void render();
    }
  });
  alphaInput.addEventListener("input", () => {
    const v = Number(alphaInput.value);
    if (v > 0 && v < 1) {
      state.alpha = v;
      void render();
    }
  });
  districtSelect.addEventListener("change", () => {
    state.district = districtSelect.value;
    void render();
  });
  playButton.addEventListener("click", () => {
    state.playing = !state.playing;
    playButton.textContent = state.playing ? "Pause" : "Play";
    if (state.playing) {
      const tick = () => {
        if (!state.playing) return;
        state.timeIndex = (state.timeIndex + 1) % manifest.times.length;
        void render().then(() => setTimeout(tick, 900));
      };
      setTimeout(tick, 900);
    }
  });
  canvas.addEventListener("click", async (event) => {
    // debug probe: report the raw bundle value under the cursor
    const rect = canvas.getBoundingClientRect();
    const ix = Math.floor((event.clientX - rect.left) / rect.width * nx);
    const iyCanvas = Math.floor((event.clientY - rect.top) / rect.height * ny);
    const iy = ny - 1 - iyCanvas;
    let values: Float32Array;
    if (state.panel === "exceedance") {
      values = sketchExceedance(await bundle.sketch(state.timeIndex), bundle.nCells, state.threshold);
    } else if (state.panel === "quantile") {
      values = sketchQuantile(await bundle.sketch(state.timeIndex), bundle.nCells, state.alpha);
    } else {
      values = await bundle.layer(state.target, state.timeIndex);
    }
    const v = probe(values, manifest.grid, ix, iy);
    status.textContent = `cell (${ix}, ${iy}): ${Number.isNaN(v) ? "outside region" : v.toFixed(4)}`;
  });

  await render();
}

startApp().catch((err) => {
  const status = document.getElementById("status");
  if (status) status.textContent = String(err);
  console.error(err);
});
