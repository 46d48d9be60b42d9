import { readFile } from "node:fs/promises";
import { fileURLToPath } from "node:url";
import { dirname, join } from "node:path";

import { Bundle, parseManifest } from "../src/bundle.js";

const here = dirname(fileURLToPath(import.meta.url));
export const DEMO_DIR = join(here, "fixtures", "demo");

export async function readDemoText(name: string): Promise<string> {
  return readFile(join(DEMO_DIR, name), "utf8");
}

export async function readDemoBytes(name: string): Promise<ArrayBuffer> {
  const buf = await readFile(join(DEMO_DIR, name));
  return buf.buffer.slice(buf.byteOffset, buf.byteOffset + buf.byteLength);
}

export async function openDemoBundle(): Promise<Bundle> {
  const manifest = parseManifest(await readDemoText("manifest.json"));
  return new Bundle(manifest, readDemoBytes);
}
