// End-to-end against the real Python service: builds a tiny dataset and
// checkpoint, starts `cnerf serve`, then drives the same client module the
// browser uses through a full edit: session, mask echo round-trip, edit
// job with progress, view-grid ETag change, undo.

import { ChildProcess, execFileSync, spawn } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { PNG } from "pngjs";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { CnerfClient } from "../src/api.js";
import { Stroke, maskToScribble, rasterize } from "../src/mask.js";

const PY = process.env.PYTHON ?? "python3";
const PORT = 8931;
const RES = 24;

let serverProc: ChildProcess | null = null;
let workDir: string;
const client = new CnerfClient(`http://127.0.0.1:${PORT}`);

function cli(...args: string[]): void {
  execFileSync(PY, ["-m", "cnerf.cli", ...args], {
    stdio: ["ignore", "ignore", "inherit"],
    env: { ...process.env, OPENBLAS_NUM_THREADS: "1", OMP_NUM_THREADS: "1" },
  });
}

async function waitForServer(timeoutMs = 30_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      const r = await fetch(`http://127.0.0.1:${PORT}/healthz`);
      if (r.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((resolve) => setTimeout(resolve, 300));
  }
  throw new Error("service did not come up");
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "cnerf-e2e-"));
  cli("gen-data", "--out", join(workDir, "datasets", "demo"), "--seed", "3",
      "--instances", "2", "--views", "3", "--heldout", "1", "--res", String(RES));
  cli("train", "--dataset", join(workDir, "datasets", "demo"),
      "--out", join(workDir, "checkpoints"), "--iters", "40", "--batch", "32",
      "--width", "16", "--n-coarse", "8", "--n-fine", "8", "--seed", "1",
      "--threads", "1");
  serverProc = spawn(PY, ["-m", "cnerf.cli", "serve",
                          "--checkpoint-dir", join(workDir, "checkpoints"),
                          "--dataset-dir", join(workDir, "datasets"),
                          "--host", "127.0.0.1", "--port", String(PORT)],
                     { stdio: ["ignore", "ignore", "inherit"],
                       env: { ...process.env, OPENBLAS_NUM_THREADS: "1" } });
  await waitForServer();
}, 180_000);

afterAll(() => {
  serverProc?.kill("SIGTERM");
  if (workDir) rmSync(workDir, { recursive: true, force: true });
});

describe("browser-flow end to end", () => {
  it("runs a color edit and sees the grid refresh with new ETags", async () => {
    const session = await client.createSession("checkpoint.cre", "demo");
    const instances = await client.listInstances(session);
    expect(instances.length).toBe(2);

    // paint a scribble and check the server rasterizes it identically
    const strokes: Stroke[] = [
      { kind: "fg", radius: 2, points: [{ x: 12, y: 12 }, { x: 16, y: 13 }] },
      { kind: "bg", radius: 2, points: [{ x: 4, y: 20 }, { x: 8, y: 20 }] },
    ];
    const mask = rasterize(strokes, RES, RES);
    const scribble = maskToScribble(mask, RES, RES, 0);
    const echoBytes = await client.echoScribble(session, scribble);
    const echoed = PNG.sync.read(Buffer.from(echoBytes));
    expect(echoed.width).toBe(RES);
    for (let i = 0; i < RES * RES; i++) {
      expect(echoed.data[i * 4]).toBe(mask[i]); // grayscale PNG channel
    }

    // before-ETags of the fixed view grid
    const gridViews = [0, 1, 2];
    const before = new Map<number, string | null>();
    for (const view of gridViews) {
      const r = await client.fetchRender(session, 0, view, RES);
      before.set(view, r.etag);
    }

    const jobId = await client.submitEdit(session, {
      kind: "color",
      instance: 0,
      scribbles: [scribble],
      target_color: "#D91F1A",
      hyper: { iterations: 3, seed: 5 },
    });
    const progressStates: number[] = [];
    const final = await client.pollUntilDone(jobId, (s) => progressStates.push(s.iteration), 100);
    expect(final.state).toBe("done");
    expect(final.iteration).toBe(3);

    for (const view of gridViews) {
      const r = await client.fetchRender(session, 0, view, RES);
      expect(r.etag).not.toBe(before.get(view));
    }

    await client.undo(session);
    for (const view of gridViews) {
      const r = await client.fetchRender(session, 0, view, RES);
      expect(r.etag).not.toBeNull();
    }
  }, 240_000);
});
