// Editing panel: pick an instance, scribble over one view, execute the
// edit, watch it propagate across the fixed view grid.

import { CnerfClient, JobStatus } from "./api.js";
import { BrushKind, Stroke, countLabel, FG, maskToScribble, rasterize } from "./mask.js";

const GRID_VIEWS = [0, 3, 6, 9]; // fixed pose ring, propagation is visible
const EDIT_VIEW = 0;
const CANVAS_SCALE = 6;
const IMAGE_RES = 64;
const PALETTE = ["#D91F1A", "#2640D9", "#1FA633", "#E68C1A", "#8C33B3",
                 "#19998C", "#E6D926", "#73591A", "#595961"];

type EditKind = "color" | "shape_remove" | "shape_add";

interface AppState {
  client: CnerfClient;
  session: string | null;
  instance: number;
  donor: number | null;
  kind: EditKind;
  brush: BrushKind;
  brushColor: string;
  radius: number;
  strokes: Stroke[];
  drawing: Stroke | null;
  jobId: string | null;
  beforeUrls: Map<number, string>;
  etags: Map<number, string | null>;
}

const state: AppState = {
  client: new CnerfClient(""),
  session: null,
  instance: 0,
  donor: null,
  kind: "color",
  brush: "fg",
  brushColor: PALETTE[0],
  radius: 2,
  strokes: [],
  drawing: null,
  jobId: null,
  beforeUrls: new Map(),
  etags: new Map(),
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function setStatus(text: string, bad = false): void {
  const bar = el<HTMLDivElement>("status");
  bar.textContent = text;
  bar.className = bad ? "status error" : "status";
}

// --- canvas ---

function canvasToImage(event: PointerEvent, canvas: HTMLCanvasElement) {
  const rect = canvas.getBoundingClientRect();
  return {
    x: ((event.clientX - rect.left) / rect.width) * IMAGE_RES,
    y: ((event.clientY - rect.top) / rect.height) * IMAGE_RES,
  };
}

function redrawCanvas(): void {
  const canvas = el<HTMLCanvasElement>("paint");
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const mask = rasterize(state.strokes.concat(state.drawing ? [state.drawing] : []),
                         IMAGE_RES, IMAGE_RES);
  const s = CANVAS_SCALE;
  for (let y = 0; y < IMAGE_RES; y++) {
    for (let x = 0; x < IMAGE_RES; x++) {
      const v = mask[y * IMAGE_RES + x];
      if (v === 0) continue;
      ctx.fillStyle = v === FG
        ? (state.kind === "color" ? hexWithAlpha(state.brushColor, 0.65)
                                  : "rgba(217,31,26,0.55)")
        : "rgba(38,64,217,0.45)";
      ctx.fillRect(x * s, y * s, s, s);
    }
  }
  updateExecuteEnabled(mask);
}

function hexWithAlpha(hex: string, alpha: number): string {
  const r = parseInt(hex.slice(1, 3), 16);
  const g = parseInt(hex.slice(3, 5), 16);
  const b = parseInt(hex.slice(5, 7), 16);
  return `rgba(${r},${g},${b},${alpha})`;
}

function updateExecuteEnabled(mask?: Uint8Array): void {
  const m = mask ?? rasterize(state.strokes, IMAGE_RES, IMAGE_RES);
  const busy = state.jobId !== null;
  const hasFg = countLabel(m, FG) > 0;
  const needsDonor = state.kind === "shape_add" && state.donor === null;
  el<HTMLButtonElement>("execute").disabled = busy || !hasFg || needsDonor;
}

function bindCanvas(): void {
  const canvas = el<HTMLCanvasElement>("paint");
  canvas.addEventListener("pointerdown", (e) => {
    canvas.setPointerCapture(e.pointerId);
    const p = canvasToImage(e, canvas);
    state.drawing = { kind: state.brush, radius: state.radius, points: [p] };
    redrawCanvas();
  });
  canvas.addEventListener("pointermove", (e) => {
    if (!state.drawing) return;
    state.drawing.points.push(canvasToImage(e, canvas));
    redrawCanvas();
  });
  const finish = () => {
    if (state.drawing) {
      state.strokes.push(state.drawing);
      state.drawing = null;
      redrawCanvas();
    }
  };
  canvas.addEventListener("pointerup", finish);
  canvas.addEventListener("pointercancel", finish);
}

// --- rendering the model views ---

async function refreshEditView(): Promise<void> {
  if (!state.session) return;
  // the edit backdrop shows the donor's render for shape addition
  const instance = state.kind === "shape_add" && state.donor !== null
    ? state.donor : state.instance;
  const img = el<HTMLImageElement>("edit-backdrop");
  const { blob } = await state.client.fetchRender(state.session, instance,
                                                  EDIT_VIEW, IMAGE_RES);
  img.src = URL.createObjectURL(blob);
}

async function refreshGrid(asBefore: boolean): Promise<void> {
  if (!state.session) return;
  for (const view of GRID_VIEWS) {
    const { blob, etag } = await state.client.fetchRender(
      state.session, state.instance, view, 128);
    const url = URL.createObjectURL(blob);
    el<HTMLImageElement>(`after-${view}`).src = url;
    state.etags.set(view, etag);
    if (asBefore || !state.beforeUrls.has(view)) {
      state.beforeUrls.set(view, url);
      el<HTMLImageElement>(`before-${view}`).src = url;
    }
  }
}

async function refreshInstances(): Promise<void> {
  if (!state.session) return;
  const strip = el<HTMLDivElement>("instances");
  strip.innerHTML = "";
  const instances = await state.client.listInstances(state.session);
  for (const info of instances) {
    const img = document.createElement("img");
    img.src = info.thumbnail_uri;
    img.title = `instance ${info.id}`;
    img.className = info.id === state.instance ? "thumb selected" : "thumb";
    img.addEventListener("click", async () => {
      state.instance = info.id;
      state.strokes = [];
      await refreshInstances();
      await refreshEditView();
      await refreshGrid(true);
      redrawCanvas();
    });
    strip.appendChild(img);
  }
  const donorStrip = el<HTMLDivElement>("donors");
  donorStrip.innerHTML = "";
  for (const info of instances) {
    if (info.id === state.instance) continue;
    const img = document.createElement("img");
    img.src = info.thumbnail_uri;
    img.className = info.id === state.donor ? "thumb selected" : "thumb";
    img.addEventListener("click", async () => {
      state.donor = info.id;
      await refreshInstances();
      if (state.kind === "shape_add") await refreshEditView();
      updateExecuteEnabled();
    });
    donorStrip.appendChild(img);
  }
}

// --- edits ---

function buildRequest() {
  const mask = rasterize(state.strokes, IMAGE_RES, IMAGE_RES);
  const scribble = maskToScribble(mask, IMAGE_RES, IMAGE_RES, EDIT_VIEW);
  const body: any = {
    kind: state.kind,
    instance: state.instance,
    scribbles: [scribble],
    hyper: { iterations: 100, seed: Date.now() % 100000 },
  };
  if (state.kind === "color") body.target_color = state.brushColor;
  if (state.kind === "shape_add") body.source_instance = state.donor;
  return body;
}

async function execute(): Promise<void> {
  if (!state.session || state.jobId) return;
  await refreshGrid(true); // snapshot "before"
  try {
    const jobId = await state.client.submitEdit(state.session, buildRequest(),
                                                `ui-${Date.now()}`);
    state.jobId = jobId;
    updateExecuteEnabled();
    el<HTMLButtonElement>("cancel").disabled = false;
    const final = await state.client.pollUntilDone(jobId, showProgress, 500);
    state.jobId = null;
    el<HTMLButtonElement>("cancel").disabled = true;
    if (final.state === "done") {
      setStatus(`edit done (${final.iteration}/${final.total} iterations)`);
      state.strokes = [];
      redrawCanvas();
      await refreshEditView();
      await refreshGrid(false);
    } else {
      setStatus(`edit ${final.state}${final.error ? ": " + final.error : ""}`,
                final.state === "failed");
    }
  } catch (err: any) {
    state.jobId = null;
    setStatus(err?.status === 409 ? "busy: an edit is already running"
                                  : `edit failed: ${err.message ?? err}`, true);
  }
  updateExecuteEnabled();
}

function showProgress(status: JobStatus): void {
  const bar = el<HTMLProgressElement>("progress");
  bar.max = status.total;
  bar.value = status.iteration;
  const lossText = status.loss == null ? "" : ` loss ${status.loss.toFixed(4)}`;
  setStatus(`${status.state} ${status.iteration}/${status.total}${lossText}`);
}

async function undo(): Promise<void> {
  if (!state.session) return;
  try {
    await state.client.undo(state.session);
    setStatus("reverted last edit");
    await refreshEditView();
    await refreshGrid(false);
  } catch (err: any) {
    setStatus(err?.status === 409 ? "nothing to undo" : `undo failed: ${err}`, true);
  }
}

async function transfer(what: "color" | "shape"): Promise<void> {
  if (!state.session || state.donor === null) {
    setStatus("pick a donor instance first", true);
    return;
  }
  const uris = await state.client.transferPreview(state.session, state.instance,
                                                  state.donor, what);
  const strip = el<HTMLDivElement>("transfer-previews");
  strip.innerHTML = "";
  for (const uri of uris) {
    const img = document.createElement("img");
    img.src = uri;
    img.className = "thumb";
    strip.appendChild(img);
  }
  el<HTMLButtonElement>("transfer-commit").onclick = async () => {
    await state.client.transferCommit(state.session!, state.instance,
                                      state.donor!, what);
    setStatus(`committed ${what} transfer from instance ${state.donor}`);
    await refreshEditView();
    await refreshGrid(false);
  };
  el<HTMLButtonElement>("transfer-commit").disabled = false;
  setStatus(`previewing ${what} transfer; commit to apply`);
}

// --- wiring ---

function selectBrush(button: HTMLButtonElement, kind: EditKind, brush: BrushKind): void {
  state.kind = kind;
  state.brush = brush;
  document.querySelectorAll(".brush").forEach((b) => b.classList.remove("selected"));
  button.classList.add("selected");
  refreshEditView();
  redrawCanvas();
}

async function connect(): Promise<void> {
  const checkpoint = el<HTMLInputElement>("checkpoint").value;
  const dataset = el<HTMLInputElement>("dataset").value;
  try {
    state.session = await state.client.createSession(checkpoint, dataset);
    setStatus(`session ${state.session}`);
    await refreshInstances();
    await refreshEditView();
    await refreshGrid(true);
  } catch (err: any) {
    setStatus(`session failed: ${err.message ?? err}`, true);
  }
}

export function start(): void {
  const palette = el<HTMLDivElement>("palette");
  for (const color of PALETTE) {
    const swatch = document.createElement("button");
    swatch.className = "swatch";
    swatch.style.background = color;
    swatch.addEventListener("click", () => {
      state.brushColor = color;
      document.querySelectorAll(".swatch").forEach((s) => s.classList.remove("selected"));
      swatch.classList.add("selected");
      redrawCanvas();
    });
    palette.appendChild(swatch);
  }

  el<HTMLButtonElement>("brush-color").onclick = (e) =>
    selectBrush(e.target as HTMLButtonElement, "color", "fg");
  el<HTMLButtonElement>("brush-bg").onclick = (e) =>
    selectBrush(e.target as HTMLButtonElement, state.kind, "bg");
  el<HTMLButtonElement>("brush-remove").onclick = (e) =>
    selectBrush(e.target as HTMLButtonElement, "shape_remove", "fg");
  el<HTMLButtonElement>("brush-add").onclick = (e) =>
    selectBrush(e.target as HTMLButtonElement, "shape_add", "fg");
  el<HTMLButtonElement>("brush-erase").onclick = (e) =>
    selectBrush(e.target as HTMLButtonElement, state.kind, "erase");
  el<HTMLButtonElement>("clear").onclick = () => {
    state.strokes = [];
    redrawCanvas();
  };
  el<HTMLInputElement>("radius").oninput = (e) => {
    state.radius = Number((e.target as HTMLInputElement).value);
  };
  el<HTMLButtonElement>("execute").onclick = execute;
  el<HTMLButtonElement>("cancel").onclick = async () => {
    if (state.jobId) await state.client.cancelJob(state.jobId);
  };
  el<HTMLButtonElement>("undo").onclick = undo;
  el<HTMLButtonElement>("transfer-color").onclick = () => transfer("color");
  el<HTMLButtonElement>("transfer-shape").onclick = () => transfer("shape");
  el<HTMLButtonElement>("connect").onclick = connect;
  bindCanvas();
  redrawCanvas();
}

if (typeof document !== "undefined" && document.getElementById("paint")) {
  start();
}
