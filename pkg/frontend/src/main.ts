// Application wiring: toolbar, canvas events, task loop.

import { ApiClient, ApiError, MalformedEnvelopeError } from "./api.js";
import { buildAnnotationPayload } from "./payload.js";
import { drawRubberBand, drawSession, screenToImage, type Viewport } from "./render.js";
import { CanvasSession } from "./session.js";
import type { Box, Tool } from "./types.js";

const api = new ApiClient("");

interface AppState {
  session: CanvasSession | null;
  image: HTMLImageElement | null;
  view: Viewport;
  labelerId: string;
  polygonDraft: Array<[number, number]>;
  dragStart: [number, number] | null;
  rubberBand: Box | null;
  overlayCache: Map<string, HTMLCanvasElement>;
}

const state: AppState = {
  session: null,
  image: null,
  view: { scale: 1, offsetX: 0, offsetY: 0 },
  labelerId: "",
  polygonDraft: [],
  dragStart: null,
  rubberBand: null,
  overlayCache: new Map(),
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function setBanner(message: string, kind: "info" | "error" = "info"): void {
  const banner = el<HTMLDivElement>("banner");
  banner.textContent = message;
  banner.className = kind;
  banner.style.display = message ? "block" : "none";
}

function redraw(): void {
  const canvas = el<HTMLCanvasElement>("canvas");
  if (!state.session || !state.image) {
    const ctx = canvas.getContext("2d");
    if (ctx) {
      ctx.fillStyle = "#202025";
      ctx.fillRect(0, 0, canvas.width, canvas.height);
    }
    return;
  }
  drawSession(canvas, state.session, state.image, state.view, state.overlayCache);
  if (state.rubberBand) drawRubberBand(canvas, state.view, state.rubberBand);
}

function fitView(): void {
  if (!state.session) return;
  const canvas = el<HTMLCanvasElement>("canvas");
  const scale = Math.min(
    canvas.width / state.session.width,
    canvas.height / state.session.height,
  );
  state.view = {
    scale,
    offsetX: (canvas.width - state.session.width * scale) / 2,
    offsetY: (canvas.height - state.session.height * scale) / 2,
  };
}

function rebuildClassPicker(): void {
  const picker = el<HTMLSelectElement>("class-picker");
  picker.innerHTML = "";
  if (!state.session) return;
  for (const cls of state.session.classes) {
    const option = document.createElement("option");
    option.value = cls.id;
    option.textContent = `${cls.id} (${cls.task})`;
    picker.appendChild(option);
  }
  picker.value = state.session.activeClass;
}

async function loadNextTask(): Promise<void> {
  if (!state.labelerId) {
    setBanner("enter a labeler id and press Start", "error");
    return;
  }
  setBanner("fetching task…");
  let envelope;
  try {
    envelope = await api.getNextTask(state.labelerId);
  } catch (error) {
    if (error instanceof MalformedEnvelopeError) {
      setBanner(`service sent a malformed task: ${error.message}`, "error");
    } else if (error instanceof ApiError) {
      setBanner(`${error.code}: ${error.message}`, "error");
    } else {
      setBanner(`network error: ${String(error)} — retry when ready`, "error");
    }
    return;
  }
  if (envelope === null) {
    state.session = null;
    state.image = null;
    setBanner("no work right now — all images labeled or leased");
    redraw();
    return;
  }
  const image = new Image();
  image.src = api.imageUrl(envelope.image_uri);
  await image.decode();
  state.image = image;
  state.session = new CanvasSession(envelope, image.naturalWidth, image.naturalHeight);
  state.overlayCache.clear();
  state.polygonDraft = [];
  fitView();
  rebuildClassPicker();
  setBanner(
    envelope.pre_annotation
      ? "task loaded with model pre-annotation — correct and submit"
      : "task loaded — annotate from scratch",
  );
  redraw();
}

async function submit(): Promise<void> {
  if (!state.session) return;
  const payload = buildAnnotationPayload(state.session, state.labelerId);
  try {
    const ack = await api.submitAnnotation(
      state.session.task.task_id,
      payload,
      state.session.timerSeconds,
    );
    const cost = ack.correction_cost;
    setBanner(
      cost
        ? `accepted — ${cost.pixels_flipped} px corrected, ` +
          `${cost.boxes_added + cost.boxes_removed + cost.boxes_moved} box edits`
        : "accepted",
    );
  } catch (error) {
    if (error instanceof ApiError) {
      setBanner(`${error.code}: ${error.message}`, "error");
      return;
    }
    setBanner(`network error: ${String(error)}`, "error");
    return;
  }
  state.session = null;
  state.image = null;
  redraw();
  await loadNextTask();
}

function canvasPoint(event: MouseEvent): [number, number] {
  const canvas = el<HTMLCanvasElement>("canvas");
  const rect = canvas.getBoundingClientRect();
  return screenToImage(
    state.view,
    event.clientX - rect.left,
    event.clientY - rect.top,
  );
}

function wireCanvas(): void {
  const canvas = el<HTMLCanvasElement>("canvas");
  let stroking = false;
  let strokePoints: Array<[number, number]> = [];

  canvas.addEventListener("mousedown", (event) => {
    if (!state.session) return;
    const [x, y] = canvasPoint(event);
    const tool = state.session.activeTool;
    if (tool === "brush" || tool === "eraser") {
      stroking = true;
      strokePoints = [[x, y]];
    } else if (tool === "box") {
      state.dragStart = [x, y];
    } else if (tool === "pan") {
      state.dragStart = [event.clientX, event.clientY];
    } else if (tool === "polygon") {
      state.polygonDraft.push([x, y]);
      setBanner(`polygon: ${state.polygonDraft.length} vertices (double-click to close)`);
    }
  });

  canvas.addEventListener("mousemove", (event) => {
    if (!state.session) return;
    const tool = state.session.activeTool;
    if (stroking) {
      strokePoints.push(canvasPoint(event));
    } else if (tool === "box" && state.dragStart) {
      const [x0, y0] = state.dragStart;
      const [x1, y1] = canvasPoint(event);
      state.rubberBand = {
        x: Math.min(x0, x1),
        y: Math.min(y0, y1),
        w: Math.abs(x1 - x0),
        h: Math.abs(y1 - y0),
      };
      redraw();
    } else if (tool === "pan" && state.dragStart) {
      state.view.offsetX += event.clientX - state.dragStart[0];
      state.view.offsetY += event.clientY - state.dragStart[1];
      state.dragStart = [event.clientX, event.clientY];
      redraw();
    }
  });

  window.addEventListener("mouseup", () => {
    if (!state.session) return;
    const tool = state.session.activeTool;
    if (stroking && strokePoints.length) {
      state.session.brushStroke(strokePoints, tool === "eraser");
      stroking = false;
      strokePoints = [];
      redraw();
    } else if (tool === "box" && state.rubberBand) {
      const box = state.rubberBand;
      state.rubberBand = null;
      state.dragStart = null;
      if (box.w >= 1 && box.h >= 1) {
        state.session.addBox({
          x: Math.round(box.x),
          y: Math.round(box.y),
          w: Math.max(1, Math.round(box.w)),
          h: Math.max(1, Math.round(box.h)),
        });
      }
      redraw();
    } else {
      state.dragStart = null;
    }
  });

  canvas.addEventListener("dblclick", () => {
    if (!state.session || state.session.activeTool !== "polygon") return;
    if (state.polygonDraft.length >= 3) {
      state.session.fillPolygon(state.polygonDraft);
    }
    state.polygonDraft = [];
    redraw();
  });

  canvas.addEventListener("wheel", (event) => {
    event.preventDefault();
    const factor = event.deltaY < 0 ? 1.2 : 1 / 1.2;
    const rect = canvas.getBoundingClientRect();
    const cx = event.clientX - rect.left;
    const cy = event.clientY - rect.top;
    state.view.offsetX = cx - (cx - state.view.offsetX) * factor;
    state.view.offsetY = cy - (cy - state.view.offsetY) * factor;
    state.view.scale *= factor;
    redraw();
  });
}

function wireToolbar(): void {
  for (const tool of ["brush", "eraser", "box", "polygon", "pan"] as Tool[]) {
    el<HTMLButtonElement>(`tool-${tool}`).addEventListener("click", () => {
      if (state.session) state.session.activeTool = tool;
      document
        .querySelectorAll(".tool")
        .forEach((node) => node.classList.remove("active"));
      el(`tool-${tool}`).classList.add("active");
    });
  }
  el<HTMLSelectElement>("class-picker").addEventListener("change", (event) => {
    if (state.session) {
      state.session.activeClass = (event.target as HTMLSelectElement).value;
    }
  });
  el<HTMLButtonElement>("undo").addEventListener("click", () => {
    state.session?.undo();
    redraw();
  });
  el<HTMLButtonElement>("redo").addEventListener("click", () => {
    state.session?.redo();
    redraw();
  });
  el<HTMLButtonElement>("submit").addEventListener("click", () => void submit());
  el<HTMLButtonElement>("start").addEventListener("click", () => {
    state.labelerId = el<HTMLInputElement>("labeler-id").value.trim();
    void api
      .registerLabeler(state.labelerId)
      .then(() => loadNextTask())
      .catch((error) => setBanner(String(error), "error"));
  });
}

function wireTimer(): void {
  setInterval(() => {
    state.session?.tick(1);
    if (state.session) {
      el("timer").textContent = `${Math.round(state.session.timerSeconds)}s`;
    }
  }, 1000);
  document.addEventListener("visibilitychange", () => {
    state.session?.setFocused(document.visibilityState === "visible");
  });
  window.addEventListener("blur", () => state.session?.setFocused(false));
  window.addEventListener("focus", () => state.session?.setFocused(true));
}

export function start(): void {
  wireToolbar();
  wireCanvas();
  wireTimer();
  setBanner("enter a labeler id and press Start");
}

if (typeof document !== "undefined" && document.getElementById("canvas")) {
  start();
}
