// Canvas drawing: background image, tinted per-class mask overlays, box
// outlines.  Rendering uses nearest-neighbor scaling so overlays stay
// pixel-aligned with the image at every zoom level.

import type { CanvasSession } from "./session.js";
import type { Box } from "./types.js";

export const CLASS_COLORS: Record<string, [number, number, number]> = {
  polycrystalline: [255, 64, 64],
  center: [64, 160, 255],
  edge: [64, 255, 128],
};

function colorFor(classId: string): [number, number, number] {
  return CLASS_COLORS[classId] ?? [255, 200, 0];
}

export interface Viewport {
  scale: number;
  offsetX: number;
  offsetY: number;
}

export function screenToImage(view: Viewport, sx: number, sy: number): [number, number] {
  return [(sx - view.offsetX) / view.scale, (sy - view.offsetY) / view.scale];
}

/** Overlay bitmap for one mask layer, tinted by class. */
export function maskToImageData(
  ctx: CanvasRenderingContext2D,
  session: CanvasSession,
  classId: string,
  alpha = 130,
): ImageData {
  const raster = session.maskFor(classId);
  const [r, g, b] = colorFor(classId);
  const image = ctx.createImageData(raster.width, raster.height);
  for (let i = 0; i < raster.data.length; i++) {
    if (!raster.data[i]) continue;
    image.data[i * 4] = r;
    image.data[i * 4 + 1] = g;
    image.data[i * 4 + 2] = b;
    image.data[i * 4 + 3] = alpha;
  }
  return image;
}

export function drawSession(
  canvas: HTMLCanvasElement,
  session: CanvasSession,
  background: CanvasImageSource,
  view: Viewport,
  overlayCache: Map<string, HTMLCanvasElement>,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.save();
  ctx.fillStyle = "#202025";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  ctx.translate(view.offsetX, view.offsetY);
  ctx.scale(view.scale, view.scale);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(background, 0, 0);

  for (const classId of session.segmentationClasses()) {
    let overlay = overlayCache.get(classId);
    if (!overlay) {
      overlay = document.createElement("canvas");
      overlay.width = session.width;
      overlay.height = session.height;
      overlayCache.set(classId, overlay);
    }
    const octx = overlay.getContext("2d");
    if (!octx) continue;
    octx.clearRect(0, 0, overlay.width, overlay.height);
    octx.putImageData(maskToImageData(octx, session, classId), 0, 0);
    ctx.drawImage(overlay, 0, 0);
  }

  for (const classId of session.detectionClasses()) {
    const [r, g, b] = colorFor(classId);
    ctx.strokeStyle = `rgb(${r},${g},${b})`;
    ctx.lineWidth = Math.max(1 / view.scale, 0.75);
    for (const box of session.boxesFor(classId)) {
      ctx.strokeRect(box.x, box.y, box.w, box.h);
    }
  }
  ctx.restore();
}

export function drawRubberBand(
  canvas: HTMLCanvasElement,
  view: Viewport,
  box: Box,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.save();
  ctx.translate(view.offsetX, view.offsetY);
  ctx.scale(view.scale, view.scale);
  ctx.setLineDash([4 / view.scale, 3 / view.scale]);
  ctx.strokeStyle = "#ffffff";
  ctx.lineWidth = 1 / view.scale;
  ctx.strokeRect(box.x, box.y, box.w, box.h);
  ctx.restore();
}
