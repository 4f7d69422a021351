import { describe, expect, it } from "vitest";

import { rleEncode } from "../src/rle.js";
import { CanvasSession } from "../src/session.js";
import type { TaskEnvelope } from "../src/types.js";

const CATALOG = [
  { id: "polycrystalline", task: "segmentation" as const },
  { id: "center", task: "detection" as const },
];

function envelope(pre?: TaskEnvelope["pre_annotation"]): TaskEnvelope {
  return {
    task_id: "t1",
    image_id: "img-1",
    image_uri: "/images/img-1.png",
    batch_id: "b1",
    class_catalog: CATALOG,
    ...(pre ? { pre_annotation: pre } : {}),
  };
}

function preAnnotation(): TaskEnvelope["pre_annotation"] {
  const mask = new Uint8Array(64);
  for (let i = 16; i < 24; i++) mask[i] = 1;
  return {
    image_id: "img-1",
    source: { kind: "model", id: "m1" },
    masks: [{ class: "polycrystalline", width: 8, height: 8, rle: rleEncode(mask) }],
    boxes: [{ class: "center", x: 1, y: 1, w: 3, h: 3, score: 0.8 }],
    review_state: "draft",
  };
}

describe("CanvasSession", () => {
  it("starts blank without a pre-annotation", () => {
    const session = new CanvasSession(envelope(), 8, 8);
    expect(session.maskFor("polycrystalline").isEmpty()).toBe(true);
    expect(session.boxesFor("center")).toEqual([]);
    expect(session.dirty).toBe(false);
  });

  it("loads pre-annotation layers byte-identically", () => {
    const pre = preAnnotation()!;
    const session = new CanvasSession(envelope(pre), 8, 8);
    expect(session.maskFor("polycrystalline").toRle()).toEqual(pre.masks[0].rle);
    expect(session.boxesFor("center")).toEqual([{ x: 1, y: 1, w: 3, h: 3 }]);
  });

  it("rejects a pre-annotation at the wrong resolution", () => {
    const pre = preAnnotation()!;
    expect(() => new CanvasSession(envelope(pre), 16, 16)).toThrow(/8x8/);
  });

  it("edits touch only the active class layer", () => {
    const session = new CanvasSession(envelope(), 8, 8);
    session.activeClass = "polycrystalline";
    session.brushStroke([[4, 4]]);
    expect(session.maskFor("polycrystalline").isEmpty()).toBe(false);
    expect(session.boxesFor("center")).toEqual([]);
    expect(session.dirty).toBe(true);
  });

  it("undo restores the previous raster and redo replays it", () => {
    const session = new CanvasSession(envelope(), 8, 8);
    session.brushStroke([[4, 4]]);
    const afterStroke = session.maskFor("polycrystalline").data.slice();
    expect(session.undo()).toBe(true);
    expect(session.maskFor("polycrystalline").isEmpty()).toBe(true);
    expect(session.redo()).toBe(true);
    expect(session.maskFor("polycrystalline").data).toEqual(afterStroke);
  });

  it("keeps at least 20 undo levels", () => {
    const session = new CanvasSession(envelope(), 8, 8);
    for (let i = 0; i < 30; i++) {
      session.brushStroke([[i % 8, Math.floor(i / 8) % 8]]);
    }
    expect(session.undoDepth).toBeGreaterThanOrEqual(20);
    let undos = 0;
    while (session.undo()) undos += 1;
    expect(undos).toBeGreaterThanOrEqual(20);
  });

  it("drawing a box then undoing removes it from the session", () => {
    const session = new CanvasSession(envelope(), 8, 8);
    session.activeClass = "center";
    session.addBox({ x: 1, y: 2, w: 3, h: 2 });
    expect(session.boxesFor("center")).toHaveLength(1);
    session.undo();
    expect(session.boxesFor("center")).toHaveLength(0);
  });

  it("box moves and removals are undoable edits", () => {
    const session = new CanvasSession(envelope(), 8, 8);
    session.activeClass = "center";
    session.addBox({ x: 1, y: 1, w: 2, h: 2 });
    session.moveBox(0, { x: 3, y: 3, w: 2, h: 2 });
    expect(session.boxesFor("center")[0]).toEqual({ x: 3, y: 3, w: 2, h: 2 });
    session.removeBox(0);
    expect(session.boxesFor("center")).toHaveLength(0);
    session.undo();
    expect(session.boxesFor("center")[0]).toEqual({ x: 3, y: 3, w: 2, h: 2 });
  });

  it("timer accumulates only while focused", () => {
    const session = new CanvasSession(envelope(), 8, 8);
    session.tick(5);
    session.setFocused(false);
    session.tick(100);
    session.setFocused(true);
    session.tick(2);
    expect(session.timerSeconds).toBe(7);
  });
});
