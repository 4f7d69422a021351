// Editing session for one labeling task: per-class layers, tools, an
// undo/redo stack, and a focus-gated timer so the reported labeling time
// stays honest when the tab sits in the background.

import { MaskRaster } from "./raster.js";
import type { Box, ClassInfo, TaskEnvelope, Tool } from "./types.js";

const UNDO_DEPTH = 50; // contract asks for at least 20

interface Snapshot {
  masks: Map<string, Uint8Array>;
  boxes: Map<string, Box[]>;
}

export class CanvasSession {
  readonly task: TaskEnvelope;
  readonly width: number;
  readonly height: number;
  readonly classes: ClassInfo[];
  activeClass: string;
  activeTool: Tool = "brush";
  brushRadius = 3;
  dirty = false;
  timerSeconds = 0;

  private masks = new Map<string, MaskRaster>();
  private boxes = new Map<string, Box[]>();
  private undoStack: Snapshot[] = [];
  private redoStack: Snapshot[] = [];
  private focused = true;

  constructor(task: TaskEnvelope, width: number, height: number) {
    this.task = task;
    this.width = width;
    this.height = height;
    this.classes = task.class_catalog;
    this.activeClass = this.classes[0]?.id ?? "";
    for (const cls of this.classes) {
      if (cls.task === "segmentation") {
        this.masks.set(cls.id, new MaskRaster(width, height));
      } else {
        this.boxes.set(cls.id, []);
      }
    }
    this.loadPreAnnotation();
  }

  private loadPreAnnotation(): void {
    const pre = this.task.pre_annotation;
    if (!pre) return;
    for (const mask of pre.masks) {
      if (mask.width !== this.width || mask.height !== this.height) {
        throw new Error(`pre-annotation mask is ${mask.width}x${mask.height}`);
      }
      this.masks.set(mask.class, MaskRaster.fromRle(mask.rle, mask.width, mask.height));
    }
    for (const box of pre.boxes) {
      const list = this.boxes.get(box.class) ?? [];
      list.push({ x: box.x, y: box.y, w: box.w, h: box.h });
      this.boxes.set(box.class, list);
    }
  }

  // ── layers ──

  maskFor(classId: string): MaskRaster {
    const raster = this.masks.get(classId);
    if (!raster) throw new Error(`${classId} has no mask layer`);
    return raster;
  }

  boxesFor(classId: string): Box[] {
    const list = this.boxes.get(classId);
    if (!list) throw new Error(`${classId} has no box layer`);
    return list;
  }

  segmentationClasses(): string[] {
    return [...this.masks.keys()];
  }

  detectionClasses(): string[] {
    return [...this.boxes.keys()];
  }

  // ── undo/redo ──

  private snapshot(): Snapshot {
    return {
      masks: new Map([...this.masks].map(([id, m]) => [id, m.data.slice()])),
      boxes: new Map([...this.boxes].map(([id, b]) => [id, b.map((x) => ({ ...x }))])),
    };
  }

  private restore(snapshot: Snapshot): void {
    for (const [id, data] of snapshot.masks) {
      this.masks.set(id, new MaskRaster(this.width, this.height, data.slice()));
    }
    this.boxes = new Map([...snapshot.boxes].map(([id, b]) => [id, b.map((x) => ({ ...x }))]));
  }

  private beginEdit(): void {
    this.undoStack.push(this.snapshot());
    if (this.undoStack.length > UNDO_DEPTH) this.undoStack.shift();
    this.redoStack = [];
    this.dirty = true;
  }

  undo(): boolean {
    const previous = this.undoStack.pop();
    if (!previous) return false;
    this.redoStack.push(this.snapshot());
    this.restore(previous);
    return true;
  }

  redo(): boolean {
    const next = this.redoStack.pop();
    if (!next) return false;
    this.undoStack.push(this.snapshot());
    this.restore(next);
    return true;
  }

  get undoDepth(): number {
    return this.undoStack.length;
  }

  // ── edits (image pixel coordinates; edits hit only the active class) ──

  brushStroke(points: Array<[number, number]>, erase = false): void {
    const raster = this.maskFor(this.activeClass);
    this.beginEdit();
    for (const [x, y] of points) {
      raster.stamp(x, y, this.brushRadius, !erase);
    }
  }

  fillPolygon(vertices: Array<[number, number]>): void {
    const raster = this.maskFor(this.activeClass);
    this.beginEdit();
    raster.fillPolygon(vertices, true);
  }

  addBox(box: Box): void {
    if (box.w < 1 || box.h < 1) throw new Error("box must be at least 1x1");
    const list = this.boxesFor(this.activeClass);
    this.beginEdit();
    list.push({ ...box });
  }

  removeBox(index: number): void {
    const list = this.boxesFor(this.activeClass);
    if (index < 0 || index >= list.length) return;
    this.beginEdit();
    list.splice(index, 1);
  }

  moveBox(index: number, box: Box): void {
    const list = this.boxesFor(this.activeClass);
    if (index < 0 || index >= list.length) return;
    this.beginEdit();
    list[index] = { ...box };
  }

  // ── focus-gated timer ──

  setFocused(focused: boolean): void {
    this.focused = focused;
  }

  tick(deltaSeconds: number): void {
    if (this.focused) this.timerSeconds += deltaSeconds;
  }
}
