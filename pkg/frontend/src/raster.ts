// Editable binary raster for one class layer.
//
// All edits happen in image pixel coordinates, never screen coordinates,
// so zoom level cannot introduce resampling drift: a brush stamp touches
// exactly the pixels whose centers fall inside the brush disk.

import { rleDecode, rleEncode } from "./rle.js";

export class MaskRaster {
  readonly width: number;
  readonly height: number;
  data: Uint8Array;

  constructor(width: number, height: number, data?: Uint8Array) {
    if (width < 1 || height < 1) throw new Error("raster must be at least 1x1");
    this.width = width;
    this.height = height;
    this.data = data ?? new Uint8Array(width * height);
    if (this.data.length !== width * height) {
      throw new Error("data length does not match dimensions");
    }
  }

  static fromRle(runs: number[], width: number, height: number): MaskRaster {
    return new MaskRaster(width, height, rleDecode(runs, width, height));
  }

  clone(): MaskRaster {
    return new MaskRaster(this.width, this.height, this.data.slice());
  }

  toRle(): number[] {
    return rleEncode(this.data);
  }

  get(x: number, y: number): boolean {
    return this.data[y * this.width + x] !== 0;
  }

  foregroundCount(): number {
    let count = 0;
    for (let i = 0; i < this.data.length; i++) if (this.data[i]) count += 1;
    return count;
  }

  isEmpty(): boolean {
    return this.foregroundCount() === 0;
  }

  /** Pixels whose centers lie within `radius` of (cx+0.5, cy+0.5). */
  stamp(cx: number, cy: number, radius: number, value: boolean): void {
    const r = Math.max(0, radius);
    const x0 = Math.max(0, Math.floor(cx - r));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + r));
    const y0 = Math.max(0, Math.floor(cy - r));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + r));
    const r2 = r * r;
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy <= r2) {
          this.data[y * this.width + x] = value ? 1 : 0;
        }
      }
    }
  }

  /** Rasterize a polygon with the even-odd rule at pixel centers and OR
   *  (or erase) it into the layer — the same semantics the service uses,
   *  so the preview here matches the stored mask there. */
  fillPolygon(vertices: Array<[number, number]>, value: boolean): void {
    if (vertices.length < 3) throw new Error("polygon needs at least 3 vertices");
    const n = vertices.length;
    for (let row = 0; row < this.height; row++) {
      const py = row + 0.5;
      for (let col = 0; col < this.width; col++) {
        const px = col + 0.5;
        let inside = false;
        for (let i = 0; i < n; i++) {
          const [x1, y1] = vertices[i];
          const [x2, y2] = vertices[(i + 1) % n];
          if (y1 === y2) continue;
          const straddles = y1 > py !== y2 > py;
          if (!straddles) continue;
          const xCross = x1 + ((py - y1) * (x2 - x1)) / (y2 - y1);
          if (px < xCross) inside = !inside;
        }
        if (inside) this.data[row * this.width + col] = value ? 1 : 0;
      }
    }
  }
}
