/**
 * The inpaint mask, kept as a plain byte buffer rather than canvas
 * pixels. Painting on a canvas antialiases stroke edges into partial
 * values; the server wants a hard 0/255 mask at exactly the init
 * image's size, so strokes are rasterized here and the canvas only
 * displays the result.
 */

import { encodePng, toBase64 } from "./png.js";

export class MaskBuffer {
  readonly width: number;
  readonly height: number;
  readonly data: Uint8Array;

  constructor(width: number, height: number) {
    if (width < 1 || height < 1) {
      throw new Error(`bad mask size ${width}x${height}`);
    }
    this.width = width;
    this.height = height;
    this.data = new Uint8Array(width * height);
  }

  /** Stamp a filled circle of `value` (255 paints, 0 erases). */
  stamp(cx: number, cy: number, radius: number, value: 0 | 255): void {
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
          this.data[y * this.width + x] = value;
        }
      }
    }
  }

  /** Stamp along a segment so fast pointer moves leave no gaps. */
  stroke(x0: number, y0: number, x1: number, y1: number, radius: number, value: 0 | 255): void {
    const steps = Math.max(1, Math.ceil(Math.hypot(x1 - x0, y1 - y0)));
    for (let i = 0; i <= steps; i++) {
      const t = i / steps;
      this.stamp(x0 + (x1 - x0) * t, y0 + (y1 - y0) * t, radius, value);
    }
  }

  clear(): void {
    this.data.fill(0);
  }

  isEmpty(): boolean {
    return this.data.every((v) => v === 0);
  }

  /** Fraction of painted pixels, for a "N% selected" readout. */
  coverage(): number {
    let painted = 0;
    for (const v of this.data) {
      if (v !== 0) painted++;
    }
    return painted / this.data.length;
  }

  toPngBase64(): string {
    return toBase64(encodePng(this.data, this.width, this.height, 1));
  }
}
