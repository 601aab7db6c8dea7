import { describe, expect, it } from "vitest";

import { cellRect, colormapFor, divergingColor, expandToCanvas, legendStops, sequentialColor } from "../src/overlay.js";

describe("overlay alignment", () => {
  it("cell rects tile the canvas exactly", () => {
    const canvas = 512;
    for (const grid of [8, 16, 32]) {
      let covered = 0;
      for (let row = 0; row < grid; row++) {
        for (let col = 0; col < grid; col++) {
          const r = cellRect(row, col, grid, grid, canvas, canvas);
          covered += (r.x1 - r.x0) * (r.y1 - r.y0);
        }
      }
      expect(covered).toBeCloseTo(canvas * canvas, 6);
    }
  });

  it("expanded pixels agree with cellRect within one device pixel", () => {
    const canvas = 512;
    const grid = 8;
    const values = new Float32Array(grid * grid).map((_, i) => i / (grid * grid));
    const expanded = expandToCanvas(values, grid, grid, canvas, canvas);
    for (let row = 0; row < grid; row++) {
      for (let col = 0; col < grid; col++) {
        const rect = cellRect(row, col, grid, grid, canvas, canvas);
        const expected = values[row * grid + col];
        // sample strictly inside the rect, one device pixel from each edge
        for (const [x, y] of [
          [Math.ceil(rect.x0) + 1, Math.ceil(rect.y0) + 1],
          [Math.floor(rect.x1) - 2, Math.floor(rect.y1) - 2],
        ]) {
          expect(expanded[y * canvas + x]).toBeCloseTo(expected, 6);
        }
      }
    }
  });

  it("expands non-divisible geometries without overflow", () => {
    const expanded = expandToCanvas([0, 1, 2, 3, 4, 5], 2, 3, 50, 50);
    expect(expanded[0]).toBe(0);
    expect(expanded[50 * 50 - 1]).toBe(5);
  });
});

describe("colormaps and legends", () => {
  it("sequential colormap is transparent at zero and opaque at one", () => {
    expect(sequentialColor(0)[3]).toBe(0);
    expect(sequentialColor(1)[3]).toBeGreaterThan(150);
  });

  it("diverging colormap separates sign around the midpoint", () => {
    const low = divergingColor(0.0);
    const mid = divergingColor(0.5);
    const high = divergingColor(1.0);
    expect(low[2]).toBeGreaterThan(low[0]); // blue below
    expect(high[0]).toBeGreaterThan(high[2]); // red above
    expect(mid[3]).toBe(0); // transparent near zero
  });

  it("scale and shift overlays use the diverging map with a zero stop", () => {
    expect(colormapFor("scale")).toBe(divergingColor);
    expect(colormapFor("attention:8x8")).toBe(sequentialColor);
    const stops = legendStops("shift");
    expect(stops.map((s) => s.label)).toContain("0");
  });
});
