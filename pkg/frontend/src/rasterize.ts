/**
 * Deterministic stroke rasterization.
 *
 * The rasterizer is pure math (no canvas API), so the same document
 * always produces byte-identical output in any environment: each pixel's
 * darkness is the anti-aliased coverage of the nearest stroke segment.
 */

import { StrokeDocument } from "./types.js";

/** Distance from point (px, py) to the segment (ax, ay)-(bx, by). */
function segmentDistance(
  px: number, py: number, ax: number, ay: number, bx: number, by: number,
): number {
  const dx = bx - ax;
  const dy = by - ay;
  const lengthSq = dx * dx + dy * dy;
  let t = 0;
  if (lengthSq > 0) {
    t = Math.max(0, Math.min(1, ((px - ax) * dx + (py - ay) * dy) / lengthSq));
  }
  const cx = ax + t * dx;
  const cy = ay + t * dy;
  return Math.hypot(px - cx, py - cy);
}

/**
 * Rasterize a stroke document to a grayscale buffer (row-major, 0 = black
 * stroke, 255 = white background), anti-aliased over a one-pixel band.
 * An empty document yields an all-white raster.
 */
export function rasterize(
  doc: StrokeDocument,
  target: { width: number; height: number },
): Uint8ClampedArray {
  const { width, height } = target;
  const out = new Uint8ClampedArray(width * height).fill(255);
  const scaleX = width / doc.canvasSize.width;
  const scaleY = height / doc.canvasSize.height;

  for (const stroke of doc.strokes) {
    if (stroke.points.length === 0) continue;
    const radius = (stroke.width * Math.min(scaleX, scaleY)) / 2;
    const pts = stroke.points.map((p) => ({ x: p.x * scaleX, y: p.y * scaleY }));
    const segments = pts.length === 1 ? [[pts[0], pts[0]]] : pts.slice(1).map((p, i) => [pts[i], p]);

    for (const [a, b] of segments) {
      const minX = Math.max(0, Math.floor(Math.min(a.x, b.x) - radius - 1));
      const maxX = Math.min(width - 1, Math.ceil(Math.max(a.x, b.x) + radius + 1));
      const minY = Math.max(0, Math.floor(Math.min(a.y, b.y) - radius - 1));
      const maxY = Math.min(height - 1, Math.ceil(Math.max(a.y, b.y) + radius + 1));
      for (let y = minY; y <= maxY; y++) {
        for (let x = minX; x <= maxX; x++) {
          const d = segmentDistance(x + 0.5, y + 0.5, a.x, a.y, b.x, b.y);
          // coverage 1 inside the stroke, fading to 0 over one pixel
          const coverage = Math.max(0, Math.min(1, radius + 0.5 - d));
          if (coverage > 0) {
            const index = y * width + x;
            const value = Math.round(255 * (1 - coverage));
            if (value < out[index]) out[index] = value;
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Minimal PNG writer (grayscale 8-bit, stored-deflate) — dependency-free and
// byte-deterministic, unlike canvas.toDataURL.
// ---------------------------------------------------------------------------

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(bytes: Uint8Array): number {
  let crc = 0xffffffff;
  for (const b of bytes) {
    crc = CRC_TABLE[(crc ^ b) & 0xff] ^ (crc >>> 8);
  }
  return (crc ^ 0xffffffff) >>> 0;
}

function adler32(bytes: Uint8Array): number {
  let a = 1;
  let b = 0;
  for (const byte of bytes) {
    a = (a + byte) % 65521;
    b = (b + a) % 65521;
  }
  return ((b << 16) | a) >>> 0;
}

function u32(value: number): Uint8Array {
  return new Uint8Array([(value >>> 24) & 0xff, (value >>> 16) & 0xff, (value >>> 8) & 0xff, value & 0xff]);
}

function chunk(type: string, data: Uint8Array): Uint8Array {
  const typeBytes = new Uint8Array([...type].map((c) => c.charCodeAt(0)));
  const body = new Uint8Array(typeBytes.length + data.length);
  body.set(typeBytes);
  body.set(data, typeBytes.length);
  const out = new Uint8Array(4 + body.length + 4);
  out.set(u32(data.length));
  out.set(body, 4);
  out.set(u32(crc32(body)), 4 + body.length);
  return out;
}

/** zlib stream with stored (uncompressed) deflate blocks. */
function zlibStored(raw: Uint8Array): Uint8Array {
  const blocks: Uint8Array[] = [new Uint8Array([0x78, 0x01])];
  const maxBlock = 65535;
  for (let offset = 0; offset < raw.length || offset === 0; offset += maxBlock) {
    const slice = raw.subarray(offset, Math.min(offset + maxBlock, raw.length));
    const final = offset + maxBlock >= raw.length ? 1 : 0;
    const header = new Uint8Array([
      final,
      slice.length & 0xff, (slice.length >>> 8) & 0xff,
      ~slice.length & 0xff, (~slice.length >>> 8) & 0xff,
    ]);
    blocks.push(header, slice);
    if (raw.length === 0) break;
  }
  blocks.push(u32(adler32(raw)));
  const total = blocks.reduce((n, b) => n + b.length, 0);
  const out = new Uint8Array(total);
  let at = 0;
  for (const b of blocks) {
    out.set(b, at);
    at += b.length;
  }
  return out;
}

/** Encode a grayscale raster as a PNG file. */
export function encodeGrayPng(pixels: Uint8ClampedArray, width: number, height: number): Uint8Array {
  const ihdr = new Uint8Array(13);
  ihdr.set(u32(width), 0);
  ihdr.set(u32(height), 4);
  ihdr.set([8, 0, 0, 0, 0], 8); // 8-bit grayscale, no interlace

  const raw = new Uint8Array(height * (width + 1));
  for (let y = 0; y < height; y++) {
    raw[y * (width + 1)] = 0; // filter: none
    raw.set(pixels.subarray(y * width, (y + 1) * width), y * (width + 1) + 1);
  }

  const signature = new Uint8Array([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);
  const parts = [
    signature,
    chunk("IHDR", ihdr),
    chunk("IDAT", zlibStored(raw)),
    chunk("IEND", new Uint8Array(0)),
  ];
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let at = 0;
  for (const p of parts) {
    out.set(p, at);
    at += p.length;
  }
  return out;
}

const B64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

/** Environment-independent base64 (btoa is unavailable under node). */
export function toBase64(bytes: Uint8Array): string {
  let out = "";
  for (let i = 0; i < bytes.length; i += 3) {
    const b0 = bytes[i];
    const b1 = i + 1 < bytes.length ? bytes[i + 1] : 0;
    const b2 = i + 2 < bytes.length ? bytes[i + 2] : 0;
    out += B64[b0 >> 2] + B64[((b0 & 3) << 4) | (b1 >> 4)];
    out += i + 1 < bytes.length ? B64[((b1 & 15) << 2) | (b2 >> 6)] : "=";
    out += i + 2 < bytes.length ? B64[b2 & 63] : "=";
  }
  return out;
}

/** Rasterize a document and package it as the base64 PNG the service expects. */
export function rasterizeToPayload(
  doc: StrokeDocument,
  target: { width: number; height: number },
): string {
  return toBase64(encodeGrayPng(rasterize(doc, target), target.width, target.height));
}
