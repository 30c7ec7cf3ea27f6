import { describe, expect, it } from "vitest";

import { encodePng, fromBase64, readPngSize, toBase64 } from "../src/png.js";
import { mulberry32 } from "./helpers/images.js";
import { decodePng } from "./helpers/pngread.js";

describe("encodePng", () => {
  it("round-trips random grayscale buffers", () => {
    const rand = mulberry32(1);
    for (let trial = 0; trial < 20; trial++) {
      const w = 1 + Math.floor(rand() * 40);
      const h = 1 + Math.floor(rand() * 40);
      const pixels = new Uint8Array(w * h);
      for (let i = 0; i < pixels.length; i++) pixels[i] = Math.floor(rand() * 256);
      const decoded = decodePng(encodePng(pixels, w, h, 1));
      expect(decoded.width).toBe(w);
      expect(decoded.height).toBe(h);
      expect(decoded.channels).toBe(1);
      expect(decoded.data).toEqual(pixels);
    }
  });

  it("round-trips random RGB buffers", () => {
    const rand = mulberry32(2);
    for (let trial = 0; trial < 20; trial++) {
      const w = 1 + Math.floor(rand() * 24);
      const h = 1 + Math.floor(rand() * 24);
      const pixels = new Uint8Array(w * h * 3);
      for (let i = 0; i < pixels.length; i++) pixels[i] = Math.floor(rand() * 256);
      const decoded = decodePng(encodePng(pixels, w, h, 3));
      expect(decoded.channels).toBe(3);
      expect(decoded.data).toEqual(pixels);
    }
  });

  it("handles images whose pixel stream spans several deflate blocks", () => {
    const w = 300;
    const h = 100; // 90300 bytes raw > one 65535-byte stored block
    const pixels = new Uint8Array(w * h * 3);
    for (let i = 0; i < pixels.length; i++) pixels[i] = i % 251;
    const decoded = decodePng(encodePng(pixels, w, h, 3));
    expect(decoded.data).toEqual(pixels);
  });

  it("is deterministic", () => {
    const pixels = new Uint8Array([0, 255, 128, 7]);
    const a = encodePng(pixels, 2, 2, 1);
    const b = encodePng(pixels, 2, 2, 1);
    expect(a).toEqual(b);
  });

  it("rejects a buffer that does not match the dimensions", () => {
    expect(() => encodePng(new Uint8Array(5), 2, 2, 1)).toThrow(/expected 4 bytes/);
  });
});

describe("readPngSize", () => {
  it("agrees with the encoder without decompressing", () => {
    const png = encodePng(new Uint8Array(48 * 24), 48, 24, 1);
    expect(readPngSize(png)).toEqual({ width: 48, height: 24 });
  });

  it("rejects non-PNG bytes", () => {
    expect(() => readPngSize(new Uint8Array([1, 2, 3]))).toThrow(/not a PNG/);
    const junk = new Uint8Array(64).fill(0x41);
    expect(() => readPngSize(junk)).toThrow(/not a PNG/);
  });
});

describe("base64", () => {
  it("round-trips arbitrary bytes", () => {
    const rand = mulberry32(3);
    for (const length of [0, 1, 2, 3, 100, 65537]) {
      const bytes = new Uint8Array(length);
      for (let i = 0; i < length; i++) bytes[i] = Math.floor(rand() * 256);
      expect(fromBase64(toBase64(bytes))).toEqual(bytes);
    }
  });

  it("matches the value the server would produce", () => {
    expect(toBase64(new Uint8Array([72, 105, 33]))).toBe("SGkh");
  });
});
