import { describe, expect, it } from "vitest";

import { maskDiffCount, rleDecode, rleEncode, rleEqual } from "../src/rle.js";

function randomMask(n: number, seed: number): Uint8Array {
  // small xorshift so tests stay deterministic without a dependency
  let state = seed || 1;
  const next = () => {
    state ^= state << 13;
    state ^= state >>> 17;
    state ^= state << 5;
    return (state >>> 0) / 0xffffffff;
  };
  const mask = new Uint8Array(n);
  for (let i = 0; i < n; i++) mask[i] = next() < 0.4 ? 1 : 0;
  return mask;
}

describe("rle", () => {
  it("encodes all-background as one run", () => {
    expect(rleEncode(new Uint8Array(16))).toEqual([16]);
  });

  it("encodes all-foreground with a leading zero", () => {
    expect(rleEncode(new Uint8Array(16).fill(1))).toEqual([0, 16]);
  });

  it("encodes the 2x2 checker", () => {
    expect(rleEncode(Uint8Array.from([1, 0, 0, 1]))).toEqual([0, 1, 2, 1]);
  });

  it("rejects a sum mismatch on decode", () => {
    expect(() => rleDecode([3], 2, 2)).toThrow(/run lengths/);
  });

  it("round-trips random masks byte-identically", () => {
    for (let seed = 1; seed <= 200; seed++) {
      const mask = randomMask(64, seed);
      const runs = rleEncode(mask);
      expect(rleDecode(runs, 8, 8)).toEqual(mask);
      // canonical: only the first run may be zero
      expect(runs.slice(1).every((r) => r > 0)).toBe(true);
      // re-encoding the decode gives identical runs
      expect(rleEqual(rleEncode(rleDecode(runs, 8, 8)), runs)).toBe(true);
    }
  });

  it("counts symmetric differences", () => {
    const a = Uint8Array.from([1, 0, 1, 0]);
    const b = Uint8Array.from([1, 1, 0, 0]);
    expect(maskDiffCount(a, b)).toBe(2);
    expect(maskDiffCount(a, a)).toBe(0);
  });
});
