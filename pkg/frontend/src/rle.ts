// Row-major run-length coding of binary masks, matching the service:
// the first run counts background pixels, runs alternate bg/fg, and the
// encoding is canonical (no zero run except a leading one), so equal
// masks have identical run arrays.

export function rleEncode(mask: Uint8Array): number[] {
  if (mask.length === 0) throw new Error("mask must not be empty");
  const runs: number[] = [];
  let current = 0; // background first
  let length = 0;
  for (let i = 0; i < mask.length; i++) {
    const value = mask[i] ? 1 : 0;
    if (value === current) {
      length += 1;
    } else {
      runs.push(length);
      current = value;
      length = 1;
    }
  }
  runs.push(length);
  return runs;
}

export function rleDecode(runs: number[], width: number, height: number): Uint8Array {
  const total = runs.reduce((a, b) => a + b, 0);
  if (total !== width * height) {
    throw new Error(`run lengths sum to ${total}, expected ${width * height}`);
  }
  const mask = new Uint8Array(width * height);
  let offset = 0;
  for (let i = 0; i < runs.length; i++) {
    const value = i % 2;
    if (value === 1) mask.fill(1, offset, offset + runs[i]);
    offset += runs[i];
  }
  return mask;
}

export function rleEqual(a: number[], b: number[]): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i]);
}

/** Count of pixels where the two masks disagree (symmetric difference). */
export function maskDiffCount(a: Uint8Array, b: Uint8Array): number {
  if (a.length !== b.length) throw new Error("mask sizes differ");
  let count = 0;
  for (let i = 0; i < a.length; i++) {
    if ((a[i] ? 1 : 0) !== (b[i] ? 1 : 0)) count += 1;
  }
  return count;
}
