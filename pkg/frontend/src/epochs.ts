/**
 * Split generated text into future-epochs: one span per entry of the server's
 * future history, so the reader can see which future was active while each
 * stretch of story was produced.
 *
 * The server transcript is the single source of truth. Offsets arrive as
 * code-point positions (Python string lengths); JS strings index by UTF-16
 * unit, so offsets are converted before slicing.
 */

import type { FutureInfo } from "./types.js";

export type Epoch = {
  /** null for text generated before any future was set */
  future: FutureInfo | null;
  text: string;
  /** code-point offset into the generated text where this epoch starts */
  start: number;
  /** true when a swap re-submitted the previous future verbatim */
  unchanged: boolean;
};

export function segmentEpochs(generated: string, futures: FutureInfo[]): Epoch[] {
  const total = codePointLength(generated);
  const epochs: Epoch[] = [];

  // Clamp offsets into range and keep them monotonic; a malformed history
  // should degrade to odd spans, never to text loss or a crash.
  let prev = 0;
  const starts = futures.map((f) => {
    prev = Math.min(Math.max(f.char_offset, prev), total);
    return prev;
  });

  const firstStart = futures.length > 0 ? starts[0] : total;
  if (firstStart > 0 || futures.length === 0) {
    epochs.push({ future: null, text: sliceCp(generated, 0, firstStart), start: 0, unchanged: false });
  }

  for (let i = 0; i < futures.length; i++) {
    const end = i + 1 < futures.length ? starts[i + 1] : total;
    const before = i > 0 ? futures[i - 1] : null;
    epochs.push({
      future: futures[i],
      text: sliceCp(generated, starts[i], end),
      start: starts[i],
      unchanged: before !== null
        && before.text === futures[i].text
        && before.distance === futures[i].distance,
    });
  }
  return epochs;
}

/** Concatenation of epoch texts; must equal the transcript exactly. */
export function epochsText(epochs: Epoch[]): string {
  return epochs.map((e) => e.text).join("");
}

export function codePointLength(s: string): number {
  let n = 0;
  for (let i = 0; i < s.length; n++) {
    const code = s.codePointAt(i) as number;
    i += code > 0xffff ? 2 : 1;
  }
  return n;
}

function sliceCp(s: string, startCp: number, endCp: number): string {
  return [...s].slice(startCp, endCp).join("");
}
