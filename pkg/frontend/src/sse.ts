/**
 * Incremental text/event-stream parser.
 *
 * The server's generate endpoint answers a POST with an SSE body, which
 * EventSource cannot consume, so we read the response stream ourselves and
 * feed chunks here. Chunk boundaries can land anywhere, including inside a
 * UTF-8 sequence (the caller decodes with a streaming TextDecoder) or in the
 * middle of a field line; the parser buffers until a blank line ends a frame.
 */

export type SseFrame = {
  event: string;
  data: string;
};

export class SseParser {
  private buf = "";

  /** Feed one decoded chunk; returns every frame completed by it. */
  push(chunk: string): SseFrame[] {
    this.buf += chunk;
    const frames: SseFrame[] = [];
    for (;;) {
      const cut = this.findFrameEnd();
      if (cut === null) break;
      const [raw, rest] = cut;
      this.buf = rest;
      const frame = parseFrame(raw);
      if (frame !== null) frames.push(frame);
    }
    return frames;
  }

  /** Anything buffered but not yet terminated by a blank line. */
  pending(): string {
    return this.buf;
  }

  private findFrameEnd(): [string, string] | null {
    // A frame ends at the first blank line; accept LF and CRLF endings.
    const lf = this.buf.indexOf("\n\n");
    const crlf = this.buf.indexOf("\r\n\r\n");
    if (lf === -1 && crlf === -1) return null;
    if (crlf !== -1 && (lf === -1 || crlf < lf)) {
      return [this.buf.slice(0, crlf), this.buf.slice(crlf + 4)];
    }
    return [this.buf.slice(0, lf), this.buf.slice(lf + 2)];
  }
}

function parseFrame(raw: string): SseFrame | null {
  let event = "message";
  const data: string[] = [];
  for (const line of raw.split(/\r?\n/)) {
    if (line === "" || line.startsWith(":")) continue;
    const colon = line.indexOf(":");
    const field = colon === -1 ? line : line.slice(0, colon);
    let value = colon === -1 ? "" : line.slice(colon + 1);
    if (value.startsWith(" ")) value = value.slice(1);
    if (field === "event") event = value;
    else if (field === "data") data.push(value);
    // id/retry fields are irrelevant to this client and ignored.
  }
  if (data.length === 0) return null;
  return { event, data: data.join("\n") };
}
