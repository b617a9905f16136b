/**
 * Single-page steering client. The page renders whatever the server
 * transcript says and nothing else: streams append provisional text, but
 * every stream end, swap, and error path re-fetches the transcript and
 * redraws from it, so the story area can never drift from the server.
 */

import { ApiClient, ApiError } from "./api.js";
import { segmentEpochs } from "./epochs.js";
import type { Epoch } from "./epochs.js";
import type { SamplingParams, Transcript } from "./types.js";
import { DEFAULT_PARAMS } from "./types.js";

const N_COLORS = 6;

export type App = {
  client: ApiClient;
  sid(): string | null;
  isStreaming(): boolean;
  createSession(): Promise<void>;
  generate(): Promise<void>;
  stopStream(): void;
  swapFuture(): Promise<void>;
  refresh(): Promise<void>;
  resume(sid: string): Promise<boolean>;
};

export function mountApp(root: HTMLElement, client: ApiClient): App {
  // --- static skeleton ------------------------------------------------------
  const banner = el("div", { class: "banner hidden", role: "alert" });
  const bannerText = el("span", { class: "banner-text" });
  const bannerClose = el("button", { class: "banner-close", type: "button" }, "dismiss");
  banner.append(bannerText, bannerClose);

  const contextInput = textarea("ctx-input", "Opening sentences the story must continue from…");
  const futureInput = input("future-input", "text", "A plot event that should happen soon…");
  const futureError = el("span", { class: "field-error hidden" }, "enter a future event");
  const distanceInput = input("distance-input", "number", "");
  distanceInput.value = "1";
  distanceInput.min = "1";
  distanceInput.max = "4";

  const temperature = numField("temperature", DEFAULT_PARAMS.temperature);
  const topK = numField("top-k", DEFAULT_PARAMS.top_k);
  const topP = numField("top-p", DEFAULT_PARAMS.top_p);
  const seed = numField("seed", DEFAULT_PARAMS.seed);
  const budget = numField("tokens", DEFAULT_PARAMS.max_new_tokens);
  budget.min = "1";

  const startBtn = button("start-btn", "start session");
  const generateBtn = button("generate-btn", "generate");
  const stopBtn = button("stop-btn", "stop");
  const swapBtn = button("swap-btn", "set future");
  swapBtn.title = "replaces the active future for all text generated from here on";

  const sessionChip = el("span", { class: "chip", id: "session-chip" }, "no session");
  const badge = el("span", { class: "badge hidden", id: "realization" });
  const statusLine = el("div", { class: "status", id: "status" });

  const contextBlock = el("div", { class: "context-block", id: "context-block" });
  const storyArea = el("div", { class: "story-area", id: "story-area" });

  const sessionForm = el("section", { class: "pane" },
    el("h2", {}, "session"),
    labeled("context", contextInput),
    labeled("future", futureInput), futureError,
    labeled("distance", distanceInput),
    el("div", { class: "param-row" },
      labeled("temperature", temperature), labeled("top-k", topK),
      labeled("top-p", topP), labeled("seed", seed)),
    startBtn);

  const steerForm = el("section", { class: "pane" },
    el("h2", {}, "steering"),
    el("div", { class: "param-row" }, labeled("tokens", budget)),
    el("div", { class: "button-row" }, generateBtn, stopBtn, swapBtn));

  root.append(
    el("header", { class: "top" }, el("h1", {}, "futuresight"), sessionChip, badge),
    banner,
    el("div", { class: "columns" },
      el("div", { class: "controls" }, sessionForm, steerForm),
      el("div", { class: "story" },
        el("h2", {}, "story"), contextBlock, storyArea, statusLine)));

  // --- state ----------------------------------------------------------------
  let sid: string | null = null;
  let aborter: AbortController | null = null;
  let last: Transcript | null = null;

  function setBusy(streaming: boolean): void {
    startBtn.disabled = streaming;
    generateBtn.disabled = streaming || sid === null;
    swapBtn.disabled = streaming || sid === null;
    stopBtn.disabled = !streaming;
    if (streaming) swapBtn.title = "unavailable while a stream is active";
    else swapBtn.title = "replaces the active future for all text generated from here on";
  }
  setBusy(false);

  function showError(err: unknown): void {
    // Server codes pass through verbatim; anything else is a transport error.
    if (err instanceof ApiError) bannerText.textContent = `${err.code}: ${err.message}`;
    else bannerText.textContent = `connection error: ${err instanceof Error ? err.message : String(err)}`;
    banner.classList.remove("hidden");
  }
  bannerClose.addEventListener("click", () => banner.classList.add("hidden"));

  function params(): Partial<SamplingParams> {
    return {
      temperature: num(temperature, DEFAULT_PARAMS.temperature),
      top_k: num(topK, DEFAULT_PARAMS.top_k),
      top_p: num(topP, DEFAULT_PARAMS.top_p),
      seed: num(seed, DEFAULT_PARAMS.seed),
      max_new_tokens: num(budget, DEFAULT_PARAMS.max_new_tokens),
    };
  }

  // --- rendering ------------------------------------------------------------
  function render(t: Transcript): void {
    last = t;
    sessionChip.textContent = t.id;
    contextBlock.textContent = t.context;
    storyArea.textContent = "";
    let color = 0;
    for (const ep of segmentEpochs(t.generated, t.futures)) {
      if (ep.future !== null) {
        storyArea.append(divider(ep, color % N_COLORS));
      }
      const cls = ep.future === null ? "epoch-text epoch-plain"
        : `epoch-text epoch-c${color % N_COLORS}`;
      const span = el("span", { class: cls });
      span.textContent = ep.text;
      storyArea.append(span);
      if (ep.future !== null) color++;
    }
    statusLine.textContent = `${t.n_tokens} tokens${t.done ? " · eos" : ""}`;
  }

  function divider(ep: Epoch, color: number): HTMLElement {
    const f = ep.future as NonNullable<Epoch["future"]>;
    const node = el("div", {
      class: `epoch-divider divider-c${color}`,
      "data-offset": String(ep.start),
    });
    node.append(el("span", { class: "divider-label" }, `future (d=${f.distance}): ${f.text}`));
    if (ep.unchanged) node.append(el("span", { class: "divider-tag" }, "unchanged"));
    return node;
  }

  async function refresh(): Promise<void> {
    if (sid === null) return;
    render(await client.transcript(sid));
  }

  async function updateBadge(): Promise<void> {
    badge.classList.add("hidden");
    if (last === null || last.futures.length === 0) return;
    const epochs = segmentEpochs(last.generated, last.futures);
    const active = epochs[epochs.length - 1];
    if (active.future === null) return;
    try {
      const score = await client.scoreRealization(active.text, active.future.text);
      badge.textContent = `realization ${score.toFixed(3)}`;
      badge.classList.remove("hidden");
    } catch (err) {
      // scoring is optional server-side (no idf table loaded); stay hidden
      if (!(err instanceof ApiError && err.status === 503)) showError(err);
    }
  }

  // --- actions ---------------------------------------------------------------
  async function createSession(): Promise<void> {
    const future = futureInput.value.trim();
    if (future === "") {
      futureError.classList.remove("hidden");
      return;
    }
    futureError.classList.add("hidden");
    const distance = Math.max(1, Math.trunc(num(distanceInput, 1)));
    try {
      sid = await client.createSession({
        context: contextInput.value, future, distance, params: params(),
      });
      window.location.hash = sid;
      await refresh();
      setBusy(false);
    } catch (err) {
      showError(err);
    }
  }

  async function resume(existing: string): Promise<boolean> {
    try {
      const t = await client.transcript(existing);
      sid = existing;
      render(t);
      const activeFuture = t.futures[t.futures.length - 1];
      if (activeFuture !== undefined) {
        futureInput.value = activeFuture.text;
        distanceInput.value = String(activeFuture.distance);
      }
      setBusy(false);
      return true;
    } catch {
      return false;
    }
  }

  async function generate(): Promise<void> {
    if (sid === null || aborter !== null) return;
    aborter = new AbortController();
    setBusy(true);
    // Provisional span: colored like the active epoch, replaced wholesale by
    // the re-render when the stream settles.
    const liveColor = last === null ? 0 : (Math.max(0, last.futures.length - 1)) % N_COLORS;
    const live = el("span", { class: `epoch-text epoch-c${liveColor} live` });
    storyArea.append(live);
    try {
      const end = await client.generate(
        sid,
        { maxNewTokens: num(budget, DEFAULT_PARAMS.max_new_tokens), signal: aborter.signal },
        (tok) => { live.textContent = (live.textContent ?? "") + tok.piece; });
      await refresh();
      if (end !== null) {
        statusLine.textContent = `${end.total_tokens} tokens · stream ended (${end.reason})`;
      }
      await updateBadge();
    } catch (err) {
      showError(err);
      await refresh().catch(() => undefined);
    } finally {
      aborter = null;
      setBusy(false);
    }
  }

  function stopStream(): void {
    aborter?.abort();
  }

  async function swapFuture(): Promise<void> {
    if (sid === null || aborter !== null) return;
    const future = futureInput.value.trim();
    if (future === "") {
      futureError.classList.remove("hidden");
      return;
    }
    futureError.classList.add("hidden");
    const distance = Math.max(1, Math.trunc(num(distanceInput, 1)));
    try {
      const ms = await client.swapFuture(sid, future, distance);
      await refresh();
      statusLine.textContent += ` · future recomputed in ${ms.toFixed(1)} ms`;
    } catch (err) {
      showError(err);
    }
  }

  startBtn.addEventListener("click", () => void createSession());
  generateBtn.addEventListener("click", () => void generate());
  stopBtn.addEventListener("click", stopStream);
  swapBtn.addEventListener("click", () => void swapFuture());

  return {
    client,
    sid: () => sid,
    isStreaming: () => aborter !== null,
    createSession, generate, stopStream, swapFuture, refresh, resume,
  };
}

// --- tiny DOM helpers --------------------------------------------------------

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, attrs: Record<string, string> = {}, ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  node.append(...children);
  return node;
}

function input(id: string, type: string, placeholder: string): HTMLInputElement {
  const node = el("input", { id, type });
  if (placeholder !== "") node.placeholder = placeholder;
  return node;
}

function textarea(id: string, placeholder: string): HTMLTextAreaElement {
  const node = el("textarea", { id, rows: "6" });
  node.placeholder = placeholder;
  return node;
}

function numField(id: string, value: number): HTMLInputElement {
  const node = input(id, "number", "");
  node.value = String(value);
  node.step = "any";
  return node;
}

function button(id: string, label: string): HTMLButtonElement {
  return el("button", { id, type: "button" }, label);
}

function labeled(text: string, control: HTMLElement): HTMLLabelElement {
  return el("label", { class: "field" }, el("span", { class: "field-name" }, text), control);
}

function num(node: HTMLInputElement, fallback: number): number {
  const v = Number(node.value);
  return Number.isFinite(v) ? v : fallback;
}
