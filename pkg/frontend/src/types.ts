/** Wire shapes for the v1 HTTP API. Field names mirror the server verbatim. */

export type SamplingParams = {
  temperature: number;
  top_k: number;
  top_p: number;
  max_new_tokens: number;
  seed: number;
  greedy: boolean;
};

export const DEFAULT_PARAMS: SamplingParams = {
  temperature: 0.9,
  top_k: 40,
  top_p: 0.95,
  max_new_tokens: 64,
  seed: 0,
  greedy: false,
};

/** One entry of the session's future history, in activation order. */
export type FutureInfo = {
  text: string;
  distance: number;
  /** committed generated tokens when this future took over */
  token_offset: number;
  /** length of the generated text at that moment */
  char_offset: number;
};

export type Transcript = {
  id: string;
  context: string;
  generated: string;
  n_tokens: number;
  done: boolean;
  futures: FutureInfo[];
};

export type TokenEvent = {
  index: number;
  token_id: number;
  piece: string;
};

export type EndEvent = {
  reason: string;
  n_tokens: number;
  total_tokens: number;
};
