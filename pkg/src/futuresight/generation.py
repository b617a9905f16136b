"""Interactive decoding with mid-stream future swaps.

A session pins the sampled prefix: swapping the future re-encodes the
conditioning and rebuilds the attention cache over the committed tokens, but
never rewrites text that was already emitted. Everything downstream of the
swap sees the new memory on the next step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bpe import BOS, EOS, StreamingDecoder
from .model import EMBEDDING, MEMORY, NONE, InferenceModel, ModelError
from .segmentation import TERMINATORS, split_sentences

# closed error vocabulary, shared with the HTTP layer
INVALID_REQUEST = "INVALID_REQUEST"
EMPTY_FUTURE = "EMPTY_FUTURE"
CONTEXT_TOO_LONG = "CONTEXT_TOO_LONG"


class GenerationError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.9
    top_k: int = 40
    top_p: float = 0.95
    max_new_tokens: int = 64
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if self.temperature < 0:
            raise GenerationError(INVALID_REQUEST, "temperature must be >= 0")
        if self.top_k < 0:
            raise GenerationError(INVALID_REQUEST, "top_k must be >= 0")
        if not 0 < self.top_p <= 1:
            raise GenerationError(INVALID_REQUEST, "top_p must be in (0, 1]")
        if self.max_new_tokens < 0:
            raise GenerationError(INVALID_REQUEST, "max_new_tokens must be >= 0")


def sample_token(logits: np.ndarray, params: SamplingParams, rng: T.Rng) -> int:
    """Temperature, then top-k, then top-p, renormalizing after each cut.
    Ties order by token id, so a run is reproducible from its seed."""
    if params.greedy or params.temperature == 0.0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / params.temperature
    probs = T.softmax_np(z[None, :])[0]
    order = np.argsort(-probs, kind="stable")
    if params.top_k and params.top_k < order.size:
        order = order[:params.top_k]
        kept = probs[order]
        kept /= kept.sum()
    else:
        kept = probs[order]
    if params.top_p < 1.0:
        cum = np.cumsum(kept)
        cut = int(np.searchsorted(cum, params.top_p)) + 1  # keep the crossing token
        order = order[:cut]
        kept = kept[:cut]
        kept /= kept.sum()
    full = np.zeros_like(probs)
    full[order] = kept
    return rng.choice_p(full)


@dataclass
class FutureRecord:
    text: str
    distance: int
    token_offset: int   # committed generated tokens when this future took over
    char_offset: int    # length of the generated text at that moment


@dataclass
class StepResult:
    token_id: int
    piece: str


@dataclass
class GenerationResult:
    token_ids: list[int]
    text: str
    reason: str  # "budget" | "eos" | "sentences" | "length"


class Session:
    """One decoding stream: committed context, sampled tokens, future history."""

    def __init__(self, model: InferenceModel, context_text: str,
                 future_text: str | None, distance: int = 1,
                 params: SamplingParams | None = None):
        self.model = model
        self.tokenizer = model.tokenizer
        self.params = params or SamplingParams()
        self.context_text = context_text
        self.context_ids = [BOS] + self.tokenizer.encode(context_text)
        if len(self.context_ids) >= model.cfg.max_seq:
            raise GenerationError(
                CONTEXT_TOO_LONG,
                f"context is {len(self.context_ids)} tokens, the model window "
                f"is {model.cfg.max_seq} and generation needs room")
        self._rng = T.Rng(self.params.seed)
        self._decoder = StreamingDecoder(self.tokenizer)
        self.generated_ids: list[int] = []
        self.generated_text = ""
        self.eos_reached = False
        self.futures: list[FutureRecord] = []
        self._cond = self._encode_future(future_text, distance)
        if self._cond is not None:
            self.futures.append(FutureRecord(future_text, distance, 0, 0))
        self._state = model.prime(self.context_ids, self._cond)

    def _encode_future(self, text: str | None, distance: int):
        mode = self.model.cfg.injection_mode
        if mode == NONE:
            if text:
                raise GenerationError(
                    INVALID_REQUEST, "this model takes no future conditioning")
            return None
        if text is None or not text.strip():
            raise GenerationError(EMPTY_FUTURE, "future text is empty")
        if distance < 1:
            raise GenerationError(INVALID_REQUEST, "distance must be >= 1")
        ids = self.tokenizer.encode(text)
        try:
            if mode == MEMORY:
                return self.model.conditioning(ids, distance)
            return self.model.encode_future(ids, distance)
        except ModelError as e:
            raise GenerationError(INVALID_REQUEST, str(e)) from e

    @property
    def n_committed(self) -> int:
        return len(self.context_ids) + len(self.generated_ids)

    def step(self) -> StepResult | None:
        """Sample and commit one token. None means the stream is finished."""
        if self.eos_reached:
            return None
        if self.n_committed >= self.model.cfg.max_seq:
            return None
        token = sample_token(self._state.last_logits, self.params, self._rng)
        if token == EOS:
            self.eos_reached = True
            return None
        self.model.step(self._state, token)
        self.generated_ids.append(token)
        piece = self._decoder.push(token)
        self.generated_text += piece
        return StepResult(token_id=token, piece=piece)

    def set_future(self, text: str, distance: int) -> float:
        """Swap the conditioning mid-stream; returns the recompute time in ms.

        The committed tokens stay; the cache is rebuilt under the new future.
        A failed swap leaves the session exactly as it was.
        """
        cond = self._encode_future(text, distance)
        t0 = time.monotonic()
        state = self.model.prime(self.context_ids + self.generated_ids, cond)
        self._cond = cond
        self._state = state
        self.futures.append(FutureRecord(
            text, distance,
            token_offset=len(self.generated_ids),
            char_offset=len(self.generated_text)))
        return (time.monotonic() - t0) * 1000.0


def complete_sentences(text: str) -> int:
    parts = split_sentences(text)
    if not parts:
        return 0
    if text.rstrip() and text.rstrip()[-1] in TERMINATORS + "\"'”’»)]}":
        return len(parts)
    return len(parts) - 1


def generate(session: Session, max_new_tokens: int | None = None,
             stop_after_sentences: int | None = None) -> GenerationResult:
    """Run the session forward under a token budget (and optionally until a
    number of finished sentences)."""
    budget = session.params.max_new_tokens if max_new_tokens is None else max_new_tokens
    if budget < 0:
        raise GenerationError(INVALID_REQUEST, "max_new_tokens must be >= 0")
    base_sentences = complete_sentences(session.generated_text)
    ids: list[int] = []
    pieces: list[str] = []
    reason = "budget"
    for _ in range(budget):
        res = session.step()
        if res is None:
            reason = "eos" if session.eos_reached else "length"
            break
        ids.append(res.token_id)
        pieces.append(res.piece)
        if stop_after_sentences is not None:
            done = complete_sentences(session.generated_text) - base_sentences
            if done >= stop_after_sentences:
                reason = "sentences"
                break
    return GenerationResult(token_ids=ids, text="".join(pieces), reason=reason)
