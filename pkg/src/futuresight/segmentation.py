"""Rule-based sentence segmentation and word tokenization for story text.

The splitter is deliberately deterministic: no learned models, no language
packs. Stories are short narrative prose, so terminator punctuation plus an
honorific guard list covers the cases that matter.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

TERMINATORS = ".!?"

# Characters that may trail a terminator and still belong to the sentence
# (closing quotes and brackets in both ASCII and typographic forms).
_CLOSERS = "\"'”’»)]}"

# Guard applies only to a single "." terminator: "Mr. Jones" must not split.
# Multi-terminator runs ("...", "?!") always split.
_ABBREVIATIONS = frozenset({
    "mr", "mrs", "ms", "dr", "prof", "st", "mt", "ft", "rev", "sr", "jr",
    "capt", "sgt", "col", "gen", "lt", "cmdr", "maj", "hon", "fr",
    "vs", "etc", "e.g", "i.e", "cf", "al", "inc", "ltd", "co", "corp",
    "vol", "dept", "univ", "est", "approx",
    "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept",
    "oct", "nov", "dec",
})

# Last word before a lone ".": letters, possibly with internal periods (e.g).
_GUARD_WORD = re.compile(r"([A-Za-z]+(?:\.[A-Za-z]+)*)\.$")


@dataclass(frozen=True)
class Sentence:
    """One sentence of a story: surface text plus normalized word tokens."""

    text: str
    index: int
    words: tuple[str, ...] = field(default=())


@dataclass(frozen=True)
class Story:
    id: str
    raw_text: str
    sentences: tuple[Sentence, ...]

    @classmethod
    def from_text(cls, story_id: str, raw_text: str) -> "Story":
        return cls(story_id, raw_text, tuple(split_sentences(raw_text)))


def word_tokens(text: str) -> list[str]:
    """Lowercased words with edge punctuation stripped.

    Internal punctuation survives, so contractions keep their apostrophe:
    "I'm nurse Patkins," -> ["i'm", "nurse", "patkins"]. Chunks that are all
    punctuation vanish.
    """
    out = []
    for chunk in text.lower().split():
        start, end = 0, len(chunk)
        while start < end and not chunk[start].isalnum():
            start += 1
        while end > start and not chunk[end - 1].isalnum():
            end -= 1
        if end > start:
            out.append(chunk[start:end])
    return out


def _guarded(sentence_so_far: str, run_len: int) -> bool:
    if run_len != 1 or not sentence_so_far.endswith("."):
        return False
    m = _GUARD_WORD.search(sentence_so_far)
    return m is not None and m.group(1).lower() in _ABBREVIATIONS


def split_sentences(raw_text: str) -> list[Sentence]:
    """Split raw story text into sentences.

    A boundary is a run of terminator characters (.!?), optionally followed by
    closing quotes/brackets, followed by whitespace or end of text. A single
    period after a known abbreviation does not end the sentence. Trailing text
    with no terminator becomes a final sentence. Whitespace runs inside a
    sentence are collapsed to single spaces; joining the result with single
    spaces preserves every non-whitespace character of the input in order.
    """
    texts: list[str] = []
    buf: list[str] = []

    def flush() -> None:
        text = " ".join("".join(buf).split())
        if text:
            texts.append(text)
        buf.clear()

    i, n = 0, len(raw_text)
    while i < n:
        ch = raw_text[i]
        buf.append(ch)
        if ch not in TERMINATORS:
            i += 1
            continue
        run_len = 1
        j = i + 1
        while j < n and raw_text[j] in TERMINATORS:
            buf.append(raw_text[j])
            run_len += 1
            j += 1
        body_end = "".join(buf)  # before closers, for the guard check
        while j < n and raw_text[j] in _CLOSERS:
            buf.append(raw_text[j])
            j += 1
        at_boundary = j >= n or raw_text[j].isspace()
        if at_boundary and not _guarded(body_end, run_len):
            flush()
        i = j

    flush()
    return [
        Sentence(text=t, index=k, words=tuple(word_tokens(t)))
        for k, t in enumerate(texts)
    ]
