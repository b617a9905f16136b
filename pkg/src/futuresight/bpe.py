"""Byte-level BPE tokenizer with a fixed special-token floor.

Ids 0..4 are reserved control tokens, 5..260 are the raw bytes, merged pieces
start at 261. Plain-text encoding therefore always round-trips (byte fallback)
and never emits a control id.
"""

from __future__ import annotations

import codecs
import json
import re
from pathlib import Path
from typing import Iterable

PAD, BOS, EOS, SEP, AGG = 0, 1, 2, 3, 4
SPECIAL_TOKENS = {"<pad>": PAD, "<bos>": BOS, "<eos>": EOS, "<sep>": SEP, "<agg>": AGG}
N_SPECIALS = 5
BYTE_OFFSET = N_SPECIALS
MIN_VOCAB = N_SPECIALS + 256  # specials + byte floor

TOKENIZER_FORMAT = "futuresight-tokenizer"
TOKENIZER_VERSION = 1

# Words keep their leading whitespace so merges learn " the" style pieces;
# a trailing all-whitespace chunk is its own pretoken. The pretokens are a
# partition of the text, which is what makes the round trip exact.
_PRETOKEN = re.compile(r"\s*\S+|\s+\Z")


class TokenizerError(ValueError):
    pass


class Tokenizer:
    def __init__(self, merges: list[tuple[int, int]]):
        self.merges = [(int(a), int(b)) for a, b in merges]
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._token_bytes: list[bytes] = [b""] * N_SPECIALS
        self._token_bytes += [bytes([b]) for b in range(256)]
        for a, b in self.merges:
            self._token_bytes.append(self._token_bytes[a] + self._token_bytes[b])

    @property
    def vocab_size(self) -> int:
        return len(self._token_bytes)

    def token_bytes(self, token_id: int) -> bytes:
        return self._token_bytes[token_id]

    def _merge_pretoken(self, ids: list[int]) -> list[int]:
        while len(ids) >= 2:
            best_rank, best_pair = None, None
            for pair in zip(ids, ids[1:]):
                rank = self.ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_pair = rank, pair
            if best_pair is None:
                break
            new_id = BYTE_OFFSET + 256 + best_rank
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and (ids[i], ids[i + 1]) == best_pair:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        return ids

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for pretoken in _PRETOKEN.findall(text):
            ids.extend(self._merge_pretoken([BYTE_OFFSET + b for b in pretoken.encode("utf-8")]))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        # Control ids decode to nothing; everything else is a byte sequence.
        dec = codecs.getincrementaldecoder("utf-8")("replace")
        parts = [dec.decode(self._token_bytes[i]) for i in ids]
        parts.append(dec.decode(b"", final=True))
        return "".join(parts)

    def to_dict(self) -> dict:
        return {
            "format": TOKENIZER_FORMAT,
            "version": TOKENIZER_VERSION,
            "vocab_size": self.vocab_size,
            "merges": [list(m) for m in self.merges],
        }

    @classmethod
    def from_dict(cls, doc: dict, where: str = "tokenizer") -> "Tokenizer":
        if doc.get("format") != TOKENIZER_FORMAT:
            raise TokenizerError(f"{where}: not a tokenizer record")
        if doc.get("version") != TOKENIZER_VERSION:
            raise TokenizerError(f"{where}: unsupported tokenizer version {doc.get('version')!r}")
        tok = cls([tuple(m) for m in doc["merges"]])
        if tok.vocab_size != doc["vocab_size"]:
            raise TokenizerError(f"{where}: vocab_size does not match merge table")
        return tok

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")), "utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        doc = json.loads(Path(path).read_text("utf-8"))
        return cls.from_dict(doc, where=str(path))


class StreamingDecoder:
    """Incremental detokenizer whose emitted pieces concatenate to decode().

    Multi-byte characters split across tokens stay buffered until complete,
    so a piece is never retracted.
    """

    def __init__(self, tokenizer: Tokenizer):
        self._tok = tokenizer
        self._dec = codecs.getincrementaldecoder("utf-8")("replace")

    def push(self, token_id: int) -> str:
        return self._dec.decode(self._tok.token_bytes(token_id))

    def flush(self) -> str:
        return self._dec.decode(b"", final=True)


def train_tokenizer(corpus: Iterable[str], vocab_size: int) -> Tokenizer:
    """Learn BPE merges from text. Deterministic for a fixed corpus order.

    Most frequent adjacent pair wins each round; ties break to the smaller id
    pair. Training stops early once no pair occurs at least twice.
    """
    if vocab_size < MIN_VOCAB:
        raise TokenizerError(
            f"vocab_size {vocab_size} is below the floor of {MIN_VOCAB} "
            f"({N_SPECIALS} specials + 256 bytes)"
        )

    pretoken_freq: dict[str, int] = {}
    for text in corpus:
        for pretoken in _PRETOKEN.findall(text):
            pretoken_freq[pretoken] = pretoken_freq.get(pretoken, 0) + 1

    words = [
        ([BYTE_OFFSET + b for b in pt.encode("utf-8")], freq)
        for pt, freq in sorted(pretoken_freq.items())
    ]

    pair_counts: dict[tuple[int, int], int] = {}
    pair_words: dict[tuple[int, int], set[int]] = {}
    for wi, (seq, freq) in enumerate(words):
        for pair in zip(seq, seq[1:]):
            pair_counts[pair] = pair_counts.get(pair, 0) + freq
            pair_words.setdefault(pair, set()).add(wi)

    merges: list[tuple[int, int]] = []
    while MIN_VOCAB + len(merges) < vocab_size and pair_counts:
        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        best_pair = min(p for p, c in pair_counts.items() if c == best_count)
        new_id = MIN_VOCAB + len(merges)
        merges.append(best_pair)

        for wi in sorted(pair_words.get(best_pair, ())):
            seq, freq = words[wi]
            if len(seq) < 2:
                continue
            for pair in zip(seq, seq[1:]):
                pair_counts[pair] -= freq
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
                pair_words[pair].discard(wi)
            out = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == best_pair:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            words[wi] = (out, freq)
            for pair in zip(out, out[1:]):
                pair_counts[pair] = pair_counts.get(pair, 0) + freq
                pair_words.setdefault(pair, set()).add(wi)

    return Tokenizer(merges)
