"""Inverse document frequency over sentence-documents, and future nomination.

Every sentence of every ingested story counts as one document, contexts
included: a term that saturates the contexts is exactly as uninteresting in a
candidate future as one that saturates the futures.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .segmentation import Sentence, Story

IDF_FORMAT = "futuresight-idf"
IDF_VERSION = 1


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class IdfTable:
    """Document frequencies over sentence-documents plus the stopword set."""

    doc_count: int
    df: dict[str, int]
    stopwords: frozenset[str]


@dataclass(frozen=True)
class FutureSelection:
    sentence: Sentence
    distance: int  # 1-based offset of the pick within the candidate window
    score: float


def load_stopwords(path: str | Path | None = None) -> frozenset[str]:
    """Read a plain-text stopword list (one word per line, '#' comments)."""
    if path is None:
        text = resources.files("futuresight").joinpath("data/stopwords.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    words = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line.lower())
    return frozenset(words)


def build_idf_table(stories: Iterable[Story], stopwords: frozenset[str]) -> IdfTable:
    df: dict[str, int] = {}
    doc_count = 0
    for story in stories:
        for sentence in story.sentences:
            doc_count += 1
            for term in set(sentence.words):
                df[term] = df.get(term, 0) + 1
    if doc_count == 0:
        raise CorpusError("cannot build an IDF table from zero sentences")
    return IdfTable(doc_count=doc_count, df=df, stopwords=stopwords)


def idf(term: str, table: IdfTable) -> float:
    """log(N / (1 + df)), natural log; unseen terms have df = 0."""
    return math.log(table.doc_count / (1 + table.df.get(term, 0)))


def mean_idf(sentence: Sentence, table: IdfTable) -> float | None:
    """Mean IDF over non-stopword words; None when nothing is scoreable."""
    terms = [w for w in sentence.words if w not in table.stopwords]
    if not terms:
        return None
    return sum(idf(t, table) for t in terms) / len(terms)


def _argmax_scored(scores: Sequence[float | None]) -> int | None:
    """Index of the highest score; ties resolve to the smaller index."""
    best_i = None
    best = -math.inf
    for i, s in enumerate(scores):
        if s is not None and s > best:
            best, best_i = s, i
    return best_i


def select_future(candidates: Sequence[Sentence], table: IdfTable) -> FutureSelection | None:
    """Pick the most informative candidate sentence.

    Returns None when every candidate is unscoreable (the caller skips the
    story). Distance is the 1-based position of the pick inside `candidates`.
    """
    if not candidates:
        raise CorpusError("select_future needs a non-empty candidate window")
    scores = [mean_idf(c, table) for c in candidates]
    i = _argmax_scored(scores)
    if i is None:
        return None
    return FutureSelection(sentence=candidates[i], distance=i + 1, score=scores[i])


def save_idf_table(table: IdfTable, path: str | Path) -> None:
    doc = {
        "format": IDF_FORMAT,
        "version": IDF_VERSION,
        "doc_count": table.doc_count,
        "df": table.df,
        "stopwords": sorted(table.stopwords),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")), "utf-8")


def load_idf_table(path: str | Path) -> IdfTable:
    doc = json.loads(Path(path).read_text("utf-8"))
    if doc.get("format") != IDF_FORMAT:
        raise CorpusError(f"{path}: not an IDF table file")
    if doc.get("version") != IDF_VERSION:
        raise CorpusError(f"{path}: unsupported IDF table version {doc.get('version')!r}")
    return IdfTable(
        doc_count=int(doc["doc_count"]),
        df={str(k): int(v) for k, v in doc["df"].items()},
        stopwords=frozenset(doc["stopwords"]),
    )
