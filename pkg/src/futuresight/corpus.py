"""Dataset construction: stories in, future-conditioned training examples out.

A story must expose at least context_len + future_window sentences (default
minimum 9 = 5 + 4). The candidate window is the future_window sentences right
after the context; the highest mean-IDF candidate becomes the future and its
1-based offset inside the window becomes the distance.
"""

from __future__ import annotations

import json
import logging
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .bpe import Tokenizer
from .idf import CorpusError, IdfTable, build_idf_table, load_stopwords, select_future
from .segmentation import Story

log = logging.getLogger(__name__)

DATASET_FORMAT = "futuresight-dataset"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    context_len: int = 5
    future_window: int = 4
    min_sentences: int = 9
    vocab_size: int = 2000
    stopwords_path: str | None = None

    def __post_init__(self):
        if self.context_len < 1 or self.future_window < 1:
            raise CorpusError("context_len and future_window must be positive")
        if self.min_sentences < self.context_len + self.future_window:
            raise CorpusError(
                f"min_sentences {self.min_sentences} cannot be smaller than "
                f"context_len + future_window = {self.context_len + self.future_window}"
            )


@dataclass(frozen=True)
class TrainingExample:
    context_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    future_ids: tuple[int, ...]
    future_distance: int


@dataclass
class SkipReport:
    kept: int = 0
    skipped_short: int = 0
    skipped_empty: int = 0
    skipped_unscoreable: int = 0
    lint_flags: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


def lint_text(raw_text: str) -> list[str]:
    """Flag lines that are mostly punctuation or carry combining diacritics.

    Both patterns show up in scraped story dumps (ASCII art, zalgo-style
    obfuscation) and poison sentence statistics. The pipeline only warns.
    """
    warnings = []
    for lineno, line in enumerate(raw_text.splitlines(), start=1):
        visible = [ch for ch in line if not ch.isspace()]
        if not visible:
            continue
        punct = sum(1 for ch in visible if not ch.isalnum())
        if punct / len(visible) > 0.5:
            warnings.append(f"line {lineno}: more than half punctuation")
        if any(unicodedata.combining(ch) for ch in line):
            warnings.append(f"line {lineno}: combining diacritics")
    return warnings


def read_stories(path: str | Path) -> list[Story]:
    """Load stories from a JSONL file (or every *.jsonl in a directory).

    Each record needs "id" and "text" fields.
    """
    p = Path(path)
    files = sorted(p.glob("*.jsonl")) if p.is_dir() else [p]
    if not files:
        raise CorpusError(f"{path}: no story files found")
    stories = []
    for f in files:
        with open(f, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    stories.append(Story.from_text(str(rec["id"]), rec["text"]))
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise CorpusError(f"{f}: line {lineno}: bad story record ({e})") from e
    return stories


def build_examples(
    stories: Iterable[Story],
    config: PipelineConfig,
    tokenizer: Tokenizer,
    table: IdfTable | None = None,
) -> tuple[list[TrainingExample], SkipReport, IdfTable]:
    """Turn stories into training examples.

    The IDF table is built over every sentence of every ingested story
    (including stories later dropped for being too short) unless one is
    passed in. Stories shorter than min_sentences are skipped and counted;
    so are stories whose whole candidate window is unscoreable.
    """
    stories = list(stories)
    if table is None:
        scoreable = [s for s in stories if s.sentences]
        if not scoreable:
            raise CorpusError("no sentences in any input story")
        table = build_idf_table(scoreable, load_stopwords(config.stopwords_path))

    lc, lf = config.context_len, config.future_window
    report = SkipReport()
    examples = []
    for story in stories:
        flags = lint_text(story.raw_text)
        if flags:
            report.lint_flags += len(flags)
            for w in flags:
                log.warning("story %s: %s", story.id, w)
        if not story.sentences:
            report.skipped_empty += 1
            continue
        if len(story.sentences) < config.min_sentences:
            report.skipped_short += 1
            continue
        candidates = story.sentences[lc:lc + lf]
        selection = select_future(candidates, table)
        if selection is None:
            report.skipped_unscoreable += 1
            continue
        context_text = " ".join(s.text for s in story.sentences[:lc])
        target_text = " ".join(s.text for s in candidates)
        examples.append(TrainingExample(
            context_ids=tuple(tokenizer.encode(context_text)),
            target_ids=tuple(tokenizer.encode(target_text)),
            future_ids=tuple(tokenizer.encode(selection.sentence.text)),
            future_distance=selection.distance,
        ))
        report.kept += 1
    return examples, report, table


def write_dataset(examples: Iterable[TrainingExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(
            {"format": DATASET_FORMAT, "version": DATASET_VERSION},
            sort_keys=True, separators=(",", ":"),
        ) + "\n")
        for ex in examples:
            fh.write(json.dumps({
                "context_ids": list(ex.context_ids),
                "target_ids": list(ex.target_ids),
                "future_ids": list(ex.future_ids),
                "future_distance": ex.future_distance,
            }, sort_keys=True, separators=(",", ":")) + "\n")


def read_dataset(path: str | Path) -> list[TrainingExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        try:
            head = json.loads(header)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"{path}: line 1: bad header ({e})") from e
        if head.get("format") != DATASET_FORMAT:
            raise DatasetFormatError(f"{path}: line 1: not a dataset file")
        if head.get("version") != DATASET_VERSION:
            raise DatasetFormatError(
                f"{path}: line 1: unsupported dataset version {head.get('version')!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                examples.append(TrainingExample(
                    context_ids=tuple(int(i) for i in rec["context_ids"]),
                    target_ids=tuple(int(i) for i in rec["target_ids"]),
                    future_ids=tuple(int(i) for i in rec["future_ids"]),
                    future_distance=int(rec["future_distance"]),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetFormatError(f"{path}: line {lineno}: bad example ({e})") from e
    return examples
