"""Diagnostics: does the stated future actually steer the decoder.

Three instruments. conditioning_sensitivity measures, in distribution space,
how far two futures pull the same continuation apart. realization_score asks
whether a continuation surfaced the rare content of the future. The human
evaluation kit packages blinded continuations (true future / fixed decoy /
unconditioned) with a key file and a scorer. synthetic_stories builds the
controlled corpus where the only signal separating stories is the future
itself.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .bpe import BOS, EOS
from .idf import IdfTable, idf, select_future
from .model import MEMORY, InferenceModel
from .segmentation import Story, split_sentences, word_tokens

# the fixed decoy future used for the second human-eval arm
DECOY_FUTURE = "The swamp creatures were relentless in their siege."

CLASS_TRUE, CLASS_DECOY, CLASS_UNCONDITIONED = 1, 2, 3


# ---------------------------------------------------------------------------
# distribution-space sensitivity

def _greedy_ids(model: InferenceModel, prefix_ids: list[int],
                cond, budget: int) -> list[int]:
    state = model.prime(prefix_ids, cond)
    out: list[int] = []
    for _ in range(budget):
        if state.length >= model.cfg.max_seq:
            break
        token = int(np.argmax(state.last_logits))
        if token == EOS:
            break
        model.step(state, token)
        out.append(token)
    return out


def _tvd(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(p - q).sum(axis=-1)


def _directional(model, ctx_ids, cond_gen, cond_alt, n_positions):
    """Greedy continuation under cond_gen, then the mean total-variation
    distance between the two conditionings over its next-token rows."""
    seq = _greedy_ids(model, ctx_ids, cond_gen, n_positions)
    ids = ctx_ids + seq
    rows = slice(len(ctx_ids) - 1, len(ctx_ids) - 1 + min(n_positions, len(seq) + 1))
    p = T.softmax_np(model.full_logits(ids, cond_gen)[rows])
    q = T.softmax_np(model.full_logits(ids, cond_alt)[rows])
    return float(_tvd(p, q).mean())


def conditioning_sensitivity(model: InferenceModel, context_text: str,
                             future_a: str, distance_a: int,
                             future_b: str, distance_b: int,
                             n_positions: int = 32) -> float:
    """Symmetrized: each future generates a continuation, both futures score
    it, and the two directional means are averaged. 0 means the futures are
    indistinguishable to the decoder; 1 is maximal disagreement."""
    ctx_ids = [BOS] + model.tokenizer.encode(context_text)
    cond_a = model.conditioning(model.tokenizer.encode(future_a), distance_a)
    cond_b = model.conditioning(model.tokenizer.encode(future_b), distance_b)
    ab = _directional(model, ctx_ids, cond_a, cond_b, n_positions)
    ba = _directional(model, ctx_ids, cond_b, cond_a, n_positions)
    return (ab + ba) / 2.0


# ---------------------------------------------------------------------------
# lexical realization

def realization_score(text: str, future_text: str, table: IdfTable) -> float | None:
    """Max over sentences of the idf-weighted future-word overlap, in [0, 1].

    Weights clamp at zero (a word in every document carries nothing) and a
    future with no scoreable weight returns None rather than 0: unratable,
    not unrealized.
    """
    future_words = {w for w in word_tokens(future_text) if w not in table.stopwords}
    weights = {w: max(idf(w, table), 0.0) for w in future_words}
    denom = sum(weights.values())
    if denom <= 0:
        return None
    best = 0.0
    for sentence in split_sentences(text):
        present = future_words & set(sentence.words)
        best = max(best, sum(weights[w] for w in present) / denom)
    return min(1.0, max(0.0, best))


# ---------------------------------------------------------------------------
# human evaluation kit

@dataclass
class HumanEvalItem:
    item_id: str
    context: str
    continuation: str


def _context_and_candidates(story: Story, context_len: int, future_window: int):
    if len(story.sentences) < context_len + future_window:
        return None
    context = " ".join(s.text for s in story.sentences[:context_len])
    window = story.sentences[context_len:context_len + future_window]
    return context, window


def build_human_eval_set(model: InferenceModel, stories: Sequence[Story],
                         table: IdfTable, out_dir: str | Path, *,
                         context_len: int = 5, future_window: int = 4,
                         n_items: int = 30, tokens_per_item: int = 48,
                         seed: int = 0) -> tuple[Path, Path]:
    """Write items.jsonl (blinded) and key.jsonl under out_dir.

    Classes are balanced: each selected story contributes one continuation
    conditioned on its true nominated future, one on the fixed decoy, or one
    with no conditioning at all. Item ids are assigned after shuffling, so
    neither file order nor id leaks the class.
    """
    if model.cfg.injection_mode != MEMORY:
        raise ValueError("the human evaluation kit needs a memory-conditioned model")
    if n_items % 3:
        raise ValueError("n_items must be divisible by 3 to balance the classes")
    usable = []
    for story in stories:
        pair = _context_and_candidates(story, context_len, future_window)
        if pair is None:
            continue
        selection = select_future(pair[1], table)
        if selection is None:
            continue
        usable.append((story, pair[0], selection))
    if len(usable) < n_items:
        raise ValueError(f"only {len(usable)} usable stories for {n_items} items")

    rng = T.Rng([seed, 1811])
    order = rng.permutation(len(usable))[:n_items]
    classes = [CLASS_TRUE, CLASS_DECOY, CLASS_UNCONDITIONED] * (n_items // 3)

    rows = []
    for pick, cls in zip(order, classes):
        story, context, selection = usable[int(pick)]
        if cls == CLASS_TRUE:
            future, distance = selection.sentence.text, selection.distance
        elif cls == CLASS_DECOY:
            future, distance = DECOY_FUTURE, selection.distance
        else:
            future, distance = None, selection.distance
        cond = None
        if future is not None:
            cond = model.conditioning(model.tokenizer.encode(future), distance)
        ids = _greedy_ids(model, [BOS] + model.tokenizer.encode(context),
                          cond, tokens_per_item)
        rows.append({
            "story_id": story.id, "class": cls, "context": context,
            "continuation": model.tokenizer.decode(ids),
            "future": future, "distance": distance,
        })

    # blind pass: shuffle presentation order, then hand out sequential ids
    present = rng.permutation(len(rows))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items_path = out_dir / "items.jsonl"
    key_path = out_dir / "key.jsonl"
    with open(items_path, "w", encoding="utf-8") as fi, \
            open(key_path, "w", encoding="utf-8") as fk:
        for n, idx in enumerate(present):
            row = rows[int(idx)]
            item_id = f"item-{n + 1:03d}"
            fi.write(json.dumps({"item_id": item_id, "context": row["context"],
                                 "continuation": row["continuation"]},
                                sort_keys=True) + "\n")
            fk.write(json.dumps({"item_id": item_id, "class": row["class"],
                                 "story_id": row["story_id"],
                                 "future": row["future"],
                                 "distance": row["distance"]},
                                sort_keys=True) + "\n")
    return items_path, key_path


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


def score_answers(key: Sequence[dict], answers: Sequence[dict]) -> dict:
    """Rater accuracy against the key.

    Per class: one-vs-rest accuracy plus precision/recall/F1 (0.0 where the
    denominator is empty). The macro row carries the plain multiclass
    accuracy and unweighted means of the per-class P/R/F1. std is the
    population deviation (ddof=0) of the row's correctness indicator.
    """
    truth = {r["item_id"]: int(r["class"]) for r in key}
    guess = {r["item_id"]: int(r["class"]) for r in answers}
    if len(truth) != len(key):
        raise ValueError("key has duplicate item ids")
    if set(truth) != set(guess):
        missing = sorted(set(truth) ^ set(guess))[:4]
        raise ValueError(f"answers do not match the key near {missing}")
    items = sorted(truth)
    y = np.array([truth[i] for i in items])
    g = np.array([guess[i] for i in items])

    def rate(num, den):
        return float(num / den) if den else 0.0

    per_class = {}
    for cls in sorted(set(truth.values())):
        ty, tg = y == cls, g == cls
        tp = int((ty & tg).sum())
        fp = int((~ty & tg).sum())
        fn = int((ty & ~tg).sum())
        correct = (ty == tg).astype(float)
        precision = rate(tp, tp + fp)
        recall = rate(tp, tp + fn)
        f1 = rate(2 * precision * recall, precision + recall)
        per_class[cls] = {
            "accuracy": float(correct.mean()),
            "precision": precision, "recall": recall, "f1": f1,
            "std": float(np.std(correct)),
            "support": int(ty.sum()),
        }
    overall = (y == g).astype(float)
    macro = {
        "accuracy": float(overall.mean()),
        "precision": float(np.mean([m["precision"] for m in per_class.values()])),
        "recall": float(np.mean([m["recall"] for m in per_class.values()])),
        "f1": float(np.mean([m["f1"] for m in per_class.values()])),
        "std": float(np.std(overall)),
        "support": len(items),
    }
    return {"per_class": per_class, "macro": macro, "n_items": len(items)}


# ---------------------------------------------------------------------------
# synthetic conditioning corpus

_PREFIXES = ["bal", "cor", "dev", "fen", "gri", "hol", "jas", "kel", "lum",
             "mar", "nor", "pol", "quin", "ras", "sol", "tor", "ul", "ven",
             "wex", "yor"]
_SUFFIXES = ["band", "crest", "dorn", "fall", "gate", "holm", "lock", "mere",
             "pike", "rook"]
_PLACES = ["harbor", "market", "station", "bridge", "garden", "tower",
           "mill", "square"]
_ACTORS = ["traveler", "merchant", "watchman", "ferryman", "clerk", "baker",
           "smith", "teacher", "courier", "fiddler", "weaver", "gardener",
           "porter", "sailor", "shepherd", "printer", "tailor", "cooper",
           "glazier", "carter"]
_SCENES = ["village", "harbor town", "valley", "crossing", "quarter",
           "settlement", "district", "hamlet", "port", "township"]

_CONTEXT_FRAMES = [
    "The {actor} waited near the old wall.",
    "A cold wind moved through the {scene}.",
    "People spoke quietly about the {actor}.",
    "Nothing in the {scene} seemed out of place.",
    "Evening came slowly and the lamps burned low.",
]

_FILLERS = [
    "The road stayed quiet for a long stretch.",
    "Clouds drifted past without any hurry.",
    "Somebody lit a lamp in a far window.",
]


@dataclass(frozen=True)
class SyntheticStory:
    id: str
    group: int
    context_text: str
    window: tuple[str, ...]   # the candidate sentences, keyword one included
    keyword: str
    place: str
    distance: int

    @property
    def future_sentence(self) -> str:
        return self.window[self.distance - 1]

    @property
    def text(self) -> str:
        return self.context_text + " " + " ".join(self.window)


def synthetic_stories(n_groups: int = 20, per_group: int = 10) -> list[SyntheticStory]:
    """Controlled corpus: every story in a group shares the same five-sentence
    context, so only the injected future can tell the model which unique
    keyword its continuation owes. The keyword sentence sits at a distance
    that cycles 1..4 and every other window slot is a corpus-wide filler."""
    if n_groups > len(_PREFIXES) or per_group > len(_SUFFIXES):
        raise ValueError(f"at most {len(_PREFIXES)} groups of {len(_SUFFIXES)}")
    stories = []
    for group in range(n_groups):
        context = " ".join(
            frame.format(actor=_ACTORS[group % len(_ACTORS)],
                         scene=_SCENES[group % len(_SCENES)])
            for frame in _CONTEXT_FRAMES)
        for j in range(per_group):
            keyword = _PREFIXES[group] + _SUFFIXES[j]
            place = _PLACES[(group + j) % len(_PLACES)]
            distance = (j % 4) + 1
            window = list(_FILLERS)
            window.insert(distance - 1,
                          f"Then the {keyword} arrived at the {place}.")
            stories.append(SyntheticStory(
                id=f"syn-{group:02d}-{j:02d}", group=group,
                context_text=context, window=tuple(window),
                keyword=keyword, place=place, distance=distance))
    return stories


def synthetic_records(stories: Iterable[SyntheticStory]) -> list[dict]:
    """Story records in the corpus pipeline's input shape."""
    return [{"id": s.id, "text": s.text} for s in stories]


@dataclass
class ConditioningReport:
    n: int
    matched_hits: int
    mismatched_hits: int

    @property
    def matched_rate(self) -> float:
        return self.matched_hits / self.n

    @property
    def mismatched_rate(self) -> float:
        return self.mismatched_hits / self.n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["matched_rate"] = self.matched_rate
        d["mismatched_rate"] = self.mismatched_rate
        return d


def _keyword_within(text: str, keyword: str, n_sentences: int) -> bool:
    window = split_sentences(text)[:n_sentences]
    return any(keyword in s.words for s in window)


def keyword_report(model: InferenceModel, stories: Sequence[SyntheticStory], *,
                   tokens: int = 80, pair_offset: int | None = None) -> ConditioningReport:
    """The paired conditioning probe. Matched arm: generate from story i's
    context under story i's future and look for keyword i within the first
    distance-many sentences. Mismatched arm: same context and the same
    keyword-i probe, but conditioned on story j's future; keyword i appearing
    anyway would mean the context, not the future, carries the signal.

    The default partner is j = i + n/2 + 1 mod n. The +1 matters: with the
    group-major suite, an offset that is a multiple of per_group pairs
    stories whose keywords share a suffix, and a model that composes the
    prefix from context and the suffix from memory would "hit" on those
    mismatched pairs even though the conditioning works."""
    n = len(stories)
    if n < 2:
        raise ValueError("need at least two stories to pair")
    offset = pair_offset if pair_offset is not None else n // 2 + 1
    if offset % n == 0:
        offset = 1
    matched = mismatched = 0
    for i, story in enumerate(stories):
        ctx_ids = [BOS] + model.tokenizer.encode(story.context_text)
        partner = stories[(i + offset) % n]

        cond = model.conditioning(
            model.tokenizer.encode(story.future_sentence), story.distance)
        text = model.tokenizer.decode(_greedy_ids(model, ctx_ids, cond, tokens))
        if _keyword_within(text, story.keyword, story.distance):
            matched += 1

        cond = model.conditioning(
            model.tokenizer.encode(partner.future_sentence), partner.distance)
        text = model.tokenizer.decode(_greedy_ids(model, ctx_ids, cond, tokens))
        if _keyword_within(text, story.keyword, story.distance):
            mismatched += 1
    return ConditioningReport(n=n, matched_hits=matched, mismatched_hits=mismatched)
