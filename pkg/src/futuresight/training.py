"""Reconstruction training.

One example is one optimizer-visible unit: the decoder reads
[BOS] + context + target and cross-entropy is charged only on the rows that
predict target tokens, so the context is free conditioning. Losses are
normalized per token across the whole accumulation group, which makes k
examples accumulated one at a time equal to the same k examples in a single
fused step.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .bpe import BOS, Tokenizer
from .corpus import TrainingExample
from .model import (
    EMBEDDING,
    MEMORY,
    ModelConfig,
    NONE,
    build_store,
    decoder_forward,
    encode_future,
    init_params,
    load_checkpoint,
    model_arrays,
    project_future,
    save_checkpoint,
)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    lr: float = 3e-4
    warmup_steps: int = 100
    clip_norm: float = 1.0
    accum_examples: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.accum_examples < 1:
            raise ValueError("epochs must be >= 0 and accum_examples >= 1")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def decoder_inputs(example: TrainingExample) -> tuple[list[int], list[int], int]:
    """(full input ids, target ids, first scored row).

    Logits row i predicts input position i+1, so the rows scoring the target
    span start at len(context) (the row fed by the last context token).
    """
    full = [BOS] + list(example.context_ids) + list(example.target_ids)
    return full, list(example.target_ids), len(example.context_ids)


def _conditioning(example: TrainingExample, params: T.ParamStore,
                  cfg: ModelConfig, tokenizer: Tokenizer):
    if cfg.injection_mode == NONE:
        return None
    emb = encode_future(example.future_ids, example.future_distance,
                        params, cfg, tokenizer)
    if cfg.injection_mode == EMBEDDING:
        return emb
    return project_future(emb, params, cfg)


def example_loss(example: TrainingExample, params: T.ParamStore, cfg: ModelConfig,
                 tokenizer: Tokenizer) -> tuple[T.Tensor, int]:
    """Summed cross-entropy over the target rows, plus the token count."""
    full, targets, first_row = decoder_inputs(example)
    cond = _conditioning(example, params, cfg, tokenizer)
    logits = decoder_forward(full, cond, params, cfg)
    lp = T.log_softmax(T.rows(logits, first_row, first_row + len(targets)))
    picked = T.take_lastdim(lp, targets)
    return T.scale(T.sum_all(picked), -1.0), len(targets)


def mean_loss(examples: Sequence[TrainingExample], params: T.ParamStore,
              cfg: ModelConfig, tokenizer: Tokenizer) -> float:
    total, count = 0.0, 0
    for ex in examples:
        loss, n = example_loss(ex, params, cfg, tokenizer)
        total += float(loss.data)
        count += n
    if count == 0:
        raise TrainingError("mean_loss: no target tokens")
    return total / count


class Adam:
    """Adam with linear warmup; moments live next to the parameters."""

    def __init__(self, store: T.ParamStore, cfg: TrainConfig):
        self.store = store
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def lr_at(self, t: int) -> float:
        warm = self.cfg.warmup_steps
        scale = min(1.0, t / warm) if warm > 0 else 1.0
        return self.cfg.lr * scale

    def step(self) -> float:
        self.t += 1
        lr = self.lr_at(self.t)
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.store.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for name in self.m:
            mk, vk = f"opt.m.{name}", f"opt.v.{name}"
            if mk not in arrays or vk not in arrays:
                raise TrainingError(f"checkpoint has no optimizer state for {name}")
            self.m[name][...] = arrays[mk]
            self.v[name][...] = arrays[vk]
        self.t = t


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    n_examples: int
    n_tokens: int
    grad_steps: int
    wall_s: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _chunked(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def train(examples: Sequence[TrainingExample], model_cfg: ModelConfig,
          train_cfg: TrainConfig, tokenizer: Tokenizer, out_dir: str | Path,
          dtype=np.float32, resume_from: str | Path | None = None,
          on_epoch: Callable[[EpochStats], None] | None = None) -> list[EpochStats]:
    """Run reconstruction training, checkpointing after every epoch.

    Epoch k visits the examples in the order drawn from Rng([seed, k]), so a
    run resumed from the epoch-k checkpoint continues bit-identically to one
    that never stopped. out_dir gets epoch_NNN.fsck files, a model.fsck copy
    of the newest one, and metrics.jsonl with one record per optimizer step:
    {"epoch", "step", "loss", "grad_norm", "lr", "n_tokens"} where loss is the
    per-token cross entropy of that step's accumulation group and step is the
    global optimizer-update count.
    """
    if not examples:
        raise TrainingError("train: empty example list")
    if tokenizer.vocab_size != model_cfg.vocab_size:
        raise TrainingError(
            f"tokenizer vocab {tokenizer.vocab_size} != model vocab {model_cfg.vocab_size}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from, expected_config=model_cfg)
        store = build_store(model_cfg, model_arrays(ck))
        opt = Adam(store, train_cfg)
        opt.load_state(ck.arrays, int(ck.meta.get("adam_t", 0)))
        start_epoch = int(ck.meta.get("epoch", 0))
    else:
        store = init_params(model_cfg, dtype=dtype)
        opt = Adam(store, train_cfg)

    history: list[EpochStats] = []
    for epoch in range(start_epoch, train_cfg.epochs):
        t0 = time.monotonic()
        order = T.Rng([train_cfg.seed, epoch]).permutation(len(examples))
        epoch_ce, epoch_tokens = 0.0, 0
        step_log: list[dict] = []
        for group in _chunked(order, train_cfg.accum_examples):
            store.zero_grad()
            group_ce, group_tokens = 0.0, 0
            for idx in group:
                loss, n = example_loss(examples[int(idx)], store, model_cfg, tokenizer)
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, example {int(idx)}")
                T.backward(loss)
                group_tokens += n
                group_ce += float(loss.data)
            for _, p in store.items():
                p.grad /= group_tokens
            norm = store.clip_grad_norm(train_cfg.clip_norm)
            lr = opt.step()
            epoch_ce += group_ce
            epoch_tokens += group_tokens
            step_log.append({"epoch": epoch + 1, "step": opt.t,
                             "loss": group_ce / group_tokens,
                             "grad_norm": float(norm), "lr": lr,
                             "n_tokens": group_tokens})
        stats = EpochStats(
            epoch=epoch + 1,
            mean_loss=epoch_ce / epoch_tokens,
            n_examples=len(examples),
            n_tokens=epoch_tokens,
            grad_steps=len(step_log),
            wall_s=time.monotonic() - t0,
        )
        history.append(stats)
        _write_epoch(out_dir, stats, model_cfg, train_cfg, store, opt,
                     tokenizer, step_log)
        if on_epoch is not None:
            on_epoch(stats)
    return history


def _write_epoch(out_dir: Path, stats: EpochStats, model_cfg: ModelConfig,
                 train_cfg: TrainConfig, store: T.ParamStore, opt: Adam,
                 tokenizer: Tokenizer, step_log: list[dict]) -> None:
    arrays = dict(store.state_arrays())
    arrays.update(opt.state_arrays())
    meta = {
        "tokenizer": tokenizer.to_dict(),
        "epoch": stats.epoch,
        "adam_t": opt.t,
        "train_config": train_cfg.to_dict(),
        "mean_loss": stats.mean_loss,
    }
    path = out_dir / f"epoch_{stats.epoch:03d}.fsck"
    save_checkpoint(path, model_cfg, arrays, meta=meta)
    save_checkpoint(out_dir / "model.fsck", model_cfg, arrays, meta=meta)
    with open(out_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
        for record in step_log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
