"""Command line front door: corpus build, train, generate, eval, serve."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bpe import Tokenizer, train_tokenizer
from .corpus import (PipelineConfig, build_examples, read_dataset,
                     read_stories, write_dataset)
from .evaluation import (build_human_eval_set, conditioning_sensitivity,
                         keyword_report, read_jsonl, realization_score,
                         score_answers, synthetic_stories)
from .generation import SamplingParams, Session
from .idf import load_idf_table, save_idf_table
from .model import ModelConfig, load_inference_model
from .training import TrainConfig, train


def _model_config(arg: str, vocab_size: int | None = None) -> ModelConfig:
    """--model-config takes a JSON file path or an inline JSON object."""
    text = arg.strip()
    if not text.startswith("{"):
        text = Path(arg).read_text(encoding="utf-8")
    doc = json.loads(text)
    if vocab_size is not None:
        doc.setdefault("vocab_size", vocab_size)
    return ModelConfig.from_dict(doc)


def _emit(doc: dict) -> None:
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# --- corpus ------------------------------------------------------------------

def cmd_corpus_build(args) -> int:
    config = PipelineConfig(context_len=args.lc, future_window=args.lf,
                            min_sentences=args.min_sentences,
                            vocab_size=args.vocab,
                            stopwords_path=args.stopwords)
    stories = read_stories(args.input)
    tokenizer = train_tokenizer((s.raw_text for s in stories), args.vocab)
    examples, report, table = build_examples(stories, config, tokenizer)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(examples, out)
    tokenizer.save(out.with_suffix(".tok"))
    save_idf_table(table, out.with_suffix(".idf"))
    _emit({"dataset": str(out), "tokenizer": str(out.with_suffix(".tok")),
           "idf_table": str(out.with_suffix(".idf")),
           "examples": len(examples), **report.as_dict()})
    return 0


# --- training ------------------------------------------------------------------

def cmd_train(args) -> int:
    examples = read_dataset(args.dataset)
    tok_path = args.tokenizer or str(Path(args.dataset).with_suffix(".tok"))
    tokenizer = Tokenizer.load(tok_path)
    model_cfg = _model_config(args.model_config, vocab_size=tokenizer.vocab_size)
    train_cfg = TrainConfig(epochs=args.epochs, lr=args.lr,
                            accum_examples=args.accum, seed=args.seed)

    def progress(stats):
        print(f"epoch {stats.epoch}: loss {stats.mean_loss:.4f} "
              f"({stats.n_tokens} tokens, {stats.wall_s:.1f}s)", flush=True)

    train(examples, model_cfg, train_cfg, tokenizer, args.out,
          dtype=np.float64 if args.f64 else np.float32,
          resume_from=args.resume, on_epoch=progress)
    print(f"checkpoints in {args.out}")
    return 0


# --- generation ------------------------------------------------------------------

def _sampling(args):
    return SamplingParams(temperature=args.temperature, top_k=args.top_k,
                          top_p=args.top_p, max_new_tokens=args.tokens,
                          seed=args.seed, greedy=args.greedy)


def _stream(session, budget: int) -> None:
    emitted = 0
    while emitted < budget:
        res = session.step()
        if res is None:
            break
        sys.stdout.write(res.piece)
        sys.stdout.flush()
        emitted += 1
    sys.stdout.write("\n")
    sys.stdout.flush()


def cmd_generate(args) -> int:
    model = load_inference_model(args.ckpt)
    context = Path(args.context).read_text(encoding="utf-8").strip()
    future = args.future if model.cfg.injection_mode != "none" else None
    session = Session(model, context, future, args.distance, _sampling(args))
    _stream(session, args.tokens)
    if not args.interactive:
        return 0

    print("(:future <distance> <text> swaps, blank line continues, :quit exits)",
          file=sys.stderr)
    while True:
        try:
            line = input("> ").strip()
        except EOFError:
            return 0
        if line == ":quit":
            return 0
        if line.startswith(":future"):
            parts = line.split(maxsplit=2)
            if len(parts) != 3 or not parts[1].isdigit():
                print("usage: :future <distance> <text>", file=sys.stderr)
                continue
            ms = session.set_future(parts[2], int(parts[1]))
            print(f"(recomputed in {ms:.1f} ms)", file=sys.stderr)
            continue
        if line:
            print("unknown command; blank line continues", file=sys.stderr)
            continue
        if session.eos_reached:
            print("(story finished)", file=sys.stderr)
            return 0
        _stream(session, args.tokens)


# --- evaluation ------------------------------------------------------------------

def cmd_eval_sensitivity(args) -> int:
    model = load_inference_model(args.ckpt)
    context = Path(args.context).read_text(encoding="utf-8").strip()
    value = conditioning_sensitivity(model, context,
                                     args.future_a, args.distance_a,
                                     args.future_b, args.distance_b,
                                     n_positions=args.positions)
    _emit({"sensitivity": value})
    return 0


def cmd_eval_realization(args) -> int:
    table = load_idf_table(args.idf)
    text = Path(args.text).read_text(encoding="utf-8")
    _emit({"score": realization_score(text, args.future, table)})
    return 0


def cmd_eval_synthetic(args) -> int:
    model = load_inference_model(args.ckpt)
    stories = synthetic_stories(args.groups, args.per_group)
    report = keyword_report(model, stories, tokens=args.tokens)
    _emit(report.to_dict())
    return 0


def cmd_eval_build_humaneval(args) -> int:
    model = load_inference_model(args.ckpt)
    stories = read_stories(args.stories)
    table = load_idf_table(args.idf)
    items, key = build_human_eval_set(model, stories, table, args.out,
                                      n_items=args.items,
                                      tokens_per_item=args.tokens,
                                      seed=args.seed)
    _emit({"items": str(items), "key": str(key)})
    return 0


def cmd_eval_score_humaneval(args) -> int:
    _emit(score_answers(read_jsonl(args.key), read_jsonl(args.answers)))
    return 0


# --- service ------------------------------------------------------------------

def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    model = load_inference_model(args.ckpt) if args.ckpt else None
    table = load_idf_table(args.idf) if args.idf else None
    host, _, port = args.addr.rpartition(":")
    app = create_app(model, idf_table=table, session_ttl=args.session_ttl,
                     ui_dir=args.ui)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")
    return 0


# --- wiring ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="futuresight")
    sub = p.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="dataset pipeline")
    corpus_sub = corpus.add_subparsers(dest="subcommand", required=True)
    cb = corpus_sub.add_parser("build", help="stories.jsonl -> dataset + tokenizer + idf")
    cb.add_argument("--input", required=True, help="story file or directory of *.jsonl")
    cb.add_argument("--out", required=True, help="dataset path (.fsd)")
    cb.add_argument("--lc", type=int, default=5, help="context sentences")
    cb.add_argument("--lf", type=int, default=4, help="future window sentences")
    cb.add_argument("--min-sentences", type=int, default=9)
    cb.add_argument("--vocab", type=int, default=2000)
    cb.add_argument("--stopwords", default=None, help="stopword file (default: bundled)")
    cb.set_defaults(func=cmd_corpus_build)

    tr = sub.add_parser("train", help="reconstruction training")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--model-config", required=True,
                    help="JSON file or inline JSON; vocab_size defaults to the tokenizer's")
    tr.add_argument("--out", required=True, help="checkpoint directory")
    tr.add_argument("--tokenizer", default=None,
                    help="tokenizer file (default: dataset path with .tok)")
    tr.add_argument("--epochs", type=int, default=5)
    tr.add_argument("--accum", type=int, default=16)
    tr.add_argument("--lr", type=float, default=3e-4)
    tr.add_argument("--seed", type=int, default=7)
    tr.add_argument("--resume", default=None, help="checkpoint to continue from")
    tr.add_argument("--f64", action="store_true", help="train in 64-bit")
    tr.set_defaults(func=cmd_train)

    ge = sub.add_parser("generate", help="sample a continuation")
    ge.add_argument("--ckpt", required=True)
    ge.add_argument("--context", required=True, help="file holding the story so far")
    ge.add_argument("--future", default=None, help="future plot event text")
    ge.add_argument("--distance", type=int, default=1)
    ge.add_argument("--tokens", type=int, default=200)
    ge.add_argument("--seed", type=int, default=7)
    ge.add_argument("--greedy", action="store_true")
    ge.add_argument("--temperature", type=float, default=0.9)
    ge.add_argument("--top-k", type=int, default=40)
    ge.add_argument("--top-p", type=float, default=0.95)
    ge.add_argument("--interactive", action="store_true",
                    help="REPL: blank line continues, :future <d> <text> swaps")
    ge.set_defaults(func=cmd_generate)

    ev = sub.add_parser("eval", help="diagnostics")
    ev_sub = ev.add_subparsers(dest="subcommand", required=True)

    se = ev_sub.add_parser("sensitivity", help="distribution shift between two futures")
    se.add_argument("--ckpt", required=True)
    se.add_argument("--context", required=True, help="context file")
    se.add_argument("--future-a", required=True)
    se.add_argument("--distance-a", type=int, default=1)
    se.add_argument("--future-b", required=True)
    se.add_argument("--distance-b", type=int, default=1)
    se.add_argument("--positions", type=int, default=32)
    se.set_defaults(func=cmd_eval_sensitivity)

    re_ = ev_sub.add_parser("realization", help="IDF-weighted future overlap")
    re_.add_argument("--text", required=True, help="generated text file")
    re_.add_argument("--future", required=True)
    re_.add_argument("--idf", required=True, help="IDF table file")
    re_.set_defaults(func=cmd_eval_realization)

    sy = ev_sub.add_parser("synthetic", help="matched/mismatched keyword probe")
    sy.add_argument("--ckpt", required=True)
    sy.add_argument("--tokens", type=int, default=60)
    sy.add_argument("--groups", type=int, default=20)
    sy.add_argument("--per-group", type=int, default=10)
    sy.set_defaults(func=cmd_eval_synthetic)

    bh = ev_sub.add_parser("build-humaneval", help="blinded items + key files")
    bh.add_argument("--ckpt", required=True)
    bh.add_argument("--stories", required=True)
    bh.add_argument("--idf", required=True)
    bh.add_argument("--out", required=True)
    bh.add_argument("--items", type=int, default=30)
    bh.add_argument("--tokens", type=int, default=48)
    bh.add_argument("--seed", type=int, default=0)
    bh.set_defaults(func=cmd_eval_build_humaneval)

    sc = ev_sub.add_parser("score-humaneval", help="score answer file against key")
    sc.add_argument("--key", required=True)
    sc.add_argument("--answers", required=True)
    sc.set_defaults(func=cmd_eval_score_humaneval)

    sv = sub.add_parser("serve", help="HTTP service")
    sv.add_argument("--ckpt", default=None, help="checkpoint (omit for a stub server)")
    sv.add_argument("--idf", default=None, help="IDF table for /v1/score/realization")
    sv.add_argument("--addr", default="127.0.0.1:8080")
    sv.add_argument("--session-ttl", type=float, default=1800.0)
    sv.add_argument("--ui", default=None, help="static directory served at /")
    sv.set_defaults(func=cmd_serve)

    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
