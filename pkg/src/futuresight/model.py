"""Future-conditioned encoder/decoder model.

The encoder reads [AGG] <distance digits> [SEP] <future tokens> bidirectionally
and its position-0 state becomes the future embedding. One affine + gelu maps
that embedding to a per-layer stack of memory vectors. Each decoder layer runs
its own K/V projections over its memory vector and prepends the result as an
extra attendable slot: every query position may attend it, token-to-token
attention stays strictly causal, and the slot has no position and produces no
output row.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .bpe import AGG, SEP, Tokenizer

MEMORY, EMBEDDING, NONE = "memory", "embedding", "none"
INJECTION_MODES = (MEMORY, EMBEDDING, NONE)

CKPT_MAGIC = b"FSCK"
CKPT_VERSION = 1
_DTYPE_CODES = {0: "<f8", 1: "<f4"}
_DTYPE_BY_KIND = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    d_enc: int = 128
    n_heads: int = 4
    n_layers_dec: int = 4
    n_layers_enc: int = 2
    d_ff: int = 512
    max_seq: int = 512
    injection_mode: str = MEMORY
    seed: int = 0

    def __post_init__(self):
        if self.injection_mode not in INJECTION_MODES:
            raise ModelError(f"unknown injection_mode {self.injection_mode!r}")
        if self.vocab_size < 1:
            raise ModelError("vocab_size must be positive")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.injection_mode != NONE and self.d_enc % self.n_heads:
            raise ModelError(f"d_enc {self.d_enc} not divisible by {self.n_heads} heads")
        if min(self.n_layers_dec, self.n_layers_enc, self.d_ff, self.max_seq) < 1:
            raise ModelError("layer counts, d_ff and max_seq must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ModelError(f"unknown config fields {sorted(extra)}")
        return cls(**d)


@dataclass
class FutureEmbedding:
    """Position-0 encoder state for one (future, distance) pair."""

    vector: T.Tensor  # (1, d_enc)
    distance: int


@dataclass
class FutureMemory:
    """Per-layer conditioning vectors, one row per decoder layer."""

    vectors: T.Tensor  # (n_layers_dec, d_model)
    distance: int


def _layer_specs(prefix: str, d: int, d_ff: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.ln1.g", (d,)), (f"{prefix}.ln1.b", (d,)),
        (f"{prefix}.attn.wq", (d, d)), (f"{prefix}.attn.bq", (d,)),
        (f"{prefix}.attn.wk", (d, d)), (f"{prefix}.attn.bk", (d,)),
        (f"{prefix}.attn.wv", (d, d)), (f"{prefix}.attn.bv", (d,)),
        (f"{prefix}.attn.wo", (d, d)), (f"{prefix}.attn.bo", (d,)),
        (f"{prefix}.ln2.g", (d,)), (f"{prefix}.ln2.b", (d,)),
        (f"{prefix}.mlp.w1", (d, d_ff)), (f"{prefix}.mlp.b1", (d_ff,)),
        (f"{prefix}.mlp.w2", (d_ff, d)), (f"{prefix}.mlp.b2", (d,)),
    ]


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Name and shape of every parameter, in creation order."""
    specs: list[tuple[str, tuple[int, ...]]] = []
    if cfg.injection_mode != NONE:
        specs += [("enc.tok", (cfg.vocab_size, cfg.d_enc)),
                  ("enc.pos", (cfg.max_seq, cfg.d_enc))]
        for i in range(cfg.n_layers_enc):
            specs += _layer_specs(f"enc.l{i}", cfg.d_enc, cfg.d_ff)
        specs += [("enc.lnf.g", (cfg.d_enc,)), ("enc.lnf.b", (cfg.d_enc,))]
    if cfg.injection_mode == MEMORY:
        specs += [("proj.w", (cfg.d_enc, cfg.n_layers_dec * cfg.d_model)),
                  ("proj.b", (cfg.n_layers_dec * cfg.d_model,))]
    if cfg.injection_mode == EMBEDDING:
        specs += [("inj.w", (cfg.d_model + cfg.d_enc, cfg.d_model)),
                  ("inj.b", (cfg.d_model,))]
    specs += [("dec.tok", (cfg.vocab_size, cfg.d_model)),
              ("dec.pos", (cfg.max_seq, cfg.d_model))]
    for i in range(cfg.n_layers_dec):
        specs += _layer_specs(f"dec.l{i}", cfg.d_model, cfg.d_ff)
    specs += [("dec.lnf.g", (cfg.d_model,)), ("dec.lnf.b", (cfg.d_model,)),
              ("out.w", (cfg.d_model, cfg.vocab_size)), ("out.b", (cfg.vocab_size,))]
    return specs


_INIT_STD = 0.02


def init_params(cfg: ModelConfig, dtype=np.float32) -> T.ParamStore:
    """Fresh parameters: N(0, 0.02) weights, zero biases, unit norm gains."""
    rng = T.Rng(cfg.seed)
    store = T.ParamStore()
    for name, shape in param_specs(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape, dtype=dtype)
        elif leaf.startswith("b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = rng.normal(shape, std=_INIT_STD, dtype=dtype)
        store.add(name, data)
    return store


# ---------------------------------------------------------------------------
# autodiff forward

def _heads(x: T.Tensor, n_heads: int) -> T.Tensor:
    t, d = x.shape
    return T.transpose(T.reshape(x, (t, n_heads, d // n_heads)), (1, 0, 2))


def _attention(x: T.Tensor, p: T.ParamStore, prefix: str, n_heads: int,
               allowed: np.ndarray | None, memory_row: T.Tensor | None) -> T.Tensor:
    t_len, d = x.shape
    q = T.add(T.matmul(x, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
    k = T.add(T.matmul(x, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
    v = T.add(T.matmul(x, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
    if memory_row is not None:
        # The memory slot runs through this layer's own K/V maps and carries
        # no positional term.
        k_m = T.add(T.matmul(memory_row, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
        v_m = T.add(T.matmul(memory_row, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
        k = T.concat([k_m, k], axis=0)
        v = T.concat([v_m, v], axis=0)
    qh = _heads(q, n_heads)                                   # (h, T, dh)
    kh = T.transpose(_heads(k, n_heads), (0, 2, 1))           # (h, dh, S)
    vh = _heads(v, n_heads)                                   # (h, S, dh)
    scores = T.scale(T.matmul(qh, kh), 1.0 / np.sqrt(d // n_heads))
    att = T.softmax(scores) if allowed is None else T.masked_softmax(scores, allowed)
    mixed = T.matmul(att, vh)                                 # (h, T, dh)
    merged = T.reshape(T.transpose(mixed, (1, 0, 2)), (t_len, d))
    return T.add(T.matmul(merged, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def _block(x: T.Tensor, p: T.ParamStore, prefix: str, n_heads: int,
           allowed: np.ndarray | None, memory_row: T.Tensor | None) -> T.Tensor:
    a_in = T.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    x = T.add(x, _attention(a_in, p, f"{prefix}.attn", n_heads, allowed, memory_row))
    m_in = T.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = T.gelu(T.add(T.matmul(m_in, p[f"{prefix}.mlp.w1"]), p[f"{prefix}.mlp.b1"]))
    return T.add(x, T.add(T.matmul(h, p[f"{prefix}.mlp.w2"]), p[f"{prefix}.mlp.b2"]))


def encoder_input_ids(future_ids: Sequence[int], distance: int, tokenizer: Tokenizer) -> list[int]:
    if not future_ids:
        raise ModelError("encode_future: future_ids is empty")
    if distance < 1:
        raise ModelError(f"encode_future: distance must be >= 1, got {distance}")
    return [AGG] + tokenizer.encode(str(distance)) + [SEP] + list(future_ids)


def encode_sequence(ids: Sequence[int], params: T.ParamStore, cfg: ModelConfig) -> T.Tensor:
    """Full bidirectional encoder stack over an already-assembled id sequence."""
    if cfg.injection_mode == NONE:
        raise ModelError("encode_sequence: model has no encoder (injection_mode none)")
    _check_ids(ids, cfg, "encode_sequence")
    x = T.add(T.embedding(params["enc.tok"], ids),
              T.rows(params["enc.pos"], 0, len(ids)))
    for i in range(cfg.n_layers_enc):
        x = _block(x, params, f"enc.l{i}", cfg.n_heads, allowed=None, memory_row=None)
    return T.layer_norm(x, params["enc.lnf.g"], params["enc.lnf.b"])


def encode_future(future_ids: Sequence[int], distance: int, params: T.ParamStore,
                  cfg: ModelConfig, tokenizer: Tokenizer) -> FutureEmbedding:
    """Bidirectional encoding of (distance, future); position 0 is the summary."""
    ids = encoder_input_ids(future_ids, distance, tokenizer)
    x = encode_sequence(ids, params, cfg)
    return FutureEmbedding(vector=T.rows(x, 0, 1), distance=distance)


def project_future(embedding: FutureEmbedding, params: T.ParamStore,
                   cfg: ModelConfig) -> FutureMemory:
    """One affine map plus gelu, reshaped to one memory vector per layer."""
    if cfg.injection_mode != MEMORY:
        raise ModelError("project_future requires injection_mode memory")
    h = T.gelu(T.add(T.matmul(embedding.vector, params["proj.w"]), params["proj.b"]))
    return FutureMemory(
        vectors=T.reshape(h, (cfg.n_layers_dec, cfg.d_model)),
        distance=embedding.distance,
    )


def _check_ids(ids: Sequence[int], cfg: ModelConfig, op: str) -> None:
    if not ids:
        raise ModelError(f"{op}: empty token sequence")
    if len(ids) > cfg.max_seq:
        raise ModelError(f"{op}: sequence of {len(ids)} exceeds max_seq {cfg.max_seq}")
    lo, hi = min(ids), max(ids)
    if lo < 0 or hi >= cfg.vocab_size:
        raise ModelError(f"{op}: token id {hi if hi >= cfg.vocab_size else lo} out of range")


def causal_mask(t: int, with_memory: bool, mask_memory: bool = False) -> np.ndarray:
    """Boolean allowed-matrix: strictly causal tokens, optional memory column."""
    tokens = np.tril(np.ones((t, t), dtype=bool))
    if not with_memory:
        return tokens
    mem_col = np.full((t, 1), not mask_memory)
    return np.concatenate([mem_col, tokens], axis=1)


def decoder_forward(token_ids: Sequence[int],
                    conditioning: FutureMemory | FutureEmbedding | None,
                    params: T.ParamStore, cfg: ModelConfig,
                    mask_memory: bool = False) -> T.Tensor:
    """Next-token logits, (T, vocab). The conditioning argument must match
    the injection mode: FutureMemory, FutureEmbedding, or None.

    mask_memory is a diagnostic switch: the memory slot stays in the
    computation but its attention column is masked to exactly zero.
    """
    _check_ids(token_ids, cfg, "decoder_forward")
    t_len = len(token_ids)
    x = T.add(T.embedding(params["dec.tok"], token_ids),
              T.rows(params["dec.pos"], 0, t_len))

    mode = cfg.injection_mode
    memory = None
    if mode == MEMORY:
        if not isinstance(conditioning, FutureMemory):
            raise ModelError("decoder_forward: memory mode needs a FutureMemory")
        memory = conditioning.vectors
    elif mode == EMBEDDING:
        if not isinstance(conditioning, FutureEmbedding):
            raise ModelError("decoder_forward: embedding mode needs a FutureEmbedding")
        ones = T.constant(np.ones((t_len, 1), dtype=x.data.dtype))
        tiled = T.matmul(ones, conditioning.vector)            # (T, d_enc)
        x = T.add(T.matmul(T.concat([x, tiled], axis=1), params["inj.w"]),
                  params["inj.b"])
    elif conditioning is not None:
        raise ModelError("decoder_forward: none mode takes no conditioning")

    allowed = causal_mask(t_len, with_memory=mode == MEMORY, mask_memory=mask_memory)
    for i in range(cfg.n_layers_dec):
        row = T.rows(memory, i, i + 1) if memory is not None else None
        x = _block(x, params, f"dec.l{i}", cfg.n_heads, allowed, row)
    x = T.layer_norm(x, params["dec.lnf.g"], params["dec.lnf.b"])
    return T.add(T.matmul(x, params["out.w"]), params["out.b"])


# ---------------------------------------------------------------------------
# checkpoint io

def save_checkpoint(path: str | Path, cfg: ModelConfig,
                    arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = json.dumps({"config": cfg.to_dict(), "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            dt = np.dtype(arr.dtype)
            if dt not in _DTYPE_BY_KIND:
                raise CheckpointError(f"{name}: unsupported dtype {dt}")
            code = _DTYPE_BY_KIND[dt]
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(struct.pack("<B", code))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    meta: dict


def load_checkpoint(path: str | Path,
                    expected_config: ModelConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, header_len = struct.unpack_from("<IQ", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    try:
        header = json.loads(raw[off:off + header_len].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        meta = header.get("meta", {})
        off += header_len
        (n_tensors,) = struct.unpack_from("<Q", raw, off)
        off += 8
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            (code,) = struct.unpack_from("<B", raw, off)
            off += 1
            if code not in _DTYPE_CODES:
                raise CheckpointError(f"{path}: tensor {name}: unknown dtype code {code}")
            dt = np.dtype(_DTYPE_CODES[code])
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(raw, dtype=dt, count=count, offset=off)
            off += count * dt.itemsize
            arrays[name] = np.array(arr.reshape(shape))  # own, writable memory
    except CheckpointError:
        raise
    except (struct.error, ValueError, UnicodeDecodeError, KeyError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from e
    if expected_config is not None and cfg != expected_config:
        raise CheckpointError(
            f"{path}: checkpoint config {cfg} does not match expected {expected_config}")
    return Checkpoint(config=cfg, arrays=arrays, meta=meta)


def model_arrays(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    """Model parameters only (training state rides along under "opt.")."""
    return {k: v for k, v in ckpt.arrays.items() if not k.startswith("opt.")}


def build_store(cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> T.ParamStore:
    store = T.ParamStore()
    expected = dict(param_specs(cfg))
    missing = set(expected) - set(arrays)
    if missing:
        raise CheckpointError(f"missing parameters: {sorted(missing)[:4]}")
    for name, shape in expected.items():
        if tuple(arrays[name].shape) != shape:
            raise CheckpointError(
                f"parameter {name}: shape {arrays[name].shape}, expected {shape}")
        store.add(name, arrays[name])
    return store


def load_inference_model(path: str | Path) -> "InferenceModel":
    """Checkpoint file to ready-to-sample model; the tokenizer rides in meta."""
    ck = load_checkpoint(path)
    doc = ck.meta.get("tokenizer")
    if doc is None:
        raise CheckpointError(f"{path}: checkpoint carries no tokenizer")
    return InferenceModel(ck.config, model_arrays(ck), Tokenizer.from_dict(doc))


# ---------------------------------------------------------------------------
# no-grad inference path (mirrors the autodiff forward formula for formula)

@dataclass
class DecoderState:
    """Per-layer K/V rows for committed tokens plus fixed memory-slot K/V.
    In embedding mode emb_cond holds the row folded into every new token."""

    keys: list[np.ndarray]
    values: list[np.ndarray]
    mem_k: list[np.ndarray] | None
    mem_v: list[np.ndarray] | None
    emb_cond: np.ndarray | None
    length: int
    last_logits: np.ndarray | None


class InferenceModel:
    """Frozen weights plus tokenizer, running forward math in plain numpy."""

    def __init__(self, cfg: ModelConfig, arrays: dict[str, np.ndarray],
                 tokenizer: Tokenizer):
        for name, shape in param_specs(cfg):
            if name not in arrays:
                raise CheckpointError(f"missing parameter {name}")
            if tuple(arrays[name].shape) != shape:
                raise CheckpointError(
                    f"parameter {name}: shape {arrays[name].shape}, expected {shape}")
        if tokenizer.vocab_size != cfg.vocab_size:
            raise ModelError(
                f"tokenizer vocab {tokenizer.vocab_size} != model vocab {cfg.vocab_size}")
        self.cfg = cfg
        self.p = arrays
        self.tokenizer = tokenizer

    # encoder ---------------------------------------------------------------

    def _enc_block(self, x: np.ndarray, prefix: str) -> np.ndarray:
        p = self.p
        a_in, _, _ = T.layer_norm_np(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        x = x + self._attn_np(a_in, f"{prefix}.attn", allowed=None, memory_row=None)
        m_in, _, _ = T.layer_norm_np(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        hdn = T.gelu_np(m_in @ p[f"{prefix}.mlp.w1"] + p[f"{prefix}.mlp.b1"])
        return x + (hdn @ p[f"{prefix}.mlp.w2"] + p[f"{prefix}.mlp.b2"])

    def _attn_np(self, x, prefix, allowed, memory_row):
        p, n_heads = self.p, self.cfg.n_heads
        t_len, d = x.shape
        dh = d // n_heads
        q = x @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]
        k = x @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]
        v = x @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]
        if memory_row is not None:
            k = np.concatenate([memory_row @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"], k])
            v = np.concatenate([memory_row @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"], v])
        s = k.shape[0]
        qh = q.reshape(t_len, n_heads, dh).transpose(1, 0, 2)
        kh = k.reshape(s, n_heads, dh).transpose(1, 2, 0)
        vh = v.reshape(s, n_heads, dh).transpose(1, 0, 2)
        att = T.softmax_np(qh @ kh / np.sqrt(dh),
                           None if allowed is None else np.broadcast_to(allowed, (n_heads, t_len, s)))
        return (att @ vh).transpose(1, 0, 2).reshape(t_len, d) @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]

    def encode_future(self, future_ids: Sequence[int], distance: int) -> np.ndarray:
        if self.cfg.injection_mode == NONE:
            raise ModelError("encode_future: model has no encoder (injection_mode none)")
        ids = encoder_input_ids(future_ids, distance, self.tokenizer)
        _check_ids(ids, self.cfg, "encode_future")
        x = self.p["enc.tok"][np.asarray(ids)] + self.p["enc.pos"][:len(ids)]
        for i in range(self.cfg.n_layers_enc):
            x = self._enc_block(x, f"enc.l{i}")
        x, _, _ = T.layer_norm_np(x, self.p["enc.lnf.g"], self.p["enc.lnf.b"])
        return x[0:1]  # (1, d_enc)

    def conditioning(self, future_ids: Sequence[int], distance: int) -> np.ndarray:
        """Memory stack (L, d_model) in memory mode, embedding row otherwise."""
        e = self.encode_future(future_ids, distance)
        if self.cfg.injection_mode == EMBEDDING:
            return e
        h = T.gelu_np(e @ self.p["proj.w"] + self.p["proj.b"])
        return h.reshape(self.cfg.n_layers_dec, self.cfg.d_model)

    # decoder ---------------------------------------------------------------

    def _embed_tokens(self, ids: Sequence[int], pos_start: int, cond) -> np.ndarray:
        x = self.p["dec.tok"][np.asarray(ids)] + self.p["dec.pos"][pos_start:pos_start + len(ids)]
        if self.cfg.injection_mode == EMBEDDING:
            tiled = np.broadcast_to(cond, (len(ids), cond.shape[-1]))
            x = np.concatenate([x, tiled], axis=1) @ self.p["inj.w"] + self.p["inj.b"]
        return x

    def full_logits(self, token_ids: Sequence[int], cond: np.ndarray | None,
                    mask_memory: bool = False) -> np.ndarray:
        """All-position logits in one pass; reference for the cached path."""
        _check_ids(token_ids, self.cfg, "decoder_forward")
        return self._forward(token_ids, cond, mask_memory=mask_memory, want_rows=True)

    def prime(self, token_ids: Sequence[int], cond: np.ndarray | None) -> DecoderState:
        _check_ids(token_ids, self.cfg, "prime")
        return self._forward(token_ids, cond, mask_memory=False, want_rows=False)

    def _mem_kv(self, cond):
        if self.cfg.injection_mode != MEMORY or cond is None:
            return None, None
        if cond.shape != (self.cfg.n_layers_dec, self.cfg.d_model):
            raise ModelError(f"memory stack has shape {cond.shape}")
        mem_k, mem_v = [], []
        for i in range(self.cfg.n_layers_dec):
            row = cond[i:i + 1]
            mem_k.append(row @ self.p[f"dec.l{i}.attn.wk"] + self.p[f"dec.l{i}.attn.bk"])
            mem_v.append(row @ self.p[f"dec.l{i}.attn.wv"] + self.p[f"dec.l{i}.attn.bv"])
        return mem_k, mem_v

    def _forward(self, token_ids, cond, mask_memory, want_rows):
        # cond=None on a memory model runs the bare trunk: identical math to
        # a masked memory slot, and the unconditioned baseline for diagnostics.
        cfg, p = self.cfg, self.p
        if cfg.injection_mode == EMBEDDING:
            if cond is None:
                raise ModelError("decoder_forward: embedding mode needs an embedding row")
            cond = np.asarray(cond).reshape(1, cfg.d_enc)
        t_len = len(token_ids)
        x = self._embed_tokens(token_ids, 0, cond)
        mem_k, mem_v = self._mem_kv(cond)
        with_memory = mem_k is not None
        allowed = causal_mask(t_len, with_memory=with_memory, mask_memory=mask_memory)
        keys, values = [], []
        for i in range(cfg.n_layers_dec):
            prefix = f"dec.l{i}"
            a_in, _, _ = T.layer_norm_np(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
            k = a_in @ p[f"{prefix}.attn.wk"] + p[f"{prefix}.attn.bk"]
            v = a_in @ p[f"{prefix}.attn.wv"] + p[f"{prefix}.attn.bv"]
            keys.append(k)
            values.append(v)
            q = a_in @ p[f"{prefix}.attn.wq"] + p[f"{prefix}.attn.bq"]
            k_full = np.concatenate([mem_k[i], k]) if with_memory else k
            v_full = np.concatenate([mem_v[i], v]) if with_memory else v
            att_out = self._mha(q, k_full, v_full, allowed)
            x = x + (att_out @ p[f"{prefix}.attn.wo"] + p[f"{prefix}.attn.bo"])
            m_in, _, _ = T.layer_norm_np(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
            hdn = T.gelu_np(m_in @ p[f"{prefix}.mlp.w1"] + p[f"{prefix}.mlp.b1"])
            x = x + (hdn @ p[f"{prefix}.mlp.w2"] + p[f"{prefix}.mlp.b2"])
        x, _, _ = T.layer_norm_np(x, p["dec.lnf.g"], p["dec.lnf.b"])
        logits = x @ p["out.w"] + p["out.b"]
        if want_rows:
            return logits
        emb_cond = cond if cfg.injection_mode == EMBEDDING else None
        return DecoderState(keys=keys, values=values, mem_k=mem_k, mem_v=mem_v,
                            emb_cond=emb_cond, length=t_len, last_logits=logits[-1])

    def _mha(self, q, k, v, allowed):
        n_heads = self.cfg.n_heads
        t_len, d = q.shape
        s = k.shape[0]
        dh = d // n_heads
        qh = q.reshape(t_len, n_heads, dh).transpose(1, 0, 2)
        kh = k.reshape(s, n_heads, dh).transpose(1, 2, 0)
        vh = v.reshape(s, n_heads, dh).transpose(1, 0, 2)
        att = T.softmax_np(qh @ kh / np.sqrt(dh),
                           None if allowed is None else np.broadcast_to(allowed, (n_heads, t_len, s)))
        return (att @ vh).transpose(1, 0, 2).reshape(t_len, d)

    def step(self, state: DecoderState, token_id: int) -> np.ndarray:
        """Extend the cache by one committed token; returns the new last-row
        logits. Appends in place."""
        cfg, p = self.cfg, self.p
        if state.length + 1 > cfg.max_seq:
            raise ModelError(f"step: sequence would exceed max_seq {cfg.max_seq}")
        x = self._embed_tokens([token_id], state.length, state.emb_cond)
        with_memory = state.mem_k is not None
        for i in range(cfg.n_layers_dec):
            prefix = f"dec.l{i}"
            a_in, _, _ = T.layer_norm_np(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
            q = a_in @ p[f"{prefix}.attn.wq"] + p[f"{prefix}.attn.bq"]
            k = a_in @ p[f"{prefix}.attn.wk"] + p[f"{prefix}.attn.bk"]
            v = a_in @ p[f"{prefix}.attn.wv"] + p[f"{prefix}.attn.bv"]
            state.keys[i] = np.concatenate([state.keys[i], k])
            state.values[i] = np.concatenate([state.values[i], v])
            k_full = (np.concatenate([state.mem_k[i], state.keys[i]])
                      if with_memory else state.keys[i])
            v_full = (np.concatenate([state.mem_v[i], state.values[i]])
                      if with_memory else state.values[i])
            att_out = self._mha(q, k_full, v_full, allowed=None)  # last row sees all
            x = x + (att_out @ p[f"{prefix}.attn.wo"] + p[f"{prefix}.attn.bo"])
            m_in, _, _ = T.layer_norm_np(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
            hdn = T.gelu_np(m_in @ p[f"{prefix}.mlp.w1"] + p[f"{prefix}.mlp.b1"])
            x = x + (hdn @ p[f"{prefix}.mlp.w2"] + p[f"{prefix}.mlp.b2"])
        x, _, _ = T.layer_norm_np(x, p["dec.lnf.g"], p["dec.lnf.b"])
        state.length += 1
        state.last_logits = (x @ p["out.w"] + p["out.b"])[0]
        return state.last_logits
