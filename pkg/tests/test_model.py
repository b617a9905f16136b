import numpy as np
import pytest

import futuresight.tensor as T
from futuresight.bpe import AGG, SEP, Tokenizer
from futuresight.model import (
    EMBEDDING,
    MEMORY,
    NONE,
    Checkpoint,
    CheckpointError,
    FutureEmbedding,
    FutureMemory,
    InferenceModel,
    ModelConfig,
    ModelError,
    build_store,
    causal_mask,
    decoder_forward,
    encode_future,
    encode_sequence,
    encoder_input_ids,
    init_params,
    load_checkpoint,
    model_arrays,
    param_specs,
    project_future,
    save_checkpoint,
)

BYTE_VOCAB = 261  # specials + raw bytes, the smallest real tokenizer


def tiny_cfg(mode=MEMORY, **kw):
    base = dict(vocab_size=BYTE_VOCAB, d_model=16, d_enc=16, n_heads=2,
                n_layers_dec=2, n_layers_enc=2, d_ff=32, max_seq=64,
                injection_mode=mode, seed=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def byte_tok():
    return Tokenizer(merges=[])


# --- config ----------------------------------------------------------------

def test_config_rejects_bad_mode():
    with pytest.raises(ModelError):
        tiny_cfg(mode="adapter")


def test_config_rejects_indivisible_heads():
    with pytest.raises(ModelError, match="heads"):
        tiny_cfg(d_model=18, n_heads=4)


def test_config_dict_round_trip():
    cfg = tiny_cfg(EMBEDDING, seed=11)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_config_rejects_unknown_field():
    d = tiny_cfg().to_dict()
    d["dropout"] = 0.1
    with pytest.raises(ModelError, match="dropout"):
        ModelConfig.from_dict(d)


def test_reference_scale_constructible():
    cfg = ModelConfig(vocab_size=32000, d_model=768, d_enc=768, n_heads=12,
                      n_layers_dec=12, n_layers_enc=2, d_ff=3072, max_seq=1024)
    total = sum(int(np.prod(s)) for _, s in param_specs(cfg))
    assert total > 80_000_000


# --- parameters ------------------------------------------------------------

def test_param_layout_by_mode():
    names_mem = {n for n, _ in param_specs(tiny_cfg(MEMORY))}
    names_emb = {n for n, _ in param_specs(tiny_cfg(EMBEDDING))}
    names_non = {n for n, _ in param_specs(tiny_cfg(NONE))}
    assert {"proj.w", "proj.b", "enc.tok"} <= names_mem
    assert not any(n.startswith("inj.") for n in names_mem)
    assert {"inj.w", "inj.b", "enc.tok"} <= names_emb
    assert not any(n.startswith("proj.") for n in names_emb)
    assert not any(n.startswith(("enc.", "proj.", "inj.")) for n in names_non)
    # decoder trunk identical across modes
    dec = lambda ns: {n for n in ns if n.startswith(("dec.", "out."))}
    assert dec(names_mem) == dec(names_emb) == dec(names_non)


def test_projection_shape_spans_layers():
    cfg = tiny_cfg()
    shapes = dict(param_specs(cfg))
    assert shapes["proj.w"] == (cfg.d_enc, cfg.n_layers_dec * cfg.d_model)


def test_init_kinds():
    cfg = tiny_cfg()
    store = init_params(cfg, dtype=np.float64)
    assert np.array_equal(store["dec.l0.ln1.g"].data, np.ones(cfg.d_model))
    assert not store["dec.l0.attn.bq"].data.any()
    w = store["dec.l0.attn.wq"].data
    assert 0.01 < w.std() < 0.03 and abs(w.mean()) < 0.01


def test_init_deterministic():
    a = init_params(tiny_cfg())["dec.tok"].data
    b = init_params(tiny_cfg())["dec.tok"].data
    assert np.array_equal(a, b)


# --- encoder ---------------------------------------------------------------

def test_encoder_input_layout(byte_tok):
    ids = encoder_input_ids([300, 301], 3, byte_tok)
    digits = byte_tok.encode("3")
    assert ids == [AGG] + digits + [SEP, 300, 301]


def test_encoder_rejects_empty_future(byte_tok):
    with pytest.raises(ModelError, match="empty"):
        encoder_input_ids([], 1, byte_tok)


def test_encoder_rejects_bad_distance(byte_tok):
    with pytest.raises(ModelError, match="distance"):
        encoder_input_ids([7], 0, byte_tok)


def test_none_mode_has_no_encoder(byte_tok):
    cfg = tiny_cfg(NONE)
    store = init_params(cfg)
    with pytest.raises(ModelError, match="no encoder"):
        encode_future([7, 8], 1, store, cfg, byte_tok)


def test_future_embedding_is_position_zero(byte_tok):
    cfg = tiny_cfg()
    store = init_params(cfg, dtype=np.float64)
    ids = encoder_input_ids([10, 11, 12], 2, byte_tok)
    full = encode_sequence(ids, store, cfg)
    emb = encode_future([10, 11, 12], 2, store, cfg, byte_tok)
    assert emb.vector.shape == (1, cfg.d_enc)
    assert np.array_equal(emb.vector.data, full.data[0:1])


def test_encoder_distance_sensitivity(byte_tok):
    cfg = tiny_cfg()
    store = init_params(cfg, dtype=np.float64)
    e1 = encode_future([10, 11], 1, store, cfg, byte_tok)
    e2 = encode_future([10, 11], 2, store, cfg, byte_tok)
    assert not np.allclose(e1.vector.data, e2.vector.data)


def test_encoder_order_sensitivity(byte_tok):
    cfg = tiny_cfg()
    store = init_params(cfg, dtype=np.float64)
    e1 = encode_future([10, 11, 12], 1, store, cfg, byte_tok)
    e2 = encode_future([12, 11, 10], 1, store, cfg, byte_tok)
    assert not np.allclose(e1.vector.data, e2.vector.data)


def test_project_future_per_layer_rows(byte_tok):
    cfg = tiny_cfg()
    store = init_params(cfg, dtype=np.float64)
    mem = project_future(encode_future([9, 10], 2, store, cfg, byte_tok), store, cfg)
    assert mem.vectors.shape == (cfg.n_layers_dec, cfg.d_model)
    assert not np.allclose(mem.vectors.data[0], mem.vectors.data[1])


# --- decoder ---------------------------------------------------------------

def _forward_memory(cfg, store, token_ids, future_ids, distance, tok, mask_memory=False):
    emb = encode_future(future_ids, distance, store, cfg, tok)
    mem = project_future(emb, store, cfg)
    return decoder_forward(token_ids, mem, store, cfg, mask_memory=mask_memory)


def test_decoder_shapes_all_modes(byte_tok):
    ids = [1, 9, 10, 11]
    for mode in (MEMORY, EMBEDDING, NONE):
        cfg = tiny_cfg(mode)
        store = init_params(cfg, dtype=np.float64)
        if mode == MEMORY:
            out = _forward_memory(cfg, store, ids, [20, 21], 2, byte_tok)
        elif mode == EMBEDDING:
            emb = encode_future([20, 21], 2, store, cfg, byte_tok)
            out = decoder_forward(ids, emb, store, cfg)
        else:
            out = decoder_forward(ids, None, store, cfg)
        assert out.shape == (len(ids), cfg.vocab_size)
        assert np.isfinite(out.data).all()


def test_decoder_conditioning_type_guard(byte_tok):
    cfg = tiny_cfg(MEMORY)
    store = init_params(cfg)
    with pytest.raises(ModelError, match="FutureMemory"):
        decoder_forward([1, 2], None, store, cfg)
    cfg_n = tiny_cfg(NONE)
    store_n = init_params(cfg_n)
    emb = FutureEmbedding(vector=T.constant(np.zeros((1, 16), np.float32)), distance=1)
    with pytest.raises(ModelError, match="no conditioning"):
        decoder_forward([1, 2], emb, store_n, cfg_n)


def test_causal_mask_layout():
    m = causal_mask(3, with_memory=True)
    assert m.shape == (3, 4)
    assert m[:, 0].all()                      # every query sees the memory slot
    assert not m[0, 2] and not m[1, 3]        # no forward token attention
    assert causal_mask(3, with_memory=True, mask_memory=True)[:, 0].sum() == 0


def test_causality_exact(byte_tok):
    cfg = tiny_cfg()
    store = init_params(cfg, dtype=np.float64)
    ids_a = [1, 9, 10, 11, 12, 13]
    ids_b = list(ids_a)
    ids_b[4] = 200                            # perturb position 4
    la = _forward_memory(cfg, store, ids_a, [20, 21], 2, byte_tok)
    lb = _forward_memory(cfg, store, ids_b, [20, 21], 2, byte_tok)
    assert np.array_equal(la.data[:4], lb.data[:4])
    assert not np.allclose(la.data[4:], lb.data[4:])


def test_memory_changes_output(byte_tok):
    cfg = tiny_cfg()
    store = init_params(cfg, dtype=np.float64)
    ids = [1, 9, 10, 11]
    on = _forward_memory(cfg, store, ids, [20, 21], 2, byte_tok)
    off = _forward_memory(cfg, store, ids, [20, 21], 2, byte_tok, mask_memory=True)
    assert not np.allclose(on.data, off.data)


def test_masked_memory_equals_unconditioned(byte_tok):
    """With the memory column masked, the conditioned decoder must compute
    exactly what an unconditioned model with the same trunk weights computes."""
    cfg_m = tiny_cfg(MEMORY)
    cfg_n = tiny_cfg(NONE)
    store_m = init_params(cfg_m, dtype=np.float64)
    store_n = init_params(cfg_n, dtype=np.float64)
    for name in store_n.names():
        store_n[name].data[...] = store_m[name].data
    ids = [1, 9, 10, 11, 12]
    masked = _forward_memory(cfg_m, store_m, ids, [20, 21], 2, byte_tok, mask_memory=True)
    plain = decoder_forward(ids, None, store_n, cfg_n)
    assert np.max(np.abs(masked.data - plain.data)) < 1e-12


def test_embedding_mode_conditioning_matters(byte_tok):
    cfg = tiny_cfg(EMBEDDING)
    store = init_params(cfg, dtype=np.float64)
    ids = [1, 9, 10]
    ea = encode_future([30, 31], 1, store, cfg, byte_tok)
    eb = encode_future([40, 41], 1, store, cfg, byte_tok)
    assert not np.allclose(decoder_forward(ids, ea, store, cfg).data,
                           decoder_forward(ids, eb, store, cfg).data)


def test_every_projection_slice_carries_gradient(byte_tok):
    cfg = tiny_cfg()
    store = init_params(cfg, dtype=np.float64)
    logits = _forward_memory(cfg, store, [1, 9, 10], [20, 21], 2, byte_tok)
    T.backward(T.mean_all(T.mul(logits, logits)))
    g = store["proj.w"].grad
    for layer in range(cfg.n_layers_dec):
        block = g[:, layer * cfg.d_model:(layer + 1) * cfg.d_model]
        assert np.abs(block).max() > 0


# --- gradient check through the whole stack ---------------------------------

def test_full_model_grad_check():
    cfg = ModelConfig(vocab_size=32, d_model=16, d_enc=16, n_heads=2,
                      n_layers_dec=2, n_layers_enc=2, d_ff=32, max_seq=32,
                      injection_mode=MEMORY, seed=5)
    store = init_params(cfg, dtype=np.float64)
    enc_ids = [AGG, 9, SEP, 17, 23, 12]       # assembled by hand: tiny vocab
    dec_ids = [1, 8, 21, 30, 14, 6, 19, 11, 25, 7, 16, 28]
    targets = dec_ids[1:] + [2]

    def loss_fn():
        full = encode_sequence(enc_ids, store, cfg)
        emb = FutureEmbedding(vector=T.rows(full, 0, 1), distance=2)
        mem = project_future(emb, store, cfg)
        logits = decoder_forward(dec_ids, mem, store, cfg)
        lp = T.log_softmax(logits)
        picked = T.take_lastdim(lp, targets)
        loss = T.scale(T.sum_all(picked), -1.0 / len(targets))
        for name in store.names():
            loss = T.add(loss, T.scale(T.sum_all(store[name]), 0.05))
        return loss

    worst = T.grad_check(loss_fn, store, sample_fraction=0.05, seed=1)
    assert worst < 1e-6


# --- checkpoints -------------------------------------------------------------

def _round_trip(tmp_path, cfg, store, meta=None):
    path = tmp_path / "model.fsck"
    save_checkpoint(path, cfg, store.state_arrays(), meta=meta)
    return path, load_checkpoint(path)


def test_checkpoint_round_trip(tmp_path, byte_tok):
    cfg = tiny_cfg()
    store = init_params(cfg)
    meta = {"tokenizer": byte_tok.to_dict(), "epoch": 3}
    _, ck = _round_trip(tmp_path, cfg, store, meta)
    assert ck.config == cfg
    assert ck.meta["epoch"] == 3
    assert set(ck.arrays) == {n for n, _ in param_specs(cfg)}
    for name in store.names():
        assert np.array_equal(ck.arrays[name], store[name].data)
        assert ck.arrays[name].dtype == store[name].data.dtype
    Tokenizer.from_dict(ck.meta["tokenizer"])  # embedded tokenizer is usable


def test_checkpoint_dtype_preserved(tmp_path):
    cfg = tiny_cfg()
    store = init_params(cfg, dtype=np.float64)
    _, ck = _round_trip(tmp_path, cfg, store)
    assert ck.arrays["dec.tok"].dtype == np.float64


def test_checkpoint_bad_magic(tmp_path):
    cfg = tiny_cfg()
    path, _ = _round_trip(tmp_path, cfg, init_params(cfg))
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    cfg = tiny_cfg()
    path, _ = _round_trip(tmp_path, cfg, init_params(cfg))
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path):
    cfg = tiny_cfg()
    path, _ = _round_trip(tmp_path, cfg, init_params(cfg))
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path, expected_config=tiny_cfg(NONE))


def test_mode_mismatch_surfaces_on_load(tmp_path):
    """A conditioned checkpoint opened by code expecting a plain decoder."""
    cfg = tiny_cfg(MEMORY)
    path, ck = _round_trip(tmp_path, cfg, init_params(cfg))
    with pytest.raises(CheckpointError):
        build_store(tiny_cfg(NONE, d_model=32), model_arrays(ck))


def test_build_store_shape_guard():
    cfg = tiny_cfg()
    arrays = init_params(cfg).state_arrays()
    arrays["out.b"] = arrays["out.b"][:-1]
    with pytest.raises(CheckpointError, match="out.b"):
        build_store(cfg, arrays)


def test_model_arrays_strips_optimizer_state():
    cfg = tiny_cfg()
    arrays = init_params(cfg).state_arrays()
    arrays["opt.m.dec.tok"] = np.zeros(3)
    ck = Checkpoint(config=cfg, arrays=arrays, meta={})
    assert "opt.m.dec.tok" not in model_arrays(ck)


# --- inference path parity ---------------------------------------------------

def _inference_model(cfg, store, byte_tok):
    return InferenceModel(cfg, store.state_arrays(), byte_tok)


def test_inference_conditioning_matches_autodiff(byte_tok):
    cfg = tiny_cfg()
    store = init_params(cfg, dtype=np.float64)
    emb = encode_future([70, 71, 72], 3, store, cfg, byte_tok)
    mem = project_future(emb, store, cfg)
    m = _inference_model(cfg, store, byte_tok)
    np.testing.assert_allclose(m.encode_future([70, 71, 72], 3), emb.vector.data,
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(m.conditioning([70, 71, 72], 3), mem.vectors.data,
                               rtol=0, atol=1e-12)


def test_inference_logits_match_autodiff_memory(byte_tok):
    cfg = tiny_cfg()
    store = init_params(cfg, dtype=np.float64)
    ids = [1, 40, 41, 42, 43]
    auto = _forward_memory(cfg, store, ids, [70, 71], 2, byte_tok)
    m = _inference_model(cfg, store, byte_tok)
    got = m.full_logits(ids, m.conditioning([70, 71], 2))
    assert np.max(np.abs(got - auto.data)) < 1e-10


def test_inference_logits_match_autodiff_embedding(byte_tok):
    cfg = tiny_cfg(EMBEDDING)
    store = init_params(cfg, dtype=np.float64)
    ids = [1, 40, 41]
    emb = encode_future([70, 71], 2, store, cfg, byte_tok)
    auto = decoder_forward(ids, emb, store, cfg)
    m = _inference_model(cfg, store, byte_tok)
    got = m.full_logits(ids, m.encode_future([70, 71], 2))
    assert np.max(np.abs(got - auto.data)) < 1e-10


def test_inference_logits_match_autodiff_none(byte_tok):
    cfg = tiny_cfg(NONE)
    store = init_params(cfg, dtype=np.float64)
    ids = [1, 40, 41, 42]
    auto = decoder_forward(ids, None, store, cfg)
    m = _inference_model(cfg, store, byte_tok)
    got = m.full_logits(ids, None)
    assert np.max(np.abs(got - auto.data)) < 1e-10


@pytest.mark.parametrize("mode", [MEMORY, EMBEDDING, NONE])
def test_prime_then_step_matches_full(mode, byte_tok):
    cfg = tiny_cfg(mode)
    store = init_params(cfg, dtype=np.float64)
    m = _inference_model(cfg, store, byte_tok)
    if mode == MEMORY:
        cond = m.conditioning([90, 91, 92], 4)
    elif mode == EMBEDDING:
        cond = m.encode_future([90, 91, 92], 4)
    else:
        cond = None
    ids = [1, 50, 51, 52, 53, 54, 55]
    state = m.prime(ids[:3], cond)
    np.testing.assert_allclose(state.last_logits, m.full_logits(ids[:3], cond)[-1],
                               rtol=0, atol=1e-12)
    for t in range(3, len(ids)):
        stepped = m.step(state, ids[t])
        full = m.full_logits(ids[:t + 1], cond)[-1]
        assert np.max(np.abs(stepped - full)) < 1e-10
    assert state.length == len(ids)


def test_inference_no_cond_equals_masked_memory(byte_tok):
    """cond=None on a memory model is the bare trunk, bit-compatible with
    masking the memory column."""
    cfg = tiny_cfg(MEMORY)
    store = init_params(cfg, dtype=np.float64)
    m = _inference_model(cfg, store, byte_tok)
    ids = [1, 33, 34, 35]
    bare = m.full_logits(ids, None)
    masked = m.full_logits(ids, m.conditioning([80, 81], 2), mask_memory=True)
    assert np.max(np.abs(bare - masked)) < 1e-12
    state = m.prime(ids, None)
    np.testing.assert_allclose(state.last_logits, bare[-1], rtol=0, atol=1e-12)


def test_step_respects_max_seq(byte_tok):
    cfg = tiny_cfg(NONE, max_seq=4)
    m = _inference_model(cfg, init_params(cfg, dtype=np.float64), byte_tok)
    state = m.prime([1, 2, 3, 4], None)
    with pytest.raises(ModelError, match="max_seq"):
        m.step(state, 5)


def test_inference_rejects_vocab_mismatch(byte_tok):
    cfg = tiny_cfg(vocab_size=300)
    with pytest.raises(ModelError, match="vocab"):
        InferenceModel(cfg, init_params(cfg).state_arrays(), byte_tok)
