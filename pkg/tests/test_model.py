import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, random_model
from prefixtune.model import (ActivationTrace, CheckpointError, AdapterSection, ModelConfig, SequenceLengthError,
                              collect_activations, count_parameters, decode, dump_model, empty_trace, encode,
                              forward_encdec, forward_lm, init_parameters, next_token_distribution,
                              parameter_layout, parse_model)


def toks(rng, n, v=TINY.vocab_size):
    return rng.integers(0, v, size=n)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)


def test_desk_default_config_and_count():
    cfg = ModelConfig()
    assert (cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.vocab_size, cfg.max_seq_len) == (4, 64, 4, 256, 200, 128)
    assert count_parameters(cfg) == sum(int(np.prod(s)) for _, s in parameter_layout(cfg))
    assert cfg.kv_width == 4 * 2 * 64


def test_single_token_logits_are_head_times_top(tiny_model, rng):
    out = forward_lm(tiny_model, toks(rng, 1))
    assert np.allclose(out.logits.data, out.hidden.data @ tiny_model["lm_head"].data, atol=0, rtol=0)


def test_empty_injection_is_bit_identical(tiny_model, rng):
    x = toks(rng, 7)
    a = forward_lm(tiny_model, x).logits.data
    b = forward_lm(tiny_model, x, empty_trace(TINY)).logits.data
    assert np.array_equal(a, b)


def test_context_equivalence(tiny_model, rng):
    for _ in range(10):
        w, x = toks(rng, rng.integers(1, 6)), toks(rng, rng.integers(1, 8))
        trace = collect_activations(tiny_model, w)
        split = forward_lm(tiny_model, x, trace).logits.data
        joint = forward_lm(tiny_model, np.concatenate([w, x])).logits.data[len(w):]
        assert np.abs(split - joint).max() <= 1e-10


def test_collect_activations_shape_and_determinism(tiny_model, rng):
    w = toks(rng, 5)
    t1, t2 = collect_activations(tiny_model, w), collect_activations(tiny_model, w)
    assert t1.n_layers == TINY.n_layers and t1.width == TINY.d_model and t1.length == 5
    for a, b in zip(t1.keys + t1.values, t2.keys + t2.values):
        assert np.array_equal(a, b)


def test_sequence_length_error(tiny_model, rng):
    with pytest.raises(SequenceLengthError):
        forward_lm(tiny_model, toks(rng, TINY.max_seq_len + 1))
    trace = collect_activations(tiny_model, toks(rng, 60))
    with pytest.raises(SequenceLengthError):
        forward_lm(tiny_model, toks(rng, 5), trace)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 12))
def test_causality(seed, n):
    model = random_model()
    rng = np.random.default_rng(seed)
    x = toks(rng, n)
    i = int(rng.integers(0, n - 1))
    y = x.copy()
    y[i + 1:] = toks(rng, n - i - 1)
    a = forward_lm(model, x).logits.data[: i + 1]
    b = forward_lm(model, y).logits.data[: i + 1]
    assert np.array_equal(a, b)


def test_padding_rows_match_unpadded(tiny_model, rng):
    x1, x2 = toks(rng, 4), toks(rng, 7)
    batch = np.zeros((2, 7), dtype=np.int64)
    mask = np.zeros((2, 7), dtype=bool)
    batch[0, 3:], mask[0, 3:] = x1, True  # left padded
    batch[1], mask[1] = x2, True
    out = forward_lm(tiny_model, batch, token_mask=mask).logits.data
    assert np.abs(out[0, 3:] - forward_lm(tiny_model, x1).logits.data).max() < 1e-12
    assert np.abs(out[1] - forward_lm(tiny_model, x2).logits.data).max() < 1e-12


def test_next_token_distribution(tiny_model, rng):
    w = toks(rng, 4)
    out = forward_lm(tiny_model, w)
    for i in range(4):
        p = next_token_distribution(tiny_model, out.trace, i)
        assert abs(p.sum() - 1) < 1e-12
        logits = out.logits.data[i]
        brute = np.exp(logits) / np.exp(logits).sum()
        assert np.allclose(p, brute, rtol=0, atol=1e-14)
        assert np.argmax(p) == np.argmax(logits + 123.0)


def test_next_token_distribution_rejects_prefix_slots(tiny_model, rng):
    prefix = collect_activations(tiny_model, toks(rng, 3))
    bare = ActivationTrace(prefix.keys, prefix.values)  # injected slots: no top-layer state
    out = forward_lm(tiny_model, toks(rng, 2), bare)
    with pytest.raises(ValueError):
        next_token_distribution(tiny_model, out.trace, 0)
    next_token_distribution(tiny_model, out.trace, 3)
    with pytest.raises(IndexError):
        next_token_distribution(tiny_model, out.trace, 5)


def test_encdec_zero_prefix_is_plain(encdec_model, rng):
    src, tgt = toks(rng, 5), toks(rng, 4)
    a = forward_encdec(encdec_model, src, tgt).logits.data
    b = forward_encdec(encdec_model, src, tgt, empty_trace(encdec_model.config), empty_trace(encdec_model.config)).logits.data
    assert np.array_equal(a, b)


def test_encdec_decoder_causal_encoder_bidirectional(encdec_model, rng):
    src, tgt = toks(rng, 6), toks(rng, 5)
    base = forward_encdec(encdec_model, src, tgt)
    tgt2 = tgt.copy()
    tgt2[3] = (tgt2[3] + 1) % TINY.vocab_size
    other = forward_encdec(encdec_model, src, tgt2)
    assert np.array_equal(base.logits.data[:3], other.logits.data[:3])
    assert not np.allclose(base.logits.data[3:], other.logits.data[3:])
    for j in range(6):
        src2 = src.copy()
        src2[j] = (src2[j] + 1) % TINY.vocab_size
        changed = forward_encdec(encdec_model, src2, tgt)
        # every encoder position (including ones left of the change) sees it
        assert np.all(np.abs(changed.memory.data - base.memory.data).max(axis=-1) > 0)
        assert not np.allclose(changed.logits.data, base.logits.data)


def test_encdec_incremental_decoding_matches_full(encdec_model, rng):
    src, tgt = toks(rng, 5), toks(rng, 4)
    memory, _, mmask = encode(encdec_model, src)
    full = decode(encdec_model, tgt, memory, mmask).logits.data
    out = decode(encdec_model, tgt[:2], memory, mmask)
    rest = decode(encdec_model, tgt[2:], memory, mmask, out.trace.detach()).logits.data
    assert np.abs(full[2:] - rest).max() < 1e-12


def test_checkpoint_round_trip(tiny_model):
    f32 = tiny_model.astype(np.float32)
    raw = dump_model(f32)
    loaded, adapters = parse_model(raw, dtype=np.float32)
    assert adapters is None and loaded.config == TINY
    for (n, a), (m, b) in zip(f32, loaded):
        assert n == m and np.array_equal(a.data, b.data)
    assert dump_model(loaded) == raw


def test_checkpoint_header_layout(tiny_model):
    raw = dump_model(tiny_model)
    assert raw[:4] == b"PFXF"
    vals = np.frombuffer(raw[4:36], dtype="<u4")
    assert list(vals) == [1, 2, 16, 2, 32, 23, 64, 0]


def test_checkpoint_with_adapter_section(tiny_model):
    sec = AdapterSection(3, {"layers.0.attn.adapter.down": np.ones((16, 3), dtype=np.float32)})
    _, back = parse_model(dump_model(tiny_model, sec))
    assert back.bottleneck == 3 and np.array_equal(back.tensors["layers.0.attn.adapter.down"], np.ones((16, 3)))


def test_checkpoint_errors(tiny_model):
    raw = dump_model(tiny_model)
    with pytest.raises(CheckpointError):
        parse_model(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        parse_model(raw[:4] + b"\x09\x00\x00\x00" + raw[8:])
    with pytest.raises(CheckpointError):
        parse_model(raw[:-7])
    with pytest.raises(CheckpointError):
        parse_model(raw + b"JUNK")


def test_init_parameters_deterministic():
    a, b = init_parameters(TINY, seed=5), init_parameters(TINY, seed=5)
    assert all(np.array_equal(x.data, y.data) for (_, x), (_, y) in zip(a, b))
