import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from headlab import tensor as T
from headlab.corpus import Sentence, SubtokenMap, build_vocab, load_grammar, synth_generate
from headlab.encoder import (Encoder, EncoderConfig, gated_attention, load_snapshots, make_batch, pool_matrix,
                             save_snapshots, word_dropout, word_embed)
from conftest import fd_check


def _encoder(seed=0, **kw):
    cfg = EncoderConfig(**{"layers": 2, "heads": 4, "d_model": 32, "ffn": 64, "vocab_size": 20, "max_len": 16,
                           "dropout": 0.0, **kw})
    return Encoder(cfg, np.random.default_rng(seed))


def _inputs(seed=1):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 20, size=(3, 7))
    km = np.ones((3, 7), bool)
    km[1, 5:] = False
    return ids, km


def test_gated_attention_examples():
    rng = np.random.default_rng(0)
    Q, K, V = (rng.normal(size=(4, 3)) for _ in range(3))
    np.testing.assert_array_equal(gated_attention(Q, K, V, 0.0).data, np.zeros((4, 3)))
    s = Q @ K.T / math.sqrt(3)
    a = np.exp(s - s.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    np.testing.assert_allclose(gated_attention(Q, K, V, 1.0).data, a @ V, atol=1e-14)
    np.testing.assert_allclose(gated_attention(Q[:1], K[:1], V[:1], 0.3).data, 0.3 * V[:1], atol=1e-15)
    with pytest.raises(ValueError):
        gated_attention(Q, K[:, :2], V, 1.0)


@settings(max_examples=30)
@given(st.floats(0.0, 0.5))
def test_gated_attention_linear_in_gate(z):
    rng = np.random.default_rng(3)
    Q, K, V = (rng.normal(size=(5, 4)) for _ in range(3))
    np.testing.assert_allclose(gated_attention(Q, K, V, 2 * z).data, 2 * gated_attention(Q, K, V, z).data,
                               atol=1e-14)


def _no_attention_oracle(enc, ids):
    """Embeddings plus feed-forward sublayers only, written directly in numpy."""
    p = {k: v.data for k, v in enc.params.items()}

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))

    x = p["tok_emb"][ids] + p["pos_emb"][:ids.shape[1]]
    for i in range(enc.cfg.layers):
        x = x + p[f"l{i}.bo"]
        h = ln(x, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
        x = x + gelu(h @ p[f"l{i}.w1"] + p[f"l{i}.b1"]) @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
    return ln(x, p["lnf_g"], p["lnf_b"])


def test_closed_gates_leave_feed_forward_path():
    enc = _encoder()
    ids, km = _inputs()
    with T.no_grad():
        h, _ = enc.forward(ids, km, z=np.zeros((2, 4)))
    np.testing.assert_allclose(h.data, _no_attention_oracle(enc, ids), atol=1e-12)
    h2, _ = enc.forward(ids, km, z=T.Tensor(np.zeros((2, 4))))
    np.testing.assert_allclose(h2.data, h.data, atol=1e-12)


def test_skipping_pruned_heads_is_bitwise_identical():
    enc = _encoder()
    ids, km = _inputs()
    for z in (np.array([[0, 0.5, 0, 1.0], [0.3, 0, 0, 0]]), np.zeros((2, 4)), np.ones((2, 4))):
        with T.no_grad():
            a, _ = enc.forward(ids, km, z=z, skip=True)
            b, _ = enc.forward(ids, km, z=z, skip=False)
        assert a.data.tobytes() == b.data.tobytes()


def test_training_and_eval_paths_agree():
    enc = _encoder()
    ids, km = _inputs()
    z = np.array([[0.2, 0.5, 0, 1.0], [0.3, 1, 0.9, 0]])
    with T.no_grad():
        a, _ = enc.forward(ids, km, z=z)
    b, _ = enc.forward(ids, km, z=T.Tensor(z))
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_capture_is_row_stochastic_and_deterministic():
    enc = _encoder()
    ids, km = _inputs()
    with T.no_grad():
        h1, snaps = enc.forward(ids, km, capture=True)
        h2, _ = enc.forward(ids, km)
    assert len(snaps) == 2
    for A, V in snaps:
        assert A.shape == (3, 4, 7, 7) and V.shape == (3, 4, 7, 8)
        np.testing.assert_allclose(A.sum(-1), 1.0, atol=1e-9)
        assert np.all(A[1, :, :, 5:] < 1e-200)
    assert h1.data.tobytes() == h2.data.tobytes()


def test_encoder_gradients_match_finite_differences():
    enc = _encoder(dropout=0.0)
    ids, km = _inputs()
    rng = np.random.default_rng(2)
    z = T.parameter(rng.uniform(0.2, 0.9, size=(2, 4)))
    w = rng.normal(size=(3, 7, 32))
    f = lambda: T.tsum(T.mul(T.tanh(enc.forward(ids, km, z=z)[0]), w))
    params = list(enc.params.values()) + [z]
    assert fd_check(f, params, rng, coords=80) < 1e-6


def test_too_long_input():
    enc = _encoder()
    with pytest.raises(ValueError):
        enc.forward(np.zeros((1, 17), int), np.ones((1, 17), bool))


def test_word_embed_and_pool():
    h = T.Tensor(np.arange(12.0).reshape(4, 3))
    smap = SubtokenMap([(1, 2), (2, 4)], 4, bos=0)
    words, root = word_embed(h, smap)
    np.testing.assert_array_equal(words.data, [[3, 4, 5], [7.5, 8.5, 9.5]])
    np.testing.assert_array_equal(root.data, [0, 1, 2])
    swapped = SubtokenMap([(2, 4), (1, 2)], 4, bos=0)
    np.testing.assert_array_equal(word_embed(h, swapped)[0].data, words.data[::-1])
    with pytest.raises(ValueError):
        pool_matrix(SubtokenMap([(1, 1)], 3))


def test_word_dropout_rates():
    v = build_vocab([Sentence(["a", "b"])])
    ids = np.array([[v.bos, v["a"], v["b"], v.eos, v.pad]])
    assert word_dropout(ids, 0.0, np.random.default_rng(0), v) is ids
    full = word_dropout(ids, 1.0, np.random.default_rng(0), v)
    np.testing.assert_array_equal(full, [[v.bos, v.mask, v.mask, v.eos, v.pad]])
    big = np.full((100, 1000), v["a"])
    frac = (word_dropout(big, 0.2, np.random.default_rng(1), v) == v.mask).mean()
    assert abs(frac - 0.2) < 0.01
    with pytest.raises(ValueError):
        word_dropout(ids, 1.5, None, v)


def test_batch_and_snapshot_round_trip(tmp_path):
    sents = synth_generate(load_grammar(None), 4, 2)
    v = build_vocab(sents)
    b = make_batch(sents, v, 64)
    assert b.ids.shape[0] == 4 and b.word_mask.sum() == sum(len(s) for s in sents)
    np.testing.assert_allclose(b.pool.sum(-1)[b.word_mask], 1.0)
    with pytest.raises(ValueError):
        make_batch(sents, v, 3)
    from headlab.encoder import AttentionSnapshot
    snap = AttentionSnapshot([[np.eye(3)]], [[np.ones((3, 2))]], SubtokenMap([(1, 2)], 3, 0, 2))
    path = save_snapshots(tmp_path / "s", [snap], {"k": 1})
    (back,), meta = load_snapshots(path)
    assert meta["k"] == 1 and back.map == snap.map
    np.testing.assert_array_equal(back.attn[0][0], np.eye(3))
