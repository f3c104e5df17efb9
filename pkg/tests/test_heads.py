import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from headlab import tensor as T
from headlab.corpus import Frame, Sentence, build_vocab
from headlab.encoder import make_batch
from headlab.heads import (DepHead, PosHead, SpanHead, SrlHead, greedy_spans, make_head, prediction_json,
                           score, width_index)
from conftest import fd_check


def _zero(head):
    for p in head.params.values():
        p.data[...] = 0.0


def _batch(sents):
    return make_batch(sents, build_vocab(sents), 64)


def _words(batch, d, seed=0):
    rng = np.random.default_rng(seed)
    W = batch.word_mask.shape[1]
    return T.parameter(rng.normal(size=(len(batch), W, d))), T.parameter(rng.normal(size=(len(batch), d)))


S3 = Sentence(["a", "b", "c"], pos=["X", "Y", "X"], dep=[(1, "r1"), (-1, "root"), (1, "r2")],
              ner=[(0, 1, "P")], con=[(0, 1, "NP"), (2, 2, "VP")], srl=[Frame(1, [(0, 0, "A0"), (2, 2, "A1")])])


def test_pos_zero_weights_uniform_loss():
    h = PosHead(8, ["X", "Y", "Z"], np.random.default_rng(0))
    _zero(h)
    b = _batch([S3])
    words, root = _words(b, 8)
    assert h.loss(words, root, b).item() == pytest.approx(math.log(3))
    h.params["pos.b"].data[:] = [0.0, 50.0, 0.0]
    assert h.decode(words, root, b) == [["Y", "Y", "Y"]]


def test_dep_zero_weights_and_single_word():
    h = DepHead(8, ["r1", "r2", "root"], np.random.default_rng(0))
    _zero(h)
    b = _batch([S3])
    words, root = _words(b, 8)
    # arc part ln(n+1) over [root] + words, relation part ln|R|
    assert h.loss(words, root, b).item() == pytest.approx(math.log(4) + math.log(3))
    one = _batch([Sentence(["x"], dep=[(-1, "root")])])
    w1, r1 = _words(one, 8, seed=3)
    h2 = DepHead(8, ["root"], np.random.default_rng(1))
    pred = h2.decode(w1, r1, one)
    assert [p[0] for p in pred[0]] == [-1]
    assert score("dep", one.sentences, pred)["uas"] == 1.0


def test_dep_identity_biaffine_prefers_shared_direction():
    d = 4
    h = DepHead(d, ["r"], np.random.default_rng(0), arc_dim=d)
    _zero(h)
    h.params["dep.arc.wl"].data[:] = np.eye(d)
    h.params["dep.arc.wr"].data[:] = np.eye(d)
    h.params["dep.arc.U"].data[0] = np.eye(d)
    e = np.eye(d)
    sent = Sentence(["a", "b", "c", "d"], dep=[(-1, "r"), (0, "r"), (0, "r"), (0, "r")])
    b = _batch([sent])
    # words 0 and 2 share e0, words 1 and 3 share e1; root is orthogonal to all
    words = T.Tensor(np.stack([e[0], e[1], 2 * e[0], 3 * e[1]])[None])
    root = T.Tensor(0.5 * e[3][None])
    heads = [hd for hd, _ in h.decode(words, root, b)[0]]
    # hand computation: dot products with the non-self candidates
    assert heads == [2, 3, 0, 1]


def test_span_head_zero_weights_and_decode():
    h = SpanHead("ner", 8, ["P", "O"], np.random.default_rng(0), max_width=8)
    _zero(h)
    b = _batch([S3])
    words, root = _words(b, 8)
    assert h.loss(words, root, b).item() == pytest.approx(math.log(3))
    assert h.decode(words, root, b) == [[]]
    h.scorer.params["ner.span.b"].data[:] = [0.0, -1.0, -1.0]
    assert h.decode(words, root, b) == [[]]


def test_greedy_spans_rules():
    assert greedy_spans([(5.0, 0, 2, "A"), (3.0, 1, 3, "B")], "overlap") == [(0, 2, "A")]
    assert greedy_spans([(2.0, 0, 3, "NP"), (1.0, 2, 5, "NP")], "cross") == [(0, 3, "NP")]
    assert greedy_spans([(2.0, 0, 3, "NP"), (1.0, 1, 2, "NP")], "cross") == [(0, 3, "NP"), (1, 2, "NP")]
    assert greedy_spans([(1.0, 0, 0, "A"), (1.0, 0, 0, "B")], "cross") == [(0, 0, "A")]


def test_span_decode_recovers_dominant_span():
    h = SpanHead("ner", 4, ["P"], np.random.default_rng(0))
    _zero(h)
    b = _batch([S3])
    words, root = _words(b, 4)
    bias = np.zeros((1, 3, 3, 2))
    bias[..., 0] = 1.0            # NONE wins everywhere ...
    bias[0, 0, 1, 1] = 100.0      # ... except for one dominant span
    scorer = h.scorer
    h.scorer = lambda left, right: T.add(scorer(left, right), bias)
    assert h.decode(words, root, b) == [[(0, 1, "P")]]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_decoded_structures_are_well_formed(seed):
    rng = np.random.default_rng(seed)
    sent = Sentence([f"w{i}" for i in range(7)])
    b = _batch([sent])
    words = T.Tensor(rng.normal(size=(1, 7, 8)) * 3)
    root = T.Tensor(rng.normal(size=(1, 8)))
    ner = SpanHead("ner", 8, ["P", "O"], rng).decode(words, root, b)[0]
    for i, (b0, e0, _) in enumerate(ner):
        for b1, e1, _ in ner[i + 1:]:
            assert e0 < b1 or e1 < b0
    con = SpanHead("con", 8, ["NP", "VP"], rng).decode(words, root, b)[0]
    for b0, e0, _ in con:
        for b1, e1, _ in con:
            assert not (b0 < b1 <= e0 < e1)
    dep = DepHead(8, ["r"], rng).decode(words, root, b)[0]
    assert len(dep) == 7 and all(-1 <= hd < 7 and hd != i for i, (hd, _) in enumerate(dep))


def test_srl_zero_weights():
    h = SrlHead(8, ["A0", "A1"], np.random.default_rng(0))
    _zero(h)
    b = _batch([S3])
    words, root = _words(b, 8)
    assert h.loss(words, root, b).item() == pytest.approx(math.log(2) + math.log(3))


def test_srl_decode_recovers_dominant_frame():
    h = SrlHead(4, ["A0", "A1"], np.random.default_rng(0))
    _zero(h)
    sent = Sentence(["a", "b", "c"], srl=[Frame(1, [(2, 2, "A1")])])
    b = _batch([sent])
    X = np.zeros((1, 3, 4))
    X[0, 1, 0] = 1.0   # marks the predicate
    X[0, 2, 1] = 1.0   # marks the argument
    h.params["srl.wp"].data[0, 0] = 10.0
    h.params["srl.bp"].data[0] = -5.0
    h.params["srl.wa"].data[1, 0] = 10.0
    h.params["srl.role_s"].data[1, 2] = 20.0
    h.params["srl.role_b"].data[:] = [0.0, -30.0, -30.0]
    frames = h.decode(T.Tensor(X), T.Tensor(np.zeros((1, 4))), b)[0]
    assert [(f.predicate, f.args) for f in frames] == [(1, [(2, 2, "A1")])]


def test_width_index():
    assert [width_index(w) for w in (1, 2, 30, 31, 99)] == [0, 1, 29, 29, 29]


@pytest.mark.parametrize("task", ["pos", "ner", "dep", "con", "srl"])
def test_head_gradients(task, corpus):
    from headlab.corpus import label_inventory
    rng = np.random.default_rng(4)
    sents = corpus[:3]
    b = make_batch(sents, build_vocab(sents), 64)
    h = make_head(task, 8, label_inventory(sents, task), rng)
    words, root = _words(b, 8, seed=9)
    params = [words, root] + list(h.params.values())
    assert fd_check(lambda: h.loss(words, root, b), params, rng, coords=40) < 1e-6
    assert h.loss(words, root, b).item() >= 0.0


def test_scores_and_prediction_json():
    g = [S3]
    assert score("pos", g, [["X", "Y", "Y"]])["main"] == pytest.approx(2 / 3)
    d = score("dep", g, [[(1, "r1"), (-1, "root"), (0, "r2")]])
    assert d["uas"] == pytest.approx(2 / 3) and d["las"] == pytest.approx(2 / 3)
    assert score("ner", g, [[(0, 1, "P")]])["f1"] == 1.0
    assert score("con", g, [[(0, 1, "NP")]])["f1"] == pytest.approx(2 / 3)
    assert score("srl", g, [[Frame(1, [(0, 0, "A0")])]])["f1"] == pytest.approx(2 / 3)
    assert prediction_json("srl", [Frame(1, [(0, 0, "A0")])]) == [{"predicate": 1, "args": [[0, 0, "A0"]]}]
    with pytest.raises(ValueError):
        make_head("xyz", 4, [], np.random.default_rng(0))
