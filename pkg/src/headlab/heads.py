"""Task decoders that read word vectors from the shared encoder.

POS is a linear tagger, DEP and NER/CON score with biaffine forms, SRL ranks
(predicate, argument span) pairs with a linear scorer.  Decoding is greedy
throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import Frame, Sentence
from .encoder import NEG_INF, Batch
from .tensor import Tensor

NONE = "<none>"
SRL_MAX_WIDTH = 30
SRL_WIDTH_DIM = 20
SRL_PRED_RATIO = 0.4
SRL_ARG_RATIO = 0.8


def _w(rng, shape, fan_in):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


class Biaffine:
    """score(i, j) = pl(h_i)^T U pr(h_j) + u^T [pl(h_i); pr(h_j)] + b, one score per output."""

    def __init__(self, prefix: str, d_in: int, d_proj: int, n_out: int, rng):
        k = d_proj
        self.params = {
            f"{prefix}.wl": T.parameter(_w(rng, (d_in, k), d_in)),
            f"{prefix}.bl": T.parameter(np.zeros(k)),
            f"{prefix}.wr": T.parameter(_w(rng, (d_in, k), d_in)),
            f"{prefix}.br": T.parameter(np.zeros(k)),
            f"{prefix}.U": T.parameter(_w(rng, (n_out, k, k), k)),
            f"{prefix}.ul": T.parameter(np.zeros((k, n_out))),
            f"{prefix}.ur": T.parameter(np.zeros((k, n_out))),
            f"{prefix}.b": T.parameter(np.zeros(n_out)),
        }
        self.prefix = prefix

    def __getitem__(self, name):
        return self.params[f"{self.prefix}.{name}"]

    def __call__(self, left: Tensor, right: Tensor) -> Tensor:
        """(B, n, d) x (B, m, d) -> (B, n, m, n_out)."""
        B, n, _ = left.shape
        m = right.shape[1]
        k = self["U"].shape[-1]
        L = left @ self["wl"] + self["bl"]
        R = right @ self["wr"] + self["br"]
        LU = T.reshape(L, (B, 1, n, k)) @ self["U"]
        bil = LU @ T.transpose(T.reshape(R, (B, 1, m, k)))
        bil = T.transpose(bil, (0, 2, 3, 1))
        lin_l = T.reshape(L @ self["ul"], (B, n, 1, -1))
        lin_r = T.reshape(R @ self["ur"], (B, 1, m, -1))
        return bil + lin_l + lin_r + self["b"]


class TaskHead:
    task = ""

    def __init__(self, labels: list[str]):
        self.labels = list(labels)
        self.index = {lab: i for i, lab in enumerate(self.labels)}
        self.params: dict[str, Tensor] = {}

    def label_id(self, lab: str) -> int:
        try:
            return self.index[lab]
        except KeyError:
            raise ValueError(f"{self.task}: label {lab!r} not in inventory") from None


class PosHead(TaskHead):
    task = "pos"

    def __init__(self, d: int, labels: list[str], rng):
        super().__init__(labels)
        self.params = {"pos.w": T.parameter(_w(rng, (d, len(labels)), d)),
                       "pos.b": T.parameter(np.zeros(len(labels)))}

    def logits(self, words: Tensor) -> Tensor:
        return words @ self.params["pos.w"] + self.params["pos.b"]

    def loss(self, words, root, batch: Batch) -> Tensor:
        tgt = np.zeros(batch.word_mask.shape, dtype=np.int64)
        for b, s in enumerate(batch.sentences):
            tgt[b, :len(s)] = [self.label_id(t) for t in s.pos]
        return T.cross_entropy(self.logits(words), tgt, batch.word_mask)

    def decode(self, words, root, batch: Batch) -> list[list[str]]:
        best = self.logits(words).data.argmax(-1)
        return [[self.labels[k] for k in best[b, :n]] for b, n in enumerate(batch.lengths)]


class DepHead(TaskHead):
    """Arc scores over candidates [root] + words, relation scores at a chosen head."""
    task = "dep"

    def __init__(self, d: int, labels: list[str], rng, arc_dim: int = 64, rel_dim: int = 32):
        super().__init__(labels)
        self.arc = Biaffine("dep.arc", d, arc_dim, 1, rng)
        self.rel = Biaffine("dep.rel", d, rel_dim, len(labels), rng)
        self.params = {**self.arc.params, **self.rel.params}

    @staticmethod
    def candidates(words, root) -> Tensor:
        B, _, d = words.shape
        return T.concat([T.reshape(root, (B, 1, d)), words], axis=1)

    def arc_scores(self, words, root, batch: Batch) -> Tensor:
        cands = self.candidates(words, root)
        s = T.reshape(self.arc(words, cands), words.shape[:2] + (cands.shape[1],))
        cand_ok = np.concatenate([np.ones((len(batch), 1), bool), batch.word_mask], axis=1)
        return s + np.where(cand_ok, 0.0, NEG_INF)[:, None, :]

    def rel_at(self, words, root, heads: np.ndarray) -> Tensor:
        """Relation logits (B, W, R) for each dependent at candidate index ``heads``."""
        cands = self.candidates(words, root)
        full = self.rel(words, cands)
        onehot = np.zeros(full.shape[:3] + (1,))
        np.put_along_axis(onehot, heads[..., None, None], 1.0, axis=2)
        return T.tsum(T.mul(full, onehot), axis=2)

    def loss(self, words, root, batch: Batch) -> Tensor:
        shape = batch.word_mask.shape
        gold_h = np.zeros(shape, dtype=np.int64)
        gold_r = np.zeros(shape, dtype=np.int64)
        for b, s in enumerate(batch.sentences):
            gold_h[b, :len(s)] = [h + 1 for h, _ in s.dep]
            gold_r[b, :len(s)] = [self.label_id(r) for _, r in s.dep]
        arc = T.cross_entropy(self.arc_scores(words, root, batch), gold_h, batch.word_mask)
        rel = T.cross_entropy(self.rel_at(words, root, gold_h), gold_r, batch.word_mask)
        return arc + rel

    def decode(self, words, root, batch: Batch) -> list[list[tuple[int, str]]]:
        scores = self.arc_scores(words, root, batch).data.copy()
        W = scores.shape[1]
        scores[:, np.arange(W), np.arange(W) + 1] = -np.inf  # a word never heads itself
        heads = scores.argmax(-1)
        rels = self.rel_at(words, root, heads).data.argmax(-1)
        return [[(int(heads[b, i]) - 1, self.labels[rels[b, i]]) for i in range(n)]
                for b, n in enumerate(batch.lengths)]


def greedy_spans(cands: list[tuple[float, int, int, str]], forbid: str) -> list[tuple[int, int, str]]:
    """Keep the highest-scoring spans that do not conflict with already kept ones.

    ``forbid`` is "overlap" (any shared word) or "cross" (partial overlap;
    nesting allowed).  Ties go to the earlier, shorter span.
    """
    kept: list[tuple[int, int, str]] = []
    for score, b, e, lab in sorted(cands, key=lambda c: (-c[0], c[1], c[2])):
        ok = True
        for kb, ke, _ in kept:
            if forbid == "overlap":
                clash = b <= ke and kb <= e
            else:
                clash = (b < kb <= e < ke) or (kb < b <= ke < e) or (b == kb and e == ke)
            if clash:
                ok = False
                break
        if ok:
            kept.append((b, e, lab))
    return sorted(kept)


class SpanHead(TaskHead):
    """Biaffine start/end span labeller with a NONE class (NER, height-3 CON)."""

    def __init__(self, task: str, d: int, labels: list[str], rng, max_width: int = 8,
                 proj_dim: int = 64):
        super().__init__([NONE] + list(labels))
        self.task = task
        self.max_width = max_width
        self.forbid = "overlap" if task == "ner" else "cross"
        self.scorer = Biaffine(f"{task}.span", d, proj_dim, len(self.labels), rng)
        self.params = dict(self.scorer.params)

    def valid(self, batch: Batch) -> np.ndarray:
        W = batch.word_mask.shape[1]
        b = np.arange(W)[:, None]
        e = np.arange(W)[None, :]
        shape_ok = (b <= e) & (e - b < self.max_width)
        return shape_ok[None] & batch.word_mask[:, None, :] & batch.word_mask[:, :, None]

    def loss(self, words, root, batch: Batch) -> Tensor:
        scores = self.scorer(words, words)
        valid = self.valid(batch)
        tgt = np.zeros(valid.shape, dtype=np.int64)
        for i, s in enumerate(batch.sentences):
            for b, e, lab in getattr(s, self.task):
                if e - b < self.max_width:
                    tgt[i, b, e] = self.label_id(lab)
        return T.cross_entropy(scores, tgt, valid)

    def decode(self, words, root, batch: Batch) -> list[list[tuple[int, int, str]]]:
        scores = self.scorer(words, words).data
        valid = self.valid(batch)
        out = []
        for i in range(len(batch)):
            cands = []
            for b, e in zip(*np.nonzero(valid[i])):
                k = int(scores[i, b, e].argmax())
                if k != 0:
                    cands.append((float(scores[i, b, e, k]), int(b), int(e), self.labels[k]))
            out.append(greedy_spans(cands, self.forbid))
        return out


def width_index(width: int, max_width: int = SRL_MAX_WIDTH) -> int:
    return min(width, max_width) - 1


@dataclass
class _SrlCands:
    spans: list[tuple[int, int]]
    feat: Tensor
    pred_score: Tensor
    arg_score: Tensor


class SrlHead(TaskHead):
    """Predicate identification plus (predicate, span) role ranking.

    Role logits are a linear function of [predicate vector; span mean; width
    embedding]; non-NONE roles also add the predicate and argument unary
    scores so that candidate pruning is trained through the role loss.
    """
    task = "srl"

    def __init__(self, d: int, labels: list[str], rng, max_width: int = SRL_MAX_WIDTH,
                 width_dim: int = SRL_WIDTH_DIM, pred_ratio: float = SRL_PRED_RATIO,
                 arg_ratio: float = SRL_ARG_RATIO):
        super().__init__([NONE] + list(labels))
        self.max_width = max_width
        self.pred_ratio = pred_ratio
        self.arg_ratio = arg_ratio
        R = len(self.labels)
        f = d + width_dim
        self.params = {
            "srl.width": T.parameter(rng.normal(0.0, 0.1, size=(max_width, width_dim))),
            "srl.wp": T.parameter(_w(rng, (d, 1), d)),
            "srl.bp": T.parameter(np.zeros(1)),
            "srl.wa": T.parameter(_w(rng, (f, 1), f)),
            "srl.ba": T.parameter(np.zeros(1)),
            "srl.role_p": T.parameter(_w(rng, (d, R), d)),
            "srl.role_s": T.parameter(_w(rng, (f, R), f)),
            "srl.role_b": T.parameter(np.zeros(R)),
        }
        self._not_none = np.r_[0.0, np.ones(R - 1)]

    def _candidates(self, X: Tensor, n: int) -> _SrlCands:
        p = self.params
        spans = [(b, e) for b in range(n) for e in range(b, min(n, b + self.max_width))]
        M = np.zeros((len(spans), n))
        for k, (b, e) in enumerate(spans):
            M[k, b:e + 1] = 1.0 / (e - b + 1)
        widths = [width_index(e - b + 1, self.max_width) for b, e in spans]
        feat = T.concat([T.matmul(M, X), T.embedding(p["srl.width"], widths)], axis=-1)
        pred_score = T.reshape(X @ p["srl.wp"] + p["srl.bp"], (n,))
        arg_score = T.reshape(feat @ p["srl.wa"] + p["srl.ba"], (len(spans),))
        return _SrlCands(spans, feat, pred_score, arg_score)

    def _prune(self, c: _SrlCands, n: int, gold: list[Frame] | None):
        k_p = math.ceil(self.pred_ratio * n)
        k_a = math.ceil(self.arg_ratio * n)
        preds = list(np.argsort(-c.pred_score.data, kind="stable")[:k_p])
        args = list(np.argsort(-c.arg_score.data, kind="stable")[:k_a])
        if gold is not None:
            index = {s: k for k, s in enumerate(c.spans)}
            for f in gold:
                if f.predicate not in preds:
                    preds.append(f.predicate)
                for b, e, _ in f.args:
                    k = index.get((b, e))
                    if k is not None and k not in args:
                        args.append(k)
        return sorted(int(x) for x in preds), sorted(int(x) for x in args)

    def _role_logits(self, X, c: _SrlCands, preds, args) -> Tensor:
        p = self.params
        P, S = len(preds), len(args)
        R = len(self.labels)
        lp = T.take(X, preds) @ p["srl.role_p"]
        ls = T.take(c.feat, args) @ p["srl.role_s"]
        unary = T.reshape(T.take(c.pred_score, preds), (P, 1)) + T.reshape(T.take(c.arg_score, args), (1, S))
        return (T.reshape(lp, (P, 1, R)) + T.reshape(ls, (1, S, R)) + p["srl.role_b"]
                + T.reshape(unary, (P, S, 1)) * self._not_none)

    def sentence_loss(self, X: Tensor, s: Sentence) -> Tensor:
        n = len(s)
        c = self._candidates(X, n)
        flags = np.zeros(n)
        for f in s.srl:
            flags[f.predicate] = 1.0
        pred_loss = T.binary_cross_entropy_logits(c.pred_score, flags)
        preds, args = self._prune(c, n, s.srl)
        logits = self._role_logits(X, c, preds, args)
        tgt = np.zeros(logits.shape[:2], dtype=np.int64)
        pi = {p: i for i, p in enumerate(preds)}
        si = {c.spans[a]: j for j, a in enumerate(args)}
        for f in s.srl:
            for b, e, r in f.args:
                if (b, e) in si:
                    tgt[pi[f.predicate], si[(b, e)]] = self.label_id(r)
        return pred_loss + T.cross_entropy(logits, tgt)

    def loss(self, words, root, batch: Batch) -> Tensor:
        losses = [self.sentence_loss(T.getitem(words, (i, slice(0, len(s)))), s)
                  for i, s in enumerate(batch.sentences)]
        total = losses[0]
        for x in losses[1:]:
            total = total + x
        return T.scale(total, 1.0 / len(losses))

    def sentence_decode(self, X: Tensor, n: int) -> list[Frame]:
        c = self._candidates(X, n)
        preds, args = self._prune(c, n, None)
        preds = [p for p in preds if c.pred_score.data[p] > 0.0]
        if not preds or not args:
            return []
        logits = self._role_logits(X, c, preds, args).data
        frames = []
        for i, p in enumerate(preds):
            cands = []
            for j, a in enumerate(args):
                k = int(logits[i, j].argmax())
                if k != 0:
                    b, e = c.spans[a]
                    cands.append((float(logits[i, j, k]), b, e, self.labels[k]))
            frames.append(Frame(p, greedy_spans(cands, "overlap")))
        return frames

    def decode(self, words, root, batch: Batch) -> list[list[Frame]]:
        return [self.sentence_decode(T.getitem(words, (i, slice(0, n))), int(n))
                for i, n in enumerate(batch.lengths)]


def make_head(task: str, d: int, labels: list[str], rng, max_span_width: int = 8) -> TaskHead:
    if task == "pos":
        return PosHead(d, labels, rng)
    if task == "dep":
        return DepHead(d, labels, rng)
    if task in ("ner", "con"):
        return SpanHead(task, d, labels, rng, max_width=max_span_width)
    if task == "srl":
        return SrlHead(d, labels, rng)
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------- scoring

def _f1(tp: int, n_pred: int, n_gold: int) -> float:
    if n_pred == 0 and n_gold == 0:
        return 1.0
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def score(task: str, gold: list[Sentence], pred: list) -> dict[str, float]:
    """POS accuracy, NER/CON labeled span F1 (CON over height-3 spans), DEP LAS/UAS,
    SRL micro F1 of (predicate, begin, end, role)."""
    if task == "pos":
        total = sum(len(s) for s in gold)
        hit = sum(a == b for s, p in zip(gold, pred) for a, b in zip(s.pos, p))
        return {"acc": hit / total, "main": hit / total}
    if task == "dep":
        total = sum(len(s) for s in gold)
        uas = sum(g[0] == p[0] for s, ps in zip(gold, pred) for g, p in zip(s.dep, ps))
        las = sum(g == p for s, ps in zip(gold, pred) for g, p in zip(s.dep, ps))
        return {"uas": uas / total, "las": las / total, "main": las / total}
    if task in ("ner", "con"):
        tp = n_p = n_g = 0
        for s, ps in zip(gold, pred):
            g = set(map(tuple, getattr(s, task)))
            p = set(map(tuple, ps))
            tp += len(g & p)
            n_p += len(p)
            n_g += len(g)
        f = _f1(tp, n_p, n_g)
        return {"f1": f, "main": f}
    if task == "srl":
        tp = n_p = n_g = 0
        for s, frames in zip(gold, pred):
            g = {(f.predicate, b, e, r) for f in s.srl for b, e, r in f.args}
            p = {(f.predicate, b, e, r) for f in frames for b, e, r in f.args}
            tp += len(g & p)
            n_p += len(p)
            n_g += len(g)
        f = _f1(tp, n_p, n_g)
        return {"f1": f, "main": f}
    raise ValueError(f"unknown task {task!r}")


def prediction_json(task: str, pred) -> object:
    """System output in the corpus JSONL layout for one sentence."""
    if task == "pos":
        return list(pred)
    if task == "dep":
        return [[h, r] for h, r in pred]
    if task in ("ner", "con"):
        return [list(s) for s in pred]
    return [{"predicate": f.predicate, "args": [list(a) for a in f.args]} for f in pred]
