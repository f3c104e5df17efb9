"""Parameter-free probes of individual attention heads.

Attention probes score how often a head's most-attended word lands on the
other end of a gold dependency arc or predicate-argument pair.  Attended-value
probes classify gold spans by cosine similarity between the span's mean
attended vector and per-label centroids built from the same corpus.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Frame, Sentence, SubtokenMap, label_frequencies
from .encoder import AttentionSnapshot

ATTENTION_TASKS = ("dep", "srl")
VALUE_TASKS = ("pos", "ner", "con")
KEY_MODES = ("sum", "mean")


class ProbeError(ValueError):
    pass


# ---------------------------------------------------------------- merging

def merge_attention(A: np.ndarray, smap: SubtokenMap, key_mode: str = "sum",
                    keep_bos: bool = False) -> np.ndarray:
    """Collapse a subtoken attention matrix to words.

    Query rows of a word are averaged, key columns summed (or averaged with
    ``key_mode="mean"``).  Sentinel rows and columns are dropped and every row is
    renormalized.  With ``keep_bos`` the BOS position survives as index 0.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ProbeError(f"attention must be square, got {A.shape}")
    if A.shape[0] != smap.length:
        raise ProbeError(f"map covers {smap.length} positions but attention is {A.shape[0]}x{A.shape[1]}")
    if key_mode not in KEY_MODES:
        raise ProbeError(f"key_mode must be one of {KEY_MODES}")
    smap.validate()
    groups = [list(range(s0, s1)) for s0, s1 in smap.ranges]
    if keep_bos:
        if smap.bos is None:
            raise ProbeError("keep_bos requested but the map has no BOS position")
        groups = [[smap.bos]] + groups
    n = len(groups)
    rows = np.stack([A[g].mean(axis=0) for g in groups])
    combine = np.sum if key_mode == "sum" else np.mean
    W = np.stack([combine(rows[:, g], axis=1) for g in groups], axis=1)
    totals = W.sum(axis=1, keepdims=True)
    # a row whose mass sat entirely on sentinels carries no signal; spread it evenly
    empty = totals[:, 0] <= 0
    W[empty] = 1.0 / n
    totals[empty] = 1.0
    return W / totals


def row_argmax(W: np.ndarray) -> np.ndarray:
    """Most-attended column per row; ties go to the lowest index."""
    return np.argmax(W, axis=1)


# ---------------------------------------------------------------- attention probes

def dep_arcs(sentence: Sentence, include_root: bool = False) -> list[tuple[int, int, str]]:
    """Gold arcs as (head, dependent, label).

    Root arcs are dropped unless ``include_root``, in which case indices are
    shifted by one so that 0 is the BOS row.
    """
    out = []
    for d, (h, lab) in enumerate(sentence.dep):
        if include_root:
            out.append((h + 1, d + 1, lab))
        elif h >= 0:
            out.append((h, d, lab))
    return out


def dep_hits(g: Sequence[int], arcs) -> list[bool]:
    return [bool(g[h] == d or g[d] == h) for h, d, *_ in arcs]


def dep_probe(W: np.ndarray, arcs) -> float:
    """Fraction of undirected gold arcs found by row argmax; NaN without arcs."""
    hits = dep_hits(row_argmax(W), arcs)
    return float(np.mean(hits)) if hits else float("nan")


def srl_pairs(frames: Sequence[Frame]) -> list[tuple[int, int, int, str]]:
    return [(f.predicate, b, e, lab) for f in frames for b, e, lab in f.args]


def srl_hits(g: Sequence[int], pairs) -> list[bool]:
    out = []
    for p, b, e, *_ in pairs:
        out.append(bool(b <= g[p] <= e or any(g[t] == p for t in range(b, e + 1))))
    return out


def srl_probe(W: np.ndarray, frames: Sequence[Frame]) -> float:
    hits = srl_hits(row_argmax(W), srl_pairs(frames))
    return float(np.mean(hits)) if hits else float("nan")


# ---------------------------------------------------------------- attended values

def attended_values(A: np.ndarray, V: np.ndarray, smap: SubtokenMap) -> np.ndarray:
    """Rows of A·V averaged per word."""
    A = np.asarray(A, dtype=float)
    V = np.asarray(V, dtype=float)
    if A.ndim != 2 or V.ndim != 2 or A.shape[1] != V.shape[0] or A.shape[0] != smap.length:
        raise ProbeError(f"shape mismatch: A{A.shape} V{V.shape} map length {smap.length}")
    H = A @ V
    return np.stack([H[s0:s1].mean(axis=0) for s0, s1 in smap.ranges])


def span_vector(H: np.ndarray, b: int, e: int) -> np.ndarray:
    if b < 0 or e < b or e >= H.shape[0]:
        raise ProbeError(f"span ({b},{e}) outside a sentence of {H.shape[0]} words")
    return H[b:e + 1].mean(axis=0)


@dataclass
class LabelCentroids:
    labels: list[str]
    C: np.ndarray
    n: np.ndarray

    def index(self, label: str) -> int:
        return self.labels.index(label)


def pseudo_cluster(H_list: Sequence[np.ndarray], spans_list, labels: Sequence[str] | None = None
                   ) -> LabelCentroids:
    """Per-label mean of span vectors; only labels seen at least once are kept.

    ``labels`` fixes the label id order (default: sorted).
    """
    sums: dict[str, np.ndarray] = {}
    counts: Counter = Counter()
    for H, spans in zip(H_list, spans_list):
        for b, e, lab in spans:
            v = span_vector(H, b, e)
            sums[lab] = sums[lab] + v if lab in sums else v.copy()
            counts[lab] += 1
    order = [l for l in (labels if labels is not None else sorted(sums)) if counts[l] > 0]
    if not order:
        raise ProbeError("no spans to cluster")
    C = np.stack([sums[l] / counts[l] for l in order])
    return LabelCentroids(order, C, np.array([counts[l] for l in order]))


def av_predict(cents: LabelCentroids, vectors: np.ndarray) -> np.ndarray:
    """Label ids by max cosine similarity; -1 marks zero-norm vectors."""
    X = np.atleast_2d(np.asarray(vectors, dtype=float))
    xn = np.linalg.norm(X, axis=1)
    cn = np.linalg.norm(cents.C, axis=1)
    cn = np.where(cn > 0, cn, 1.0)
    sims = (X @ cents.C.T) / cn[None, :]
    pred = np.argmax(sims, axis=1)  # the positive row scale cannot change argmax
    pred[xn == 0] = -1
    return pred


def av_probe(cents: LabelCentroids, vector: np.ndarray) -> str | None:
    """Predicted label for one span vector, or None for a zero vector."""
    k = int(av_predict(cents, vector)[0])
    return None if k < 0 else cents.labels[k]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# ---------------------------------------------------------------- corpus-wide

def gold_spans(sentence: Sentence, task: str) -> list[tuple[int, int, str]]:
    if task == "pos":
        return [(i, i, p) for i, p in enumerate(sentence.pos)]
    if task in ("ner", "con"):
        return list(getattr(sentence, task))
    raise ProbeError(f"task {task!r} has no attended-value probe")


@dataclass
class ProbeReport:
    """Per-label head accuracies; ``acc`` is (runs, layers, heads, labels), NaN
    where a head had nothing to score for a label."""
    task: str
    labels: list[str]
    support: dict[str, int]
    acc: np.ndarray
    omitted: list[str] = field(default_factory=list)
    warnings: int = 0

    @property
    def runs(self) -> int:
        return self.acc.shape[0]

    def _label_acc(self, label: str) -> np.ndarray:
        return np.nan_to_num(self.acc[..., self.labels.index(label)], nan=0.0)

    def run_best(self, label: str) -> list[tuple[float, int, int]]:
        """(accuracy, layer, head) of the best head per run; ties to the earliest head."""
        out = []
        for a in self._label_acc(label):
            k = int(np.argmax(a))
            l, h = divmod(k, a.shape[1])
            out.append((float(a[l, h]), l, h))
        return out

    def selected(self, label: str) -> float:
        return float(np.mean([b[0] for b in self.run_best(label)]))

    def layer_scores(self, label: str) -> np.ndarray:
        return self._label_acc(label).max(axis=2).mean(axis=0)

    def best_layer(self, label: str) -> int:
        return int(np.argmax(self.layer_scores(label)))

    def scores(self) -> dict[str, float]:
        return {l: self.selected(l) for l in self.labels}

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "labels": [{
                "label": l,
                "support": self.support[l],
                "selected_score": self.selected(l),
                "best_layer": self.best_layer(l),
                "layer_scores": self.layer_scores(l).tolist(),
                "best_heads": [{"run": r, "layer": ly, "head": h, "accuracy": a}
                               for r, (a, ly, h) in enumerate(self.run_best(l))],
            } for l in self.labels],
            "accuracy": np.where(np.isnan(self.acc), None, self.acc).tolist(),
            "omitted": self.omitted,
            "zero_norm_warnings": self.warnings,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ProbeReport":
        acc = np.array(obj["accuracy"], dtype=float)
        labels = [e["label"] for e in obj["labels"]]
        return cls(obj["task"], labels, {e["label"]: e["support"] for e in obj["labels"]},
                   acc.reshape(acc.shape[:3] + (len(labels),)),
                   list(obj.get("omitted", [])), int(obj.get("zero_norm_warnings", 0)))

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n")
        return path

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "label", "support", "run", "head_layer", "head_index",
                        "accuracy", "selected_score"])
            for l in self.labels:
                sel = self.selected(l)
                k = self.labels.index(l)
                for r in range(self.runs):
                    for ly in range(self.acc.shape[1]):
                        for h in range(self.acc.shape[2]):
                            a = self.acc[r, ly, h, k]
                            w.writerow([self.task, l, self.support[l], r, ly, h,
                                        "" if np.isnan(a) else f"{a:.6f}", f"{sel:.6f}"])
        return path


def _head_label_acc_attention(task, snaps, sentences, layer, head, labels, key_mode, include_root):
    hits: Counter = Counter()
    total: Counter = Counter()
    for snap, s in zip(snaps, sentences):
        W = merge_attention(snap.attn[layer][head], snap.map, key_mode,
                            keep_bos=include_root and task == "dep")
        g = row_argmax(W)
        if task == "dep":
            items = dep_arcs(s, include_root)
            flags = dep_hits(g, items)
        else:
            items = srl_pairs(s.srl)
            flags = srl_hits(g, items)
        for item, ok in zip(items, flags):
            total[item[-1]] += 1
            hits[item[-1]] += ok
    return [hits[l] / total[l] if total[l] else np.nan for l in labels]


def _head_label_acc_values(task, snaps, sentences, layer, head, labels):
    Hs = [attended_values(sn.attn[layer][head], sn.values[layer][head], sn.map) for sn in snaps]
    spans = [gold_spans(s, task) for s in sentences]
    cents = pseudo_cluster(Hs, spans, labels)
    vecs, gold = [], []
    for H, sp in zip(Hs, spans):
        for b, e, lab in sp:
            vecs.append(span_vector(H, b, e))
            gold.append(lab)
    pred = av_predict(cents, np.stack(vecs))
    hits: Counter = Counter()
    total: Counter = Counter()
    skipped = 0
    for k, lab in zip(pred, gold):
        if k < 0:
            skipped += 1
            continue
        total[lab] += 1
        hits[lab] += cents.labels[k] == lab
    return [hits[l] / total[l] if total[l] else np.nan for l in labels], skipped


def probe_all(runs: Sequence[Sequence[AttentionSnapshot]], sentences: Sequence[Sentence],
              task: str, labels: Sequence[str] | None = None, key_mode: str = "sum",
              include_root: bool = False) -> ProbeReport:
    """Probe every head of every run against one task's gold annotation.

    ``runs`` holds one snapshot list per trained model, aligned with ``sentences``.
    """
    if task not in ATTENTION_TASKS + VALUE_TASKS:
        raise ProbeError(f"unknown probe task {task!r}")
    if not runs:
        raise ProbeError("no runs to probe")
    for s in sentences:
        if not s.has(task):
            raise ProbeError(f"sentence {' '.join(s.tokens)!r} lacks {task} annotation")
    freq = label_frequencies(sentences, task)
    if task == "dep" and not include_root:
        freq = Counter(lab for s in sentences for *_, lab in dep_arcs(s))
    inventory = list(labels) if labels is not None else sorted(freq)
    kept = [l for l in inventory if freq[l] > 0]
    omitted = [l for l in inventory if freq[l] == 0]
    first = runs[0][0]
    L, H = len(first.attn), len(first.attn[0])
    acc = np.full((len(runs), L, H, len(kept)), np.nan)
    warnings = 0
    for r, snaps in enumerate(runs):
        if len(snaps) != len(sentences):
            raise ProbeError(f"run {r} has {len(snaps)} snapshots for {len(sentences)} sentences")
        for l in range(L):
            for h in range(H):
                if task in ATTENTION_TASKS:
                    acc[r, l, h] = _head_label_acc_attention(task, snaps, sentences, l, h, kept,
                                                             key_mode, include_root)
                else:
                    acc[r, l, h], skipped = _head_label_acc_values(task, snaps, sentences, l, h, kept)
                    warnings += skipped
    return ProbeReport(task, kept, {l: int(freq[l]) for l in kept}, acc, omitted, warnings)


# ---------------------------------------------------------------- differences

@dataclass
class DiffReport:
    labels: list[str]
    frequency: dict[str, int]
    diffs: dict[str, dict[str, float | None]]

    def not_comparable(self) -> dict[str, list[str]]:
        return {m: [l for l, v in d.items() if v is None] for m, d in self.diffs.items()}

    def to_json(self) -> dict:
        return {"labels": self.labels, "frequency": self.frequency, "diffs": self.diffs,
                "not_comparable": self.not_comparable()}

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "label", "frequency", "diff"])
            for m, d in self.diffs.items():
                for l in self.labels:
                    v = d[l]
                    w.writerow([m, l, self.frequency[l], "not-comparable" if v is None else f"{v:.6f}"])
        return path


def diff_report(reports: dict[str, ProbeReport], baseline: ProbeReport,
                frequency: Counter | dict) -> DiffReport:
    """Model score minus baseline score per label, most frequent labels first."""
    base = baseline.scores()
    labels = set(base)
    for rep in reports.values():
        labels.update(rep.labels)
    order = sorted(labels, key=lambda l: (-frequency.get(l, 0), l))
    diffs = {}
    for name, rep in reports.items():
        sc = rep.scores()
        diffs[name] = {l: (sc[l] - base[l]) if l in sc and l in base else None for l in order}
    return DiffReport(order, {l: int(frequency.get(l, 0)) for l in order}, diffs)
