"""Shared gated encoder with one decoder per task."""
from __future__ import annotations

import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import TASKS, Sentence, Vocab
from .encoder import Batch, Encoder, EncoderConfig, make_batch, split_snapshots, word_dropout, word_embed
from .gates import DEFAULT_ALPHA0, DEFAULT_L, DEFAULT_R, GateParams, eval_gate, sample_gate
from .heads import make_head, prediction_json, score
from .optim import load_checkpoint, save_checkpoint
from .tensor import Tensor

_U_EPS = 1e-12


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named use of a run seed."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


class MultiTaskModel:
    def __init__(self, vocab: Vocab, cfg: EncoderConfig, labels: dict[str, list[str]],
                 tasks: Sequence[str], seed: int = 0, max_span_width: int = 8,
                 alpha0: float = DEFAULT_ALPHA0, l: float = DEFAULT_L, r: float = DEFAULT_R):
        for t in tasks:
            if t not in TASKS:
                raise ValueError(f"unknown task {t!r}")
        self.vocab = vocab
        self.cfg = cfg
        self.cfg.vocab_size = len(vocab)
        self.tasks = [t for t in TASKS if t in tasks]
        self.labels = {t: list(labels[t]) for t in self.tasks}
        self.seed = seed
        self.max_span_width = max_span_width
        rng = substream(seed, "init")
        self.encoder = Encoder(cfg, rng)
        self.gates = GateParams.init(cfg.layers, cfg.heads, alpha0, l, r)
        self.heads = {t: make_head(t, cfg.d_model, self.labels[t], rng, max_span_width)
                      for t in self.tasks}
        # gating off: every head is multiplied by exactly 1 in training and eval
        self.gating = False

    # ------------------------------------------------------------ parameters
    def named_parameters(self) -> dict[str, Tensor]:
        out = {"encoder." + k: v for k, v in self.encoder.params.items()}
        out["gates.alpha"] = self.gates.alpha
        for t in self.tasks:
            out.update({"heads." + k: v for k, v in self.heads[t].params.items()})
        return out

    @staticmethod
    def group(name: str) -> str:
        return name.split(".", 1)[0].replace("heads", "decoder")

    @staticmethod
    def head_task(name: str) -> str | None:
        return name.split(".")[1] if name.startswith("heads.") else None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.named_parameters().items():
            if state[k].shape != v.data.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {v.data.shape}")
            v.data[...] = state[k]

    # ------------------------------------------------------------ forward
    def batch(self, sentences: Sequence[Sentence]) -> Batch:
        return make_batch(sentences, self.vocab, self.cfg.max_len)

    def sample_u(self, rng: np.random.Generator) -> np.ndarray:
        return _U_EPS + (1.0 - 2 * _U_EPS) * rng.random(self.gates.shape)

    def eval_gates(self) -> np.ndarray:
        return eval_gate(self.gates.alpha, self.gates.l, self.gates.r)

    def encode(self, batch: Batch, train: bool = False, rngs: dict | None = None,
               u: np.ndarray | None = None, capture: bool = False, skip: bool = True):
        """Return (word vectors, root vectors, captured attention or None)."""
        ids = batch.ids
        z = None
        drop_rng = None
        if train:
            rngs = rngs or {}
            ids = word_dropout(ids, self.cfg.word_dropout, rngs.get("dropout"), self.vocab)
            drop_rng = rngs.get("dropout")
            if self.gating:
                if u is None:
                    u = self.sample_u(rngs["gates"])
                z = sample_gate(self.gates.alpha, u, self.gates.l, self.gates.r)
        elif self.gating:
            z = self.eval_gates()
        hidden, snaps = self.encoder.forward(ids, batch.key_mask, z=z, rng=drop_rng,
                                             capture=capture, skip=skip)
        words, root = word_embed(hidden, batch.pool)
        return words, root, snaps

    def task_loss(self, task: str, batch: Batch, train: bool = True, rngs=None, u=None) -> Tensor:
        words, root, _ = self.encode(batch, train, rngs, u)
        return self.heads[task].loss(words, root, batch)

    def predict(self, sentences: Sequence[Sentence], tasks: Sequence[str] | None = None,
                batch_size: int = 32) -> dict[str, list]:
        tasks = list(tasks or self.tasks)
        out: dict[str, list] = {t: [] for t in tasks}
        with T.no_grad():
            for i in range(0, len(sentences), batch_size):
                batch = self.batch(sentences[i:i + batch_size])
                words, root, _ = self.encode(batch)
                for t in tasks:
                    out[t].extend(self.heads[t].decode(words, root, batch))
        return out

    def evaluate(self, sentences: Sequence[Sentence], tasks: Sequence[str] | None = None,
                 batch_size: int = 32) -> dict[str, dict[str, float]]:
        tasks = list(tasks or self.tasks)
        preds = self.predict(sentences, tasks, batch_size)
        return {t: score(t, list(sentences), preds[t]) for t in tasks}

    def prediction_records(self, sentences: Sequence[Sentence]) -> list[dict]:
        preds = self.predict(sentences)
        return [{f"{t}_pred": prediction_json(t, preds[t][i]) for t in self.tasks}
                for i in range(len(sentences))]

    def snapshots(self, sentences: Sequence[Sentence], batch_size: int = 32) -> list:
        """Per-sentence attention/value matrices for every head (nothing skipped)."""
        out = []
        with T.no_grad():
            for i in range(0, len(sentences), batch_size):
                batch = self.batch(sentences[i:i + batch_size])
                _, _, snaps = self.encode(batch, capture=True)
                out.extend(split_snapshots(snaps, batch))
        return out

    # ------------------------------------------------------------ persistence
    def meta(self) -> dict:
        return {
            "format": "headlab-checkpoint-1",
            "vocab": self.vocab.to_json(),
            "encoder": self.cfg.to_json(),
            "labels": self.labels,
            "tasks": self.tasks,
            "seed": self.seed,
            "gating": self.gating,
            "max_span_width": self.max_span_width,
            "gates": self.gates.records(),
            "gate_interval": [self.gates.l, self.gates.r],
        }

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        meta = self.meta()
        meta.update(extra or {})
        return save_checkpoint(path, self.named_parameters(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "MultiTaskModel":
        arrays, meta = load_checkpoint(path)
        l, r = meta["gate_interval"]
        m = cls(Vocab.from_json(meta["vocab"]), EncoderConfig(**meta["encoder"]), meta["labels"],
                meta["tasks"], seed=meta["seed"], max_span_width=meta["max_span_width"], l=l, r=r)
        m.gating = bool(meta["gating"])
        m.load_state(arrays)
        return m
