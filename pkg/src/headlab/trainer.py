"""Single- and multi-task training with loss balancing and head pruning."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import sys
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .corpus import TASKS, Sentence, build_vocab, label_inventory
from .encoder import EncoderConfig
from .gates import heads_kept, l0_penalty, utilization
from .model import MultiTaskModel, substream
from .optim import Adam

log = logging.getLogger(__name__)

MODES = ("STL", "MTL-pair", "MTL-5")
PRUNING = ("none", "SP", "DP")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- sampling / balancing

def task_probabilities(sizes: dict[str, int], power: float = 0.8) -> dict[str, float]:
    if not sizes:
        raise ValueError("no tasks to sample from")
    for t, n in sizes.items():
        if n < 1:
            raise ValueError(f"task {t} has empty dataset")
    w = {t: float(n) ** power for t, n in sizes.items()}
    total = sum(w.values())
    return {t: v / total for t, v in w.items()}


def sample_task(sizes: dict[str, int], rng: np.random.Generator, power: float = 0.8) -> str:
    """Draw a task with probability proportional to dataset size ** 0.8."""
    probs = task_probabilities(sizes, power)
    names = list(probs)
    return names[int(rng.choice(len(names), p=[probs[t] for t in names]))]


class LossBalancer:
    """Rescale each task's loss by (sum of running averages) / (own running average)."""

    def __init__(self, window: int = 5):
        self.window = window
        self.history: dict[str, deque] = {}

    def average(self, task: str) -> float:
        h = self.history[task]
        return sum(h) / len(h)

    def factor(self, task: str, loss: float) -> float:
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} for task {task}")
        avgs = {t: self.average(t) for t, h in self.history.items() if h}
        if task not in avgs:
            avgs[task] = loss  # first batch of this task stands in for its average
        return sum(avgs.values()) / avgs[task]

    def push(self, task: str, loss: float) -> None:
        self.history.setdefault(task, deque(maxlen=self.window)).append(loss)

    def balance(self, task: str, loss):
        """Return the balanced loss (float or Tensor), then record the raw value."""
        raw = loss.item() if isinstance(loss, T.Tensor) else float(loss)
        f = self.factor(task, raw)
        self.push(task, raw)
        return T.scale(loss, f) if isinstance(loss, T.Tensor) else f * raw


# ---------------------------------------------------------------- plans

@dataclass
class TrainPlan:
    tasks: list[str]
    mode: str = "STL"
    pruning: str = "none"
    lam: float = 0.0
    epochs: int = 30
    warmup: int = 10
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    encoder_lr: float = 5e-5
    decoder_lr: float = 1e-3
    gate_lr: float = 0.1
    batch_size: int = 32
    sp_epochs: int | None = None
    sp_train_encoder: bool = False
    normalize_lambda: bool = True
    max_span_width: int = 8
    dev_fraction: float = 0.1
    test_fraction: float = 0.1
    alpha0: float = 2.0
    encoder: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tasks = [t for t in TASKS if t in self.tasks]
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.pruning not in PRUNING:
            raise ValueError(f"pruning must be one of {PRUNING}")
        want = {"STL": 1, "MTL-pair": 2, "MTL-5": 5}[self.mode]
        if len(self.tasks) != want:
            raise ValueError(f"{self.mode} needs exactly {want} task(s), got {self.tasks}")
        if self.lam < 0:
            raise ValueError("lambda must be ≥ 0")

    @classmethod
    def from_json(cls, obj: dict) -> "TrainPlan":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class UtilizationGrid:
    values: np.ndarray            # (layers, heads) expected gate values
    run: int = 0
    tasks: tuple[str, ...] = ()

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "head", "expected_z"])
            for (i, j), v in np.ndenumerate(self.values):
                w.writerow([i, j, repr(float(v))])

    @classmethod
    def read_csv(cls, path: str | Path, run: int = 0, tasks=()) -> "UtilizationGrid":
        rows = list(csv.DictReader(open(path)))
        L = 1 + max(int(r["layer"]) for r in rows)
        H = 1 + max(int(r["head"]) for r in rows)
        v = np.zeros((L, H))
        for r in rows:
            v[int(r["layer"]), int(r["head"])] = float(r["expected_z"])
        return cls(v, run, tuple(tasks))


def utilization_grid(model: MultiTaskModel, run: int = 0) -> UtilizationGrid:
    return UtilizationGrid(utilization(model.gates), run, tuple(model.tasks))


def kept_percent(model: MultiTaskModel) -> float:
    return heads_kept(model.gates)


@dataclass
class RunResult:
    model: MultiTaskModel
    history: list[dict]
    best_epoch: int
    dev: dict
    test: dict
    kept: float
    grid: UtilizationGrid
    steps: int


# ---------------------------------------------------------------- training loop

class _Stream:
    """Endless shuffled batches over one task's sentences."""

    def __init__(self, sents: list[Sentence], batch_size: int, rng):
        self.sents = sents
        self.bs = batch_size
        self.rng = rng
        self.queue: list[list[Sentence]] = []

    def epoch(self) -> list[list[Sentence]]:
        order = self.rng.permutation(len(self.sents))
        return [[self.sents[k] for k in order[i:i + self.bs]] for i in range(0, len(order), self.bs)]

    def next(self) -> list[Sentence]:
        if not self.queue:
            self.queue = self.epoch()
        return self.queue.pop(0)

    def n_batches(self) -> int:
        return math.ceil(len(self.sents) / self.bs)


def build_model(plan: TrainPlan, train: Sequence[Sentence], everything: Sequence[Sentence],
                seed: int) -> MultiTaskModel:
    vocab = build_vocab(train)
    labels = {t: label_inventory(everything, t) for t in plan.tasks}
    cfg = EncoderConfig(**plan.encoder)
    return MultiTaskModel(vocab, cfg, labels, plan.tasks, seed=seed,
                          max_span_width=plan.max_span_width, alpha0=plan.alpha0)


def split_corpus(sentences: Sequence[Sentence], plan: TrainPlan):
    n = len(sentences)
    n_test = int(round(n * plan.test_fraction))
    n_dev = max(1, int(round(n * plan.dev_fraction)))
    train = list(sentences[:n - n_dev - n_test])
    dev = list(sentences[n - n_dev - n_test:n - n_test])
    test = list(sentences[n - n_test:]) if n_test else list(dev)
    if not train:
        raise TrainingError("corpus too small for the requested splits")
    return train, dev, test


class Trainer:
    def __init__(self, plan: TrainPlan, model: MultiTaskModel, seed: int):
        self.plan = plan
        self.model = model
        self.seed = seed
        self.rngs = {k: substream(seed, k) for k in ("data", "dropout", "gates", "sampler")}
        self.named = model.named_parameters()
        self.names = list(self.named)
        self.params = list(self.named.values())
        lr = {"encoder": plan.encoder_lr, "decoder": plan.decoder_lr, "gates": plan.gate_lr}
        self.opt = Adam(self.params, lrs=[lr[model.group(n)] for n in self.names])
        self.step_count = 0
        self.balancer = LossBalancer()
        self.n_heads = model.cfg.layers * model.cfg.heads

    def active(self, task: str, groups: set[str]) -> list[bool]:
        out = []
        for n in self.names:
            g = self.model.group(n)
            if g == "decoder":
                out.append("decoder" in groups and self.model.head_task(n) == task)
            else:
                out.append(g in groups)
        return out

    def lr_mult(self) -> float:
        w = self.plan.warmup
        return min(1.0, (self.step_count + 1) / w) if w > 0 else 1.0

    def step(self, task: str, batch_sents: list[Sentence], groups: set[str], penalize: bool) -> float:
        m = self.model
        batch = m.batch(batch_sents)
        loss = m.task_loss(task, batch, train=True, rngs=self.rngs)
        raw = loss.item()
        if not math.isfinite(raw):
            raise TrainingError(f"non-finite {task} loss at step {self.step_count} (seed {self.seed})")
        if self.plan.mode != "STL":
            loss = self.balancer.balance(task, loss)
        if penalize and self.plan.lam > 0:
            lam = self.plan.lam / self.n_heads if self.plan.normalize_lambda else self.plan.lam
            loss = loss + T.scale(l0_penalty(m.gates), lam)
        grads = T.grad(loss, self.params)
        self.opt.step(grads, lr_mult=self.lr_mult(), active=self.active(task, groups))
        self.step_count += 1
        return raw

    def run_epochs(self, epochs: int, groups: set[str], penalize: bool, dev, stage: str,
                   history: list, best: dict) -> None:
        plan, m = self.plan, self.model
        streams = {t: _Stream(self.train_by_task[t], plan.batch_size, self.rngs["data"])
                   for t in plan.tasks}
        sizes = {t: len(v) for t, v in self.train_by_task.items()}
        for ep in range(epochs):
            t0 = time.perf_counter()
            losses: dict[str, list[float]] = {t: [] for t in plan.tasks}
            if plan.mode == "STL":
                t = plan.tasks[0]
                for b in streams[t].epoch():
                    losses[t].append(self.step(t, b, groups, penalize))
            else:
                n_steps = sum(s.n_batches() for s in streams.values())
                for _ in range(n_steps):
                    t = sample_task(sizes, self.rngs["sampler"])
                    losses[t].append(self.step(t, streams[t].next(), groups, penalize))
            metrics = m.evaluate(dev, plan.tasks)
            main = float(np.mean([metrics[t]["main"] for t in plan.tasks]))
            rec = {"stage": stage, "epoch": len(history), "dev": metrics, "dev_main": main,
                   "kept": kept_percent(m),
                   "loss": {t: float(np.mean(v)) if v else None for t, v in losses.items()},
                   "seconds": time.perf_counter() - t0}
            history.append(rec)
            log.info("seed %d %s epoch %d dev %.4f kept %.1f%%", self.seed, stage, rec["epoch"],
                     main, rec["kept"])
            if main >= best.get("main", -1.0):
                best.update(main=main, epoch=rec["epoch"], state=m.state(), dev=metrics)

    def fit(self, train: Sequence[Sentence], dev: Sequence[Sentence]) -> tuple[list[dict], dict]:
        plan, m = self.plan, self.model
        self.train_by_task = {t: [s for s in train if s.has(t)] for t in plan.tasks}
        for t, v in self.train_by_task.items():
            if not v:
                raise TrainingError(f"no training sentences annotated for {t}")
        history: list[dict] = []
        best: dict = {}
        if plan.pruning == "none":
            m.gating = False
            self.run_epochs(plan.epochs, {"encoder", "decoder"}, False, dev, "train", history, best)
        elif plan.pruning == "DP":
            m.gating = True
            self.run_epochs(plan.epochs, {"encoder", "decoder", "gates"}, True, dev, "train",
                            history, best)
        else:
            m.gating = False
            self.run_epochs(plan.epochs, {"encoder", "decoder"}, False, dev, "sp-train", history, best)
            m.load_state(best["state"])
            m.gating = True
            best.clear()
            groups = {"gates", "encoder"} if plan.sp_train_encoder else {"gates"}
            self.run_epochs(plan.sp_epochs or plan.epochs, groups, True, dev, "sp-prune",
                            history, best)
        m.load_state(best["state"])
        return history, best


def train(plan: TrainPlan, corpus: Sequence[Sentence], seed: int,
          model: MultiTaskModel | None = None) -> RunResult:
    """Train one run of ``plan`` on ``corpus`` (split into train/dev/test)."""
    train_s, dev_s, test_s = split_corpus(corpus, plan)
    for t in plan.tasks:
        if not any(s.has(t) for s in corpus):
            raise TrainingError(f"corpus lacks {t} annotations")
    model = model or build_model(plan, train_s, corpus, seed)
    tr = Trainer(plan, model, seed)
    history, best = tr.fit(train_s, dev_s)
    test = model.evaluate(test_s, plan.tasks)
    return RunResult(model, history, best["epoch"], best["dev"], test, kept_percent(model),
                     utilization_grid(model, seed), tr.step_count)


def throughput(model: MultiTaskModel, sentences: Sequence[Sentence], seconds: float = 1.0,
               batch_size: int = 32) -> float:
    """Sentences encoded and decoded per wall-clock second in eval mode."""
    if not sentences:
        raise ValueError("throughput needs a non-empty corpus")
    batches = [model.batch(sentences[i:i + batch_size]) for i in range(0, len(sentences), batch_size)]
    done = 0
    start = time.perf_counter()
    with T.no_grad():
        while True:
            for batch in batches:
                words, root, _ = model.encode(batch)
                for t in model.tasks:
                    model.heads[t].decode(words, root, batch)
                done += len(batch)
            elapsed = time.perf_counter() - start
            if elapsed >= seconds:
                return done / elapsed


# ---------------------------------------------------------------- run directories

def manifest(argv: Sequence[str] | None, seed: int | None, plan: TrainPlan | None, **extra) -> dict:
    return {
        "command": list(argv) if argv is not None else list(sys.argv),
        "seed": seed,
        "config_hash": plan.config_hash() if plan else None,
        "plan": plan.to_json() if plan else None,
        "versions": {"headlab": __version__, "python": platform.python_version(),
                     "numpy": np.__version__},
        **extra,
    }


def write_run(result: RunResult, plan: TrainPlan, seed: int, out: str | Path,
              argv: Sequence[str] | None = None, data: str | None = None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result.model.save(out / "checkpoint", {"step": result.steps})
    result.grid.write_csv(out / "utilization.csv")
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    report = {"tasks": plan.tasks, "mode": plan.mode, "pruning": plan.pruning, "lam": plan.lam,
              "seed": seed, "best_epoch": result.best_epoch, "dev": result.dev,
              "test": result.test, "kept": result.kept, "steps": result.steps}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    (out / "manifest.json").write_text(json.dumps(
        manifest(argv, seed, plan, data=data), indent=1, sort_keys=True) + "\n")
    return out


def run_plan(plan: TrainPlan, corpus: Sequence[Sentence], out: str | Path,
             argv: Sequence[str] | None = None, data: str | None = None) -> list[Path]:
    dirs = []
    for seed in plan.seeds:
        res = train(plan, corpus, seed)
        dirs.append(write_run(res, plan, seed, Path(out) / f"seed-{seed}", argv, data))
    return dirs
