"""``headlab`` command line: synth, train, grid, probe, analyze, report.

Exit status is 0 on success, 1 on a usage error and 2 when the command fails.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .corpus import TASKS, label_frequencies, load_grammar, read_conllu, read_jsonl, synth_generate, write_jsonl
from .trainer import TrainPlan, UtilizationGrid, manifest, train, write_run

log = logging.getLogger("headlab")

OUT_ENV = "HEADLAB_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _out(value: str | None, default: str) -> Path:
    return Path(value) if value else out_root() / default


def load_corpus(path: str | Path):
    path = Path(path)
    if path.suffix in (".conllu", ".conll"):
        return read_conllu(path)
    return read_jsonl(path)


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- synth

def cmd_synth(args, argv) -> int:
    grammar = load_grammar(args.grammar)
    sents = synth_generate(grammar, args.count, args.seed)
    out = _out(args.out, "corpus.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(sents, out)
    _write_json(out.with_name(out.name + ".manifest.json"),
                manifest(argv, args.seed, None, grammar=args.grammar, count=args.count))
    print(f"wrote {len(sents)} sentences to {out}")
    return 0


# ---------------------------------------------------------------- train

def read_plan(path: str | None, **overrides) -> TrainPlan:
    obj = json.loads(Path(path).read_text()) if path else {}
    obj.update({k: v for k, v in overrides.items() if v is not None})
    return TrainPlan.from_json(obj)


def _seeds(text: str | None):
    return [int(s) for s in text.split(",")] if text else None


def cmd_train(args, argv) -> int:
    plan = read_plan(args.plan, seeds=_seeds(args.seeds), epochs=args.epochs)
    corpus = load_corpus(args.data)
    out = _out(args.out, "train")
    for seed in plan.seeds:
        res = train(plan, corpus, seed)
        d = write_run(res, plan, seed, out / f"seed-{seed}", argv, str(args.data))
        print(f"seed {seed}: dev {json.dumps(res.dev, sort_keys=True)} kept {res.kept:.1f}% -> {d}")
    return 0


# ---------------------------------------------------------------- grid

def grid_configs(tasks: Sequence[str]) -> list[tuple[str, list[str], str]]:
    """(name, tasks, mode): every single task, every pair, and all tasks together."""
    tasks = [t for t in TASKS if t in tasks]
    out = [(f"STL-{t}", [t], "STL") for t in tasks]
    out += [(f"MTL-pair-{a}+{b}", [a, b], "MTL-pair") for a, b in itertools.combinations(tasks, 2)]
    if len(tasks) == 5:
        out.append(("MTL-5", list(tasks), "MTL-5"))
    return out


def _grid_job(job):
    plan_obj, seed, data, out, argv = job
    plan = TrainPlan.from_json(plan_obj)
    corpus = load_corpus(data)
    res = train(plan, corpus, seed)
    write_run(res, plan, seed, out, argv, data)
    return out


def cmd_grid(args, argv) -> int:
    tasks = args.tasks.split(",") if args.tasks else list(TASKS)
    for t in tasks:
        if t not in TASKS:
            raise UsageError(f"unknown task {t!r}")
    base = json.loads(Path(args.plan).read_text()) if args.plan else {}
    if args.epochs is not None:
        base["epochs"] = args.epochs
    seeds = _seeds(args.seeds) or base.get("seeds") or [1, 2, 3]
    base["seeds"] = seeds
    out = _out(args.out, "grid")
    jobs, runs = [], []
    for name, ts, mode in grid_configs(tasks):
        plan = TrainPlan.from_json({**base, "tasks": ts, "mode": mode})
        for seed in seeds:
            d = out / name / f"seed-{seed}"
            jobs.append((plan.to_json(), seed, str(args.data), str(d), list(argv)))
            runs.append({"name": name, "tasks": plan.tasks, "mode": mode, "seed": seed,
                         "config_hash": plan.config_hash(), "dir": str(d.relative_to(out))})
    _write_json(out / "manifest.json", manifest(argv, None, None, data=str(args.data), runs=runs))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            for d in pool.map(_grid_job, jobs):
                log.info("finished %s", d)
    else:
        for job in jobs:
            _grid_job(job)
    table = grid_table(collect_reports(out))
    write_grid_table(table, out / "table")
    print(render_markdown(table))
    print(f"{len(runs)} runs under {out}")
    return 0


# ---------------------------------------------------------------- grid tables

def collect_reports(root: Path) -> list[dict]:
    out = []
    for p in sorted(Path(root).rglob("report.json")):
        rep = json.loads(p.read_text())
        rep["path"] = str(p.parent)
        out.append(rep)
    return out


def _column(rep: dict, task: str) -> str:
    if rep["mode"] == "STL":
        return task
    if rep["mode"] == "MTL-5":
        return "MTL-5"
    return next(t for t in rep["tasks"] if t != task)


def grid_table(reports: Sequence[dict], split: str = "test") -> dict:
    """Rows are evaluated tasks; columns are the partner task (diagonal = single task) or MTL-5."""
    cells: dict[tuple[str, str], list[float]] = {}
    for rep in reports:
        for t in rep["tasks"]:
            cells.setdefault((t, _column(rep, t)), []).append(float(rep[split][t]["main"]))
    rows = [t for t in TASKS if any(k[0] == t for k in cells)]
    cols = rows + (["MTL-5"] if any(k[1] == "MTL-5" for k in cells) else [])
    table = {"rows": rows, "cols": cols, "split": split, "cells": {}}
    for (r, c), vals in cells.items():
        table["cells"][f"{r}|{c}"] = {
            "mean": statistics.fmean(vals),
            "std": statistics.stdev(vals) if len(vals) > 1 else float("nan"),
            "n": len(vals),
            "stl": r == c,
        }
    return table


def _fmt_cell(cell: dict | None) -> str:
    if cell is None:
        return "-"
    s = f"{100 * cell['mean']:.2f} ± {100 * cell['std']:.2f}"
    return f"**{s}** (STL)" if cell["stl"] else s


def render_markdown(table: dict) -> str:
    cols = table["cols"]
    lines = ["| task | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
    for r in table["rows"]:
        lines.append(f"| {r} | " + " | ".join(_fmt_cell(table["cells"].get(f"{r}|{c}")) for c in cols) + " |")
    return "\n".join(lines)


def write_grid_table(table: dict, stem: Path) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".md").write_text(render_markdown(table) + "\n")
    _write_json(stem.with_suffix(".json"), table)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "trained_with", "mean", "std", "n", "stl"])
        for r in table["rows"]:
            for c in table["cols"]:
                cell = table["cells"].get(f"{r}|{c}")
                if cell:
                    w.writerow([r, c, repr(cell["mean"]), repr(cell["std"]), cell["n"], int(cell["stl"])])


# ---------------------------------------------------------------- probe

def _model_dirs(path: Path) -> list[Path]:
    if (path / "checkpoint.json").exists():
        return [path]
    found = sorted(p.parent for p in path.glob("*/checkpoint.json"))
    if not found:
        raise FileNotFoundError(f"no checkpoint.json in {path} or its subdirectories")
    return found


def cmd_probe(args, argv) -> int:
    from .encoder import load_snapshots, save_snapshots
    from .model import MultiTaskModel
    from .probes import probe_all
    from . import plotting

    sents = load_corpus(args.data)
    if args.limit:
        sents = sents[:args.limit]
    runs = []
    if args.model:
        for d in _model_dirs(Path(args.model)):
            snaps = MultiTaskModel.load(d / "checkpoint").snapshots(sents)
            if args.save_snapshots:
                save_snapshots(d / "snapshots", snaps, {"data": str(args.data)})
            runs.append(snaps)
    else:
        for f in args.snapshots:
            snaps, _ = load_snapshots(f)
            runs.append(snaps[:len(sents)])
    report = probe_all(runs, sents, args.task, key_mode=args.key_mode, include_root=args.include_root)
    out = _out(args.out, f"probe-{args.task}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    report.write_csv(out.with_suffix(".csv"))
    plotting.plot_layer_scores({l: report.layer_scores(l) for l in report.labels},
                               out.with_suffix(".layers.png"), f"{args.task} probe by layer")
    _write_json(out.with_name(out.stem + ".manifest.json"),
                manifest(argv, None, None, data=str(args.data), task=args.task, runs=len(runs)))
    for l in report.labels:
        print(f"{l}\t{report.support[l]}\t{report.selected(l):.4f}\tlayer {report.best_layer(l)}")
    if report.omitted:
        print(f"omitted (no support): {', '.join(report.omitted)}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- analyze

def _grids(arg: str) -> tuple[str, list[UtilizationGrid]]:
    name, _, dirs = arg.rpartition("=")
    paths = [Path(p) for p in dirs.split(",") if p]
    grids = []
    for k, p in enumerate(paths):
        f = p if p.suffix == ".csv" else p / "utilization.csv"
        grids.append(UtilizationGrid.read_csv(f, run=k))
    return name or paths[0].parent.name, grids


def cmd_analyze(args, argv) -> int:
    from .analysis import (RunBundle, adjusted_r2, gray_image, gray_overlay, pairwise_pearson, rgb_encode,
                           write_ppm, write_statistics_csv, write_utilization_csv)
    from . import plotting

    out = _out(args.out, "analysis")
    out.mkdir(parents=True, exist_ok=True)
    models = dict(_grids(s) for s in args.runs)
    r2 = {}
    util_rows = []
    for name, grids in models.items():
        util_rows += [(name, g.run, g) for g in grids]
        if len(grids) == 3:
            bundle = RunBundle(grids)
            img = rgb_encode(bundle)
            write_ppm(img, out / f"{name}.rgb.ppm", args.scale)
            plotting.plot_rgb(img, out / f"{name}.rgb.png", name)
            r2[name] = adjusted_r2(*(g.values for g in grids))
    pairs = pairwise_pearson(models) if len(models) > 1 else []
    write_utilization_csv(util_rows, out / "utilization.csv")
    write_statistics_csv(r2, pairs, out / "statistics.csv")
    if args.overlay:
        grids = [g for s in args.overlay for g in _grids(s)[1]]
        H = gray_overlay(grids, args.overlay_tasks, args.overlay_runs)
        write_ppm(gray_image(H), out / "overlay.ppm", args.scale)
        plotting.plot_overlay(H, out / "overlay.png")
        np.savetxt(out / "overlay.csv", H, delimiter=",", fmt="%.17g")
    _write_json(out / "manifest.json", manifest(argv, None, None, runs=args.runs, overlay=args.overlay))
    for m, v in r2.items():
        print(f"adj_r2\t{m}\t{v:.6f}")
    for a, b, v in pairs:
        print(f"pearson\t{a}\t{b}\t{v:.6f}")
    return 0


# ---------------------------------------------------------------- report

def cmd_report(args, argv) -> int:
    from .probes import ProbeReport, diff_report
    from . import plotting

    root = Path(args.input)
    reports = collect_reports(root)
    if not reports:
        raise FileNotFoundError(f"no report.json under {root}")
    out = _out(args.out, "report.md")
    out.parent.mkdir(parents=True, exist_ok=True)
    stem = out.with_suffix("")
    sections = ["# Head pruning report", ""]

    table = grid_table(reports, args.split)
    write_grid_table(table, stem.with_name(stem.name + "-scores"))
    sections += [f"## Scores ({args.split}, mean ± sample std over seeds)", "",
                 render_markdown(table), ""]
    vals = np.array([[table["cells"].get(f"{r}|{c}", {"mean": np.nan})["mean"] for c in table["cols"]]
                     for r in table["rows"]])
    plotting.plot_matrix(table["rows"], table["cols"], vals, stem.with_name(stem.name + "-scores.png"),
                         "score by training partner")

    runs_csv = stem.with_name(stem.name + "-runs.csv")
    with open(runs_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "mode", "tasks", "pruning", "lam", "seed", "task", "dev_main", "test_main", "kept"])
        for rep in reports:
            for t in rep["tasks"]:
                w.writerow([rep["path"], rep["mode"], "+".join(rep["tasks"]), rep["pruning"], rep["lam"],
                            rep["seed"], t, rep["dev"][t]["main"], rep["test"][t]["main"], rep["kept"]])
    sections += ["## Heads kept", "", "| run | pruning | kept % |", "|---|---|---|"]
    sections += [f"| {Path(r['path']).relative_to(root)} | {r['pruning']} | {r['kept']:.1f} |" for r in reports]
    sections.append("")

    probes = sorted(root.rglob("*.probe.json")) + sorted(root.rglob("probe-*.json"))
    probes = [p for p in probes if not p.name.endswith(".manifest.json")]
    by_task: dict[str, dict[str, ProbeReport]] = {}
    for p in probes:
        rep = ProbeReport.from_json(json.loads(p.read_text()))
        by_task.setdefault(rep.task, {})[str(p.relative_to(root))] = rep
    for task, reps in sorted(by_task.items()):
        sections += [f"## Probe scores: {task}", "", "| source | label | support | score | best layer |",
                     "|---|---|---|---|---|"]
        for name, rep in reps.items():
            sections += [f"| {name} | {l} | {rep.support[l]} | {rep.selected(l):.4f} | {rep.best_layer(l)} |"
                         for l in rep.labels]
        sections.append("")
        base = [n for n in reps if "STL" in n]
        if args.data and base:
            freq = label_frequencies(load_corpus(args.data), task)
            diff = diff_report({n: r for n, r in reps.items() if n != base[0]}, reps[base[0]], freq)
            diff.write_csv(stem.with_name(f"{stem.name}-diff-{task}.csv"))
            plotting.plot_diffs(diff.labels, {m: [d[l] for l in diff.labels] for m, d in diff.diffs.items()},
                                stem.with_name(f"{stem.name}-diff-{task}.png"), f"{task} probe difference")

    out.write_text("\n".join(sections) + "\n")
    _write_json(stem.with_name(stem.name + ".manifest.json"), manifest(argv, None, None, input=str(root)))
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="headlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"headlab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic annotated corpus")
    s.add_argument("--grammar")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    s = sub.add_parser("train", help="train one plan over its seeds")
    s.add_argument("--plan", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--seeds")
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("grid", help="single-task, pairwise and all-task runs over 3 seeds")
    s.add_argument("--tasks")
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--plan", help="base plan JSON; tasks and mode are set per cell")
    s.add_argument("--seeds")
    s.add_argument("--epochs", type=int)
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("probe", help="probe every attention head against gold annotation")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--snapshots", nargs="+")
    s.add_argument("--data", required=True)
    s.add_argument("--task", required=True, choices=TASKS)
    s.add_argument("--out")
    s.add_argument("--limit", type=int)
    s.add_argument("--key-mode", choices=("sum", "mean"), default="sum")
    s.add_argument("--include-root", action="store_true")
    s.add_argument("--save-snapshots", action="store_true")

    s = sub.add_parser("analyze", help="utilization images and agreement statistics")
    s.add_argument("--runs", nargs="+", required=True, metavar="[NAME=]DIR,DIR,DIR")
    s.add_argument("--overlay", nargs="+", metavar="[NAME=]DIR,...")
    s.add_argument("--overlay-tasks", type=int, default=5)
    s.add_argument("--overlay-runs", type=int, default=3)
    s.add_argument("--scale", type=int, default=16)
    s.add_argument("--out")

    s = sub.add_parser("report", help="assemble Markdown/CSV tables and figures")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out")
    s.add_argument("--data", help="corpus for label frequencies in probe difference tables")
    s.add_argument("--split", choices=("dev", "test"), default="test")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "grid": cmd_grid, "probe": cmd_probe,
            "analyze": cmd_analyze, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args, ["headlab"] + argv)
    except UsageError as exc:
        print(f"headlab {args.verb}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit status 2
        print(f"{type(exc).__module__}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
