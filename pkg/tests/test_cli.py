import json

import pytest

from headlab.cli import grid_configs, grid_table, main, render_markdown

TINY_PLAN = {"epochs": 1, "encoder_lr": 1e-3, "batch_size": 16,
             "encoder": {"layers": 1, "heads": 2, "d_model": 16, "ffn": 32}}


def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == 0
    assert "synth" in capsys.readouterr().out
    assert main(["frobnicate"]) == 1
    assert main(["synth", "--count", "3", "--bogus"]) == 1
    assert main([]) == 1
    err = capsys.readouterr().err
    assert "usage" in err


def test_runtime_failure_exit_code(tmp_path, capsys):
    assert main(["train", "--plan", str(tmp_path / "nope.json"), "--data", "x.jsonl"]) == 2
    assert "FileNotFoundError" in capsys.readouterr().err
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"tokens": ["a", "b"], "dep": [[1, "r"], [0, "r"]]}\n')
    plan = tmp_path / "p.json"
    plan.write_text(json.dumps({"tasks": ["dep"], **TINY_PLAN}))
    assert main(["train", "--plan", str(plan), "--data", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "headlab.corpus.CorpusError" in capsys.readouterr().err


def test_grid_matrix_size():
    cfgs = grid_configs(["pos", "ner", "dep", "con", "srl"])
    assert len(cfgs) == 16 and 3 * len(cfgs) == 48
    assert sum(m == "MTL-pair" for _, _, m in cfgs) == 10


def test_grid_table_statistics():
    reps = [{"tasks": ["pos"], "mode": "STL", "test": {"pos": {"main": v}}} for v in (0.9, 0.8, 1.0)]
    reps += [{"tasks": ["pos", "ner"], "mode": "MTL-pair", "test": {"pos": {"main": 0.5}, "ner": {"main": 0.4}}}]
    t = grid_table(reps)
    cell = t["cells"]["pos|pos"]
    assert cell["mean"] == pytest.approx(0.9) and cell["std"] == pytest.approx(0.1) and cell["stl"]
    assert t["cells"]["ner|pos"]["mean"] == 0.4
    md = render_markdown(t)
    assert "(STL)" in md and "90.00 ± 10.00" in md


def test_pipeline_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("HEADLAB_OUT", str(tmp_path / "root"))
    assert main(["synth", "--count", "40", "--seed", "3"]) == 0
    data = tmp_path / "root" / "corpus.jsonl"
    assert data.exists() and (tmp_path / "root" / "corpus.jsonl.manifest.json").exists()
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"tasks": ["pos"], "pruning": "DP", "lam": 1.0, "seeds": [1, 2, 3], **TINY_PLAN,
                            "encoder": {"layers": 2, "heads": 4, "d_model": 16, "ffn": 32}}))
    runs = tmp_path / "runs"
    assert main(["train", "--plan", str(plan), "--data", str(data), "--out", str(runs)]) == 0
    manifest = json.loads((runs / "seed-2" / "manifest.json").read_text())
    assert manifest["seed"] == 2 and manifest["command"][:2] == ["headlab", "train"]
    probe = runs / "STL-pos.probe.json"
    assert main(["probe", "--model", str(runs), "--data", str(data), "--task", "pos", "--out", str(probe),
                 "--save-snapshots"]) == 0
    assert probe.exists() and probe.with_suffix(".csv").exists() and (runs / "seed-1" / "snapshots.json").exists()
    assert main(["probe", "--snapshots", str(runs / "seed-1" / "snapshots.json"), "--data", str(data),
                 "--task", "dep", "--out", str(runs / "dep.probe.json")]) == 0
    dirs = ",".join(str(runs / f"seed-{s}") for s in (1, 2, 3))
    an = tmp_path / "an"
    assert main(["analyze", "--runs", f"pos={dirs}", f"copy={dirs}", "--overlay", dirs, "--overlay-tasks", "1",
                 "--out", str(an)]) == 0
    for name in ("pos.rgb.ppm", "pos.rgb.png", "overlay.ppm", "overlay.png", "statistics.csv", "utilization.csv"):
        assert (an / name).exists(), name
    assert "pearson\tpos\tcopy\t1.000000" in capsys.readouterr().out
    rep = tmp_path / "rep" / "report.md"
    assert main(["report", "--in", str(runs), "--out", str(rep), "--data", str(data)]) == 0
    text = rep.read_text()
    assert "| pos |" in text and "Probe scores: pos" in text
    assert (tmp_path / "rep" / "report-scores.csv").exists() and (tmp_path / "rep" / "report-scores.png").exists()


def test_small_grid(tmp_path):
    from headlab.corpus import load_grammar, synth_generate, write_jsonl
    data = tmp_path / "c.jsonl"
    write_jsonl(synth_generate(load_grammar(None), 30, 1), data)
    plan = tmp_path / "g.json"
    plan.write_text(json.dumps(TINY_PLAN))
    out = tmp_path / "grid"
    assert main(["grid", "--tasks", "pos,ner", "--data", str(data), "--plan", str(plan), "--seeds", "1,2",
                 "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert len(man["runs"]) == 3 * 2
    table = json.loads((out / "table.json").read_text())
    assert set(table["cells"]) == {"pos|pos", "pos|ner", "ner|ner", "ner|pos"}
