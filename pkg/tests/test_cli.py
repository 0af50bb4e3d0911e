import json
import subprocess
import sys
from pathlib import Path

import pytest

from mergeforge.checkpoint import load_checkpoint
from mergeforge.cli import main
from mergeforge.config_space import MergeConfig

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def bench(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--out", str(out), "--budget", "20", "--width", "4"]) == 0
    return out


def models(bench):
    return ",".join(str(bench / f"candidate-{i}.mrg") for i in range(3))


def test_bench_writes_problem(bench):
    for name in ("problem.json", "base.mrg", "candidate-0.mrg", "candidate-2.mrg", "run.json"):
        assert (bench / name).exists()
    assert "schema" in load_checkpoint(bench / "base.mrg").meta


def test_search_report_has_budget_trials(bench, capsys):
    assert main(["search", "--run", str(bench / "run.json")]) == 0
    report = json.loads((bench / "search-out" / "report.json").read_text())
    assert len(report["trials"]) == 20
    assert {"config", "trials", "best", "pareto"} <= set(report)
    assert set(report["trials"][0]) >= {"index", "config", "losses", "scalar", "seconds"}
    assert report["config"]["budget"] == 20
    best = load_checkpoint(bench / "search-out" / "best.mrg")
    assert MergeConfig.from_json(best.meta["merge_config"]).to_dict() == report["best"]["config"]
    assert "best trial" in capsys.readouterr().out


def test_flags_override_run_file(bench, tmp_path):
    out = tmp_path / "o"
    assert main(["search", "--run", str(bench / "run.json"), "--budget", "9", "--seed", "3", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["trials"]) == 9
    assert report["seed"] == 3


def test_workers_from_environment(bench, tmp_path, monkeypatch):
    monkeypatch.setenv("MERGEFORGE_WORKERS", "2")
    out = tmp_path / "o"
    assert main(["search", "--run", str(bench / "run.json"), "--budget", "10", "--out", str(out)]) == 0
    assert json.loads((out / "report.json").read_text())["config"]["workers"] == 2


def test_merge_inspect_eval_roundtrip(bench, tmp_path, capsys):
    cfg = {
        "g_enc": 4, "g_prompt": 2, "g_dec": 2,
        "specs": [
            {"method": "ties", "scaling": 0.5, "retain": 0.3},
            {"method": "slerp", "pair": [0, 2], "t": 0.4},
            {"method": "linear", "weights": [0.25, 0.25, 0.25, 0.25]},
        ],
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    merged = tmp_path / "merged.mrg"
    rc = main(["merge", "--base", str(bench / "base.mrg"), "--models", models(bench),
               "--config", str(tmp_path / "cfg.json"), "--out", str(merged)])
    assert rc == 0 and merged.exists()
    assert main(["inspect", str(merged)]) == 0
    text = capsys.readouterr().out
    assert "group  1 encoder" in text and "slerp" in text
    assert main(["inspect", "--json", str(merged)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert MergeConfig.from_json(info["meta"]["merge_config"]).to_dict() == cfg
    assert main(["eval", "--model", str(merged), "--problem", str(bench / "problem.json")]) == 0
    losses = json.loads(capsys.readouterr().out)["losses"]
    assert 0 <= losses["task0"] <= 1


def test_unknown_method_is_usage_error(bench, tmp_path, capsys):
    cfg = {"g_enc": 4, "g_prompt": 2, "g_dec": 2, "specs": [{"method": "dare"}] * 3}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    rc = main(["merge", "--base", str(bench / "base.mrg"), "--models", models(bench),
               "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "m.mrg")])
    assert rc == 2
    err = capsys.readouterr().err
    for m in ("task_arithmetic", "ties", "slerp", "linear"):
        assert m in err


def test_wrong_group_count_is_usage_error(bench, tmp_path):
    cfg = {"g_enc": 1, "g_prompt": 1, "g_dec": 1, "specs": [{"method": "task_arithmetic", "scaling": 0.1}]}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    rc = main(["merge", "--base", str(bench / "base.mrg"), "--models", models(bench),
               "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "m.mrg")])
    assert rc == 2


def test_usage_errors(tmp_path, bench):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["inspect", str(tmp_path / "missing.mrg")]) == 2
    assert main(["search", "--run", str(tmp_path / "nope.json")]) == 2
    run = json.loads((bench / "run.json").read_text())
    run["alpha"] = -1
    (bench / "bad.json").write_text(json.dumps(run))
    assert main(["search", "--run", str(bench / "bad.json")]) == 2
    run["alpha"] = 0.05
    run["surprise"] = 1
    (bench / "bad.json").write_text(json.dumps(run))
    assert main(["search", "--run", str(bench / "bad.json")]) == 2


def test_runtime_error_exit_one(bench, tmp_path):
    run = json.loads((bench / "run.json").read_text())
    run["evaluator"] = {
        "kind": "external",
        "command": f"{sys.executable} {FIXTURES / 'score_model.py'} {{model}} {{tasks}} fail",
        "tasks": ["task0"],
    }
    run["budget"] = 8
    (bench / "ext.json").write_text(json.dumps(run))
    assert main(["search", "--run", str(bench / "ext.json")]) == 1


def test_external_search(bench, tmp_path):
    run = json.loads((bench / "run.json").read_text())
    run["evaluator"] = {
        "kind": "external",
        "command": f"{sys.executable} {FIXTURES / 'score_model.py'} {{model}} {{tasks}}",
        "tasks": ["a", "b"],
    }
    run.update(budget=8, mode="multi", output="ext-out")
    (bench / "ext.json").write_text(json.dumps(run))
    assert main(["search", "--run", str(bench / "ext.json")]) == 0
    report = json.loads((bench / "ext-out" / "report.json").read_text())
    assert len(report["trials"]) == 8 and report["pareto"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mergeforge", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "search" in proc.stdout
