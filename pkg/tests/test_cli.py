import csv
import json

import pytest

from airshare import cli

FAST = ["--gamma", "1", "--epsilon", "1", "--min-epochs", "20", "--max-epochs", "60"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "gen.json"
    cfg.write_text(json.dumps({"n_routes": 8, "n_months": 4}))
    assert cli.main(["--out", str(root / "panel"), "gen-data", "--config", str(cfg), "--seed", "7"]) == 0
    args = ["make-problem", "--panel", str(root / "panel"), "--models", str(root / "panel" / "ground_truth.json"), "--carrier", "C1"]
    assert cli.main(args + ["--top", "2", "--out", str(root / "p2")]) == 0
    assert cli.main(args + ["--out", str(root / "pall")]) == 0
    return root


def test_gen_data_writes_the_panel(workspace):
    for f in ("airports.csv", "routes.csv", "observations.csv", "ground_truth.json"):
        assert (workspace / "panel" / f).is_file()


@pytest.mark.parametrize("method", cli.METHODS)
def test_optimize_reports_feasible_schedules(workspace, tmp_path, method):
    out = tmp_path / method
    assert cli.main(["optimize", "--problem", str(workspace / "p2" / "problem.json"), "--method", method, "--out", str(out)] + FAST) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["feasible"] and report["total_cost"] <= report["budget"]
    assert report["method"] == method and len(report["frequencies"]) == report["route_count"]


def test_deterministic_runs_are_byte_identical(workspace, tmp_path):
    args = ["optimize", "--problem", str(workspace / "p2" / "problem.json"), "--method", "aga-relu", "--init", "random", "--seed", "3", "--deterministic"] + FAST
    for name in ("a", "b"):
        assert cli.main(args + ["--out", str(tmp_path / name)]) == 0
    for f in ("report.json", "trace.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_benchmark_writes_one_row_per_run(workspace, tmp_path):
    problems = [str(workspace / "p2" / "problem.json"), str(workspace / "pall" / "problem.json")]
    argv = ["benchmark", "--problems", *problems, "--methods", "aga-relu", "greedy", "--repetitions", "2", "--out", str(tmp_path)]
    assert cli.main(argv + FAST) == 0
    with open(tmp_path / "benchmark.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * 2
    assert list(rows[0]) == list(cli.BENCHMARK_COLUMNS)
    assert all(r["feasible"] == "True" for r in rows)


def test_train_and_predict(workspace, tmp_path):
    models = tmp_path / "models"
    argv = ["train", "--panel", str(workspace / "panel"), "--arch", "multilogit", "--epochs", "50", "--out", str(models)]
    assert cli.main(argv) == 0
    summary = json.loads((models / "summary.json").read_text())
    assert summary["median_rmse"] >= 0
    assert cli.main(["predict", "--panel", str(workspace / "panel"), "--models", str(models), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "predictions.csv").read_text().startswith("month,route_id,carrier_id,share,predicted_share")


def test_brute_force_on_a_big_problem_exits_1(workspace, tmp_path, capsys):
    code = cli.main(["optimize", "--problem", str(workspace / "pall" / "problem.json"), "--method", "brute", "--out", str(tmp_path)])
    assert code == 1
    assert "brute-force limit" in capsys.readouterr().err


def test_unknown_benchmark_method_exits_2(workspace, tmp_path, capsys):
    argv = ["benchmark", "--problems", str(workspace / "p2" / "problem.json"), "--methods", "simplex", "--out", str(tmp_path)]
    assert cli.main(argv) == 2
    err = capsys.readouterr().err
    assert all(m in err for m in cli.METHODS)


def test_unknown_method_is_a_usage_error(workspace):
    with pytest.raises(SystemExit) as e:
        cli.main(["optimize", "--problem", str(workspace / "p2" / "problem.json"), "--method", "simplex"])
    assert e.value.code == 2


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--panel", "/nonexistent"],
        ["optimize", "--problem", "/nonexistent.json", "--method", "greedy"],
        ["gen-data", "--config", "/nonexistent.json"],
    ],
)
def test_missing_inputs_exit_2(argv, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path)]) == 2


def test_bad_generator_config_exits_2(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"n_airports": 2, "n_routes": 9}))
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_corrupt_panel_exits_2(workspace, tmp_path):
    import shutil

    shutil.copytree(workspace / "panel", tmp_path / "panel")
    obs = tmp_path / "panel" / "observations.csv"
    lines = obs.read_text().splitlines()
    lines[1] = lines[1].rsplit(",", 3)[0] + ",0.5,1,1"
    obs.write_text("\n".join(lines) + "\n")
    assert cli.main(["train", "--panel", str(tmp_path / "panel"), "--out", str(tmp_path)]) == 2
