import csv
import json

import numpy as np
import pytest

from umix_bench import cli
from umix_bench.cli import (ExperimentConfig, ExperimentResult, emit_report, format_pm, load_report,
                            main, render_report, run_pipeline, run_sweep, sweep_cells)
from umix_bench.training import ConfigError, TrainConfig
from umix_bench.uncertainty import ImportanceWeights

SMALL = {"dataset": {"name": "four_moons", "params": {"samples_per_group": [60, 60, 8, 8]}},
         "method": "erm", "train": {"epochs": 6, "hidden": [8], "T_s": 1, "T": 4},
         "seeds": [0, 1]}


def small(**kw):
    d = json.loads(json.dumps(SMALL))
    d.update(kw)
    return ExperimentConfig.from_dict(d)


def write_config(tmp_path, d):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(d))
    return p


# --- config ----------------------------------------------------------------

def test_config_round_trip():
    c = small(method="focal", method_params={"gamma": 1.5}, grid={"lr": [0.1, 0.05]})
    assert ExperimentConfig.from_json(c.to_json()) == c


def test_default_config_round_trip():
    c = ExperimentConfig()
    assert ExperimentConfig.from_json(c.to_json()) == c
    assert c.train == TrainConfig()


@pytest.mark.parametrize("patch,match", [
    ({"metod": "erm"}, "unknown keys in config"),
    ({"method": "nope"}, "available methods"),
    ({"method": "focal", "method_params": {"gama": 2}}, "method_params"),
    ({"method": "jtt", "method_params": {"t_id": 1.5}}, "int"),
    ({"train": {"learning_rate": 0.1}}, "unknown train config keys"),
    ({"dataset": {"name": "spurious", "params": {"minority": 0.1}}}, "dataset.params"),
    ({"dataset": {"name": "mnist"}}, "unknown dataset"),
    ({"selection": "best"}, "selection"),
    ({"seeds": []}, "seeds"),
    ({"grid": {"lrr": [1]}}, "grid"),
    ({"theory": {"samples": 10}}, "theory"),
])
def test_config_rejections(patch, match):
    d = json.loads(json.dumps(SMALL))
    d.update(patch)
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_dict(d)


def test_umix_window_checked_at_parse_time():
    with pytest.raises(ConfigError, match="T_s"):
        small(method="umix", train={"epochs": 3, "T_s": 1, "T": 4})


# --- pipeline --------------------------------------------------------------

def test_single_seed_std_zero():
    res = run_pipeline(small(seeds=[7]), workers=1)
    s = res.summary()
    assert len(res.per_seed) == 1 and s["avg_std"] == 0.0 and s["worst_std"] == 0.0


def test_aggregation_uses_sample_std():
    res = run_pipeline(small(seeds=[0, 1, 2]), workers=1)
    worst = [r["report"]["worst_acc"] for r in res.per_seed]
    assert res.summary()["worst_std"] == pytest.approx(np.std(worst, ddof=1))
    assert res.summary()["worst_mean"] == pytest.approx(np.mean(worst))


def test_pipeline_deterministic_and_parallel_matches_serial():
    c = small()
    a = render_report(run_pipeline(c, workers=1), "csv")
    b = render_report(run_pipeline(c, workers=1), "csv")
    p = render_report(run_pipeline(c, workers=2), "csv")
    assert a == b == p


def test_umix_pipeline_persists_weights_before_phase_b(tmp_path, monkeypatch):
    seen = {}
    real = cli.train_umix

    def spy(train, weights, cfg):
        path = tmp_path / "seed_0" / "weights"
        seen["exists"] = path.with_suffix(".csv").exists() and path.with_suffix(".json").exists()
        ImportanceWeights.load(path).check_dataset(train)
        return real(train, weights, cfg)

    monkeypatch.setattr(cli, "train_umix", spy)
    run_pipeline(small(method="umix", seeds=[0], out_dir=str(tmp_path)), workers=1)
    assert seen["exists"]
    assert (tmp_path / "seed_0" / "trace.npy").exists()


def test_group_aware_methods_see_groups_oblivious_do_not(monkeypatch):
    seen = {}
    real = cli.train_erm

    def spy(train, cfg):
        seen["groups"] = train.groups
        return real(train, cfg)

    monkeypatch.setattr(cli, "train_erm", spy)
    run_pipeline(small(seeds=[0]), workers=1)
    assert seen["groups"] is None


def test_sweep_cells_cover_methods_and_grid():
    c = small(methods=["erm", "focal"], grid={"lr": [0.1, 0.05], "batch_size": [16]})
    cells = sweep_cells(c)
    assert len(cells) == 4
    assert {(x.method, x.train.lr) for x in cells} == {("erm", 0.1), ("erm", 0.05),
                                                       ("focal", 0.1), ("focal", 0.05)}


# --- reports ---------------------------------------------------------------

@pytest.fixture(scope="module")
def sweep_results():
    return run_sweep(small(methods=["erm", "cvar_dro"]), workers=1)


def test_json_report_round_trip(tmp_path, sweep_results):
    path = emit_report(sweep_results, "json", tmp_path)
    back = load_report(path)
    assert [r.to_dict() for r in back] == [r.to_dict() for r in sweep_results]


def test_csv_rows_are_seeds_times_methods(tmp_path, sweep_results):
    path = emit_report(sweep_results, "csv", tmp_path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 2 * 2
    assert {r["method"] for r in rows} == {"erm", "cvar_dro"}


def test_markdown_table(tmp_path, sweep_results):
    text = emit_report(sweep_results, "markdown", tmp_path).read_text()
    lines = text.strip().splitlines()
    assert lines[0] == "| Method | Config | Avg. | Worst |"
    assert len(lines) == 2 + 2
    s = sweep_results[0].summary()
    assert format_pm(s["avg_mean"], s["avg_std"]) in lines[2]


def test_format_pm():
    assert format_pm(0.637, 0.019) == "63.7 ± 1.9%"
    assert format_pm(1.0, 0.0) == "100.0 ± 0.0%"


def test_result_mean_recomputable(sweep_results):
    for r in sweep_results:
        back = ExperimentResult.from_dict(json.loads(json.dumps(r.to_dict())))
        assert back.summary() == r.summary()


def test_unknown_report_format(tmp_path, sweep_results):
    with pytest.raises(ConfigError):
        emit_report(sweep_results, "xml", tmp_path)


# --- command line ----------------------------------------------------------

def test_main_full_flow(tmp_path):
    d = dict(SMALL, method="umix")
    cfg = write_config(tmp_path, d)
    out = tmp_path / "out"
    for cmd in ("generate", "weights", "train", "evaluate", "report"):
        assert main([cmd, "--config", str(cfg), "--out", str(out), "--seeds", "3"]) == 0
    assert (out / "seed_3" / "train.csv").exists()
    assert (out / "seed_3" / "weights.csv").exists()
    assert (out / "seed_3" / "checkpoints" / "manifest.json").exists()
    rep = load_report(out / "report.json")
    assert rep[0].per_seed[0]["seed"] == 3


def test_main_sweep_and_theory(tmp_path):
    d = dict(SMALL, methods=["erm", "vanilla_mixup"], seeds=[0],
             theory={"alphas": [4, 8], "mc_samples": 4096})
    cfg = write_config(tmp_path, d)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert len(load_report(tmp_path / "report.json")) == 2
    assert main(["theory-check", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    th = json.loads((tmp_path / "theory.json").read_text())
    assert [c["beta_params"] for c in th["checks"]] == [[4, 4], [8, 8]]
    assert th["covariance_rank"]["rank"] == 2


def test_main_config_errors_exit_one(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    bad = write_config(tmp_path, {"metod": "erm"})
    assert main(["train", "--config", str(bad)]) == 1
    assert "unknown keys" in capsys.readouterr().err
    good = write_config(tmp_path, SMALL)
    assert main(["train", "--config", str(good), "--seeds", "a,b"]) == 1


def test_main_runtime_error_exits_two(tmp_path):
    d = {"dataset": {"name": "csv", "params": {"train": "x.csv", "val": "x.csv", "test": "x.csv"}},
         "method": "erm"}
    assert main(["train", "--config", str(write_config(tmp_path, d)), "--out", str(tmp_path)]) == 2


def test_report_without_evaluate_exits_two(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert main(["report", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 2


def test_worker_env(monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "3")
    assert cli.worker_count() == 3
    monkeypatch.setenv(cli.WORKERS_ENV, "zero")
    with pytest.raises(ConfigError):
        cli.worker_count()


def test_bad_worker_env_is_config_error(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "0")
    assert main(["train", "--config", str(write_config(tmp_path, SMALL))]) == 1
