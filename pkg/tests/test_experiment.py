import csv
import json
import math

import numpy as np
import pytest

from dpfedcast.benchmark import make_benchmark
from dpfedcast.data import WindowSample, write_case_csv
from dpfedcast.experiment import (
    emit_predictions,
    epsilon_label,
    parse_config_text,
    parse_epsilon,
    run_experiment,
    validate_config,
)
from dpfedcast.federation import ConfigError
from dpfedcast.mlp import ModelParams


@pytest.fixture(scope="module")
def cases_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "cases.csv"
    write_case_csv(make_benchmark(n_regions=12, n_days=30, seed=4), path)
    return path


def tiny(cases, out, **kw):
    raw = dict(cases=str(cases), output=str(out), hidden=(8,), T_cl=3, E=2, m=4, runs=2,
               epsilon=(1.0, math.inf), seed=3)
    raw.update(kw)
    return validate_config(raw)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestEpsilonText:
    @pytest.mark.parametrize("text", ["inf", "Infinity", "∞", "non-DP", " none "])
    def test_infinite_words(self, text):
        assert parse_epsilon(text) == math.inf

    def test_number_and_label(self):
        assert parse_epsilon("0.5") == 0.5
        assert epsilon_label(0.5) == "0.5" and epsilon_label(math.inf) == "inf"


class TestValidateConfig:
    def test_m_above_total(self, cases_file):
        with pytest.raises(ConfigError) as exc:
            validate_config({"cases": str(cases_file), "N_total": "10", "m": "20"})
        assert any("q > 1" in e for e in exc.value.errors)

    def test_delta_ignored_without_finite_level(self, cases_file):
        cfg = validate_config({"cases": str(cases_file), "epsilon": "inf", "delta": "1e-5"})
        assert cfg.epsilon == (math.inf,)
        assert any("delta ignored" in n for n in cfg.notes)

    def test_missing_data_path(self):
        with pytest.raises(ConfigError) as exc:
            validate_config({})
        assert any(e.startswith("cases:") for e in exc.value.errors)
        with pytest.raises(ConfigError) as exc:
            validate_config({"cases": "/no/such/file.csv"})
        assert any(e.startswith("cases:") for e in exc.value.errors)

    def test_all_errors_reported_together(self, cases_file):
        raw = {"cases": str(cases_file), "H": "0", "eta": "-1", "runs": "0", "epsilon": "1,1", "bogus": "x"}
        with pytest.raises(ConfigError) as exc:
            validate_config(raw)
        keys = {e.split(":")[0] for e in exc.value.errors}
        assert keys == {"H", "eta", "runs", "epsilon", "bogus"}

    def test_q_consistency(self, cases_file):
        cfg = validate_config({"cases": str(cases_file), "N_total": "400", "q": "0.05"})
        assert cfg.m == 20 and cfg.q == 0.05
        with pytest.raises(ConfigError):
            validate_config({"cases": str(cases_file), "N_total": "400", "m": "40", "q": "0.2"})

    def test_text_values_parsed(self, cases_file):
        cfg = validate_config({"cases": str(cases_file), "hidden": "16, 8", "smooth": "no",
                               "epsilon": "0.5,2,inf", "start_date": "2022-02-20"})
        assert cfg.layer_sizes == (10, 16, 8, 1)
        assert cfg.smooth is False
        assert cfg.epsilon == (0.5, 2.0, math.inf)
        assert cfg.start_date.isoformat() == "2022-02-20"

    def test_defaults(self, cases_file):
        cfg = validate_config({"cases": str(cases_file)})
        assert (cfg.T_cl, cfg.E, cfg.runs, cfg.S, cfg.eta, cfg.batch_size) == (75, 30, 15, 0.5, 1e-3, 32)
        assert cfg.layer_sizes == (10, 128, 64, 32, 1)
        assert cfg.epsilon == (0.3, 0.5, 1.0, 2.0, math.inf)

    def test_revalidating_a_config_is_stable(self, cases_file):
        cfg = validate_config({"cases": str(cases_file), "epsilon": "inf", "delta": "0.01"})
        assert validate_config(cfg) == cfg

    def test_config_text(self):
        raw = parse_config_text("# sweep\nT_cl = 75\n\nepsilon = 0.3, inf  # levels\n")
        assert raw == {"T_cl": "75", "epsilon": "0.3, inf"}
        with pytest.raises(ConfigError):
            parse_config_text("T_cl 75\n")


class TestEmitPredictions:
    model = ModelParams.from_layers([(np.ones((2, 1)), np.zeros(1))])

    def test_empty(self, tmp_path):
        emit_predictions(self.model, [], tmp_path / "p.csv")
        assert read_csv(tmp_path / "p.csv") == [["client_id", "y_true", "y_pred"]]

    def test_perfect_model_rows(self, tmp_path):
        test = [WindowSample("a", np.array([1.0, 2.0]), 3.0), WindowSample("b", np.array([0.5, 0.25]), 0.75)]
        emit_predictions(self.model, test, tmp_path / "p.csv")
        rows = read_csv(tmp_path / "p.csv")[1:]
        assert len(rows) == len(test)
        assert all(float(r[1]) == float(r[2]) for r in rows)
        assert [r[0] for r in rows] == ["a", "b"]


class TestSweep:
    def test_bundle(self, cases_file, tmp_path):
        result = run_experiment(tiny(cases_file, tmp_path / "out"))
        out = tmp_path / "out"
        assert result.ok and len(result.cells) == 4
        assert set(result.summary) == {1.0, math.inf}
        config = json.loads((out / "config.json").read_text())
        assert config["N_total"] == 12 and config["q"] == pytest.approx(4 / 12)
        assert config["noise"]["inf"]["c"] == 0
        assert config["noise"]["1"]["achieved_epsilon"] <= 1.0
        for label in ("1", "inf"):
            for r in range(2):
                cell = out / f"eps_{label}" / f"run_{r:02d}"
                assert {p.name for p in cell.iterdir()} >= {"metrics.json", "history.csv", "predictions.csv", "model.ckpt"}
                assert len(read_csv(cell / "history.csv")) == 4
        summary = read_csv(out / "summary.csv")
        assert summary[0] == ["epsilon", "metric", "mean", "std"]
        assert len(summary) == 1 + 2 * 4
        assert read_csv(out / "boxplot.csv")[0] == ["epsilon", "client_id", "run", "mape"]
        assert len(read_csv(out / "boxstats.csv")) == 3

    def test_runs_paired_across_levels(self, cases_file, tmp_path):
        result = run_experiment(tiny(cases_file, tmp_path / "out"))
        by_run = {}
        for c in result.cells:
            by_run.setdefault(c.run, set()).add(c.seed)
        assert all(len(s) == 1 for s in by_run.values())
        assert len({next(iter(s)) for s in by_run.values()}) == 2

    def test_single_non_dp_run(self, cases_file, tmp_path):
        result = run_experiment(tiny(cases_file, tmp_path / "out", runs=1, epsilon=(math.inf,)))
        assert len(result.cells) == 1
        assert all(s.std == 0 for s in result.summary[math.inf].values() if s.mean is not None)

    def test_byte_identical_reruns(self, cases_file, tmp_path):
        run_experiment(tiny(cases_file, tmp_path / "a"))
        run_experiment(tiny(cases_file, tmp_path / "b"))
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for rel in files:
            a, b = (tmp_path / "a" / rel).read_bytes(), (tmp_path / "b" / rel).read_bytes()
            if rel.name == "config.json":
                # the bundle records its own output directory
                a, b = ({k: v for k, v in json.loads(x).items() if k != "output"} for x in (a, b))
            assert a == b, rel

    def test_failed_calibration_only_fails_its_cells(self, cases_file, tmp_path):
        result = run_experiment(tiny(cases_file, tmp_path / "out", epsilon=(1e-9, math.inf), runs=1))
        status = {c.epsilon: c.ok for c in result.cells}
        assert status == {1e-9: False, math.inf: True}
        assert not result.ok
        rows = read_csv(tmp_path / "out" / "cells.csv")
        assert rows[1][3] == "error" and "calibration" in rows[1][4]

    def test_fixed_noise_multiplier(self, cases_file, tmp_path):
        cfg = tiny(cases_file, tmp_path / "out", c=0.8, runs=1, epsilon=(2.0,))
        assert any("fixed noise multiplier" in n for n in cfg.notes)
        run_experiment(cfg)
        noise = json.loads((tmp_path / "out" / "config.json").read_text())["noise"]["2"]
        assert noise["c"] == 0.8 and noise["sigma"] == pytest.approx(0.5 * 0.8 / 4)

    def test_region_count_mismatch(self, cases_file, tmp_path):
        with pytest.raises(ConfigError):
            run_experiment(tiny(cases_file, tmp_path / "out", N_total=50))

    def test_date_range_too_short(self, cases_file, tmp_path):
        cfg = tiny(cases_file, tmp_path / "out", start_date="2022-02-14", end_date="2022-02-20")
        with pytest.raises(ConfigError):
            run_experiment(cfg)
