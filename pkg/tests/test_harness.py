import json
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dope.harness import (ConfigValidationError, ExperimentConfig, ResultRow, aggregate_coverage, aggregate_rmse,
                          emit_plot, read_csv, read_plot_series, repeat_seed, run_experiment, summarize,
                          truth_value, write_csv)


def _row(theta, truth=0.0, method="dope", value=0.0, repeat=0, half=0.1, error=""):
    lo, hi = theta - half, theta + half
    return ResultRow(method, "auc", value, repeat, theta, half / 1.96, lo, hi, truth, int(lo <= truth <= hi), 0.5,
                     error)


class TestConfig:
    def test_defaults(self):
        c = ExperimentConfig("x")
        assert c.repeats == 50 and c.splits == (256, 64, 64)
        assert c.sweep_values == (0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0)

    @pytest.mark.parametrize("kw", [{"repeats": 0}, {"sweep_values": (1.5,)}, {"dgp": "heat"},
                                    {"methods": ("bayes",)}, {"sweep": "delta", "sweep_values": (0.7,)},
                                    {"dgp": "darcy", "sweep": "rho"}, {"folds": 1},
                                    {"functionals": ({"kind": "max"},)}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigValidationError if "functionals" not in kw else ValueError):
            ExperimentConfig("x", **kw)

    def test_json_round_trip_and_hash(self, tmp_path):
        c = ExperimentConfig("x", sweep_values=(0.0, 0.5), repeats=3)
        path = tmp_path / "c.json"
        path.write_text(c.to_json())
        back = ExperimentConfig.load(path)
        assert back == c and back.hash() == c.hash()
        assert ExperimentConfig("y", sweep_values=(0.0, 0.5), repeats=3, out_dir="elsewhere").hash() == c.hash()
        assert ExperimentConfig("x", sweep_values=(0.0, 0.5), repeats=4).hash() != c.hash()

    def test_unknown_key(self):
        with pytest.raises(ConfigValidationError):
            ExperimentConfig.from_dict({"name": "x", "colour": 1})

    def test_comment_keys_ignored(self):
        assert ExperimentConfig.from_dict({"name": "x", "_comment": "hi"}).name == "x"

    def test_repeat_seed(self):
        # base + 1000 repeat + sweep index
        assert repeat_seed(ExperimentConfig("x", seed=7), 3, 2) == 3009


class TestRows:
    def test_coverage_flag_consistency(self):
        with pytest.raises(ValueError):
            ResultRow("dope", "auc", 0.0, 0, 1.0, 0.1, 0.9, 1.1, 2.0, 1, 0.0)

    def test_csv_round_trip(self, tmp_path):
        rows = [_row(0.123456789012345, truth=0.1, repeat=r, value=0.25) for r in range(3)]
        rows.append(ResultRow("plugin", 'odd "name", here', 0.5, 1, *[float("nan")] * 5, 0, 0.0, "Boom: x, y"))
        path = tmp_path / "r.csv"
        write_csv(rows, path)
        back = read_csv(path)
        assert back[:3] == rows[:3]
        assert back[3].functional == rows[3].functional and back[3].error == rows[3].error
        assert np.isnan(back[3].theta_hat)
        header = path.read_text().splitlines()[0]
        assert header == "method,functional,sweep_value,repeat,theta_hat,se,ci_low,ci_high,truth,covered," \
                         "wall_time_s,error"

    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=8))
    def test_csv_round_trip_property(self, thetas):
        import tempfile
        rows = [_row(t, repeat=i) for i, t in enumerate(thetas)]
        with tempfile.TemporaryDirectory() as d:
            write_csv(rows, os.path.join(d, "r.csv"))
            assert read_csv(os.path.join(d, "r.csv")) == rows

    def test_bad_header(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_csv(path)


class TestAggregation:
    def test_exact(self):
        # [TRIVIAL] zero error and symmetric errors
        assert aggregate_rmse([_row(0.0), _row(0.0)])[0] == 0.0
        assert aggregate_rmse([_row(0.3), _row(-0.3)])[0] == pytest.approx(0.3)

    def test_missing_cell(self):
        rmse, se = aggregate_rmse([_row(0.1)])
        assert np.isnan(rmse) and np.isnan(se)
        rmse, _ = aggregate_rmse([_row(0.1), _row(0.2, error="Boom")])
        assert np.isnan(rmse)

    def test_gaussian_oracle(self):
        # [DERIVED] N(0, sigma^2) errors over 1e4 repeats give RMSE = sigma +- 2%
        rng = np.random.default_rng(0)
        rows = [_row(e) for e in rng.normal(0, 0.03, 10_000)]
        rmse, se = aggregate_rmse(rows)
        assert rmse == pytest.approx(0.03, rel=0.02)
        # delta method: se(RMSE) ~ sigma / sqrt(2n)
        assert se == pytest.approx(0.03 / np.sqrt(2 * 10_000), rel=0.1)

    def test_explicit_truth(self):
        assert aggregate_rmse([_row(1.0, truth=5.0), _row(1.0, truth=5.0)], truth=1.0)[0] == 0.0

    def test_coverage(self):
        assert aggregate_coverage([_row(0.0), _row(0.05)]) == 1.0
        assert aggregate_coverage([_row(0.0), _row(0.5)]) == 0.5
        with pytest.raises(ValueError):
            aggregate_coverage([])

    def test_summarize(self):
        rows = [_row(0.1, method=m, repeat=r) for m in ("dope", "plugin") for r in range(4)]
        table = summarize(rows)
        assert {t["method"] for t in table} == {"dope", "plugin"}
        assert all(t["n"] == 4 and t["rmse"] == pytest.approx(0.1) for t in table)


class TestPlot:
    def test_two_polylines_and_parse_back(self, tmp_path):
        rows = [_row(0.01 * (1 + d) * s, method=m, value=d, repeat=r)
                for m, s in (("plugin", 2.0), ("dope", 1.0)) for d in (0.0, 0.25, 0.5) for r in range(3)]
        path = tmp_path / "p.svg"
        series = emit_plot(rows, "rmse", path)
        text = path.read_text()
        assert text.count('id="series-') == 2
        back = read_plot_series(path)["series"]
        for m in ("plugin", "dope"):
            xs = back[m]["x"]
            assert xs == [0.0, 0.25, 0.5]
            for x, y in zip(xs, back[m]["y"]):
                cell = [r for r in rows if r.method == m and r.sweep_value == x]
                assert y == pytest.approx(100 * aggregate_rmse(cell)[0])
        assert series.keys() == back.keys()

    def test_empty_filter(self, tmp_path):
        path = tmp_path / "p.svg"
        with pytest.raises(ValueError):
            emit_plot([_row(0.1), _row(0.2)], "rmse", path, methods=[])
        assert not path.exists()
        with pytest.raises(ValueError):
            emit_plot([], "rmse", path)

    def test_write_failure(self, tmp_path):
        with pytest.raises(OSError):
            emit_plot([_row(0.1), _row(0.2, repeat=1)], "rmse", tmp_path / "missing" / "p.svg")


class TestRun:
    def test_plugin_only_cardinality_and_determinism(self, tmp_path):
        # [TRIVIAL] repeats = 1, methods = {plugin}: one row per sweep value
        c = ExperimentConfig("t", sweep_values=(0.0, 1.0), methods=("plugin",), repeats=1, epochs=1,
                             truth_pool=50, out_dir=str(tmp_path))
        rows = run_experiment(c)
        assert len(rows) == 2 and not any(r.error for r in rows)
        again = run_experiment(c, reuse=False)
        strip = [lambda r: r.__class__(**{**r.__dict__, "wall_time_s": 0.0})][0]
        assert [strip(r) for r in again] == [strip(r) for r in rows]
        assert json.loads(open(c.csv_path() + ".config.json").read())["name"] == "t"

    def test_cached_csv_reused(self, tmp_path):
        c = ExperimentConfig("t", sweep_values=(0.5,), methods=("plugin",), repeats=1, epochs=1, truth_pool=50,
                             out_dir=str(tmp_path))
        write_csv([_row(0.42, value=0.5)], c.csv_path())
        assert run_experiment(c)[0].theta_hat == 0.42

    def test_failed_repeat_becomes_error_row(self, tmp_path, monkeypatch):
        from dope import harness

        def boom(*a, **k):
            raise RuntimeError("simulated failure")

        monkeypatch.setattr(harness, "_fit", boom)
        c = ExperimentConfig("t", sweep_values=(0.0, 0.5), methods=("plugin", "dope"), repeats=1, truth_pool=20,
                             out_dir=str(tmp_path))
        rows = run_experiment(c)
        assert len(rows) == 4 and all("simulated failure" in r.error for r in rows)

    def test_truth_cache(self, tmp_path):
        from dope.functionals import FunctionalSpec
        c = ExperimentConfig("t", truth_pool=30, out_dir=str(tmp_path))
        v = truth_value(c, FunctionalSpec("auc"))
        cache = json.loads((tmp_path / "truth_cache.json").read_text())
        assert list(cache.values()) == [v]
        assert truth_value(c, FunctionalSpec("auc")) == v
