import json

import pytest

from dope.cli import cli_main
from dope.data import load_dataset


class TestCli:
    def test_missing_config(self, capsys):
        assert cli_main(["experiment", "--config", "missing.json"]) == 1
        assert "not found" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert cli_main(["verify", "--frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_no_command(self):
        assert cli_main([]) == 1

    def test_invalid_config(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"name": "x", "repeats": 0}))
        assert cli_main(["experiment", "--config", str(p)]) == 1

    def test_generate_parseable(self, tmp_path):
        out = tmp_path / "d.json"
        assert cli_main(["generate", "--dgp", "pk", "--rho", "0", "--seed", "7", "--out", str(out)]) == 0
        grid, data = load_dataset(out)
        assert len(data) == 64 and grid.size == 128

    def test_generate_bad_rho(self, tmp_path):
        assert cli_main(["generate", "--rho", "2", "--out", str(tmp_path / "d.json")]) == 1

    def test_train_and_estimate(self, tmp_path):
        data = tmp_path / "d.json"
        ck = tmp_path / "ck.json"
        rep = tmp_path / "r.json"
        assert cli_main(["generate", "--n", "8", "--seed", "1", "--out", str(data), "--with-oracle"]) == 0
        assert cli_main(["train", "--data", str(data), "--out", str(ck), "--epochs", "1"]) == 0
        assert cli_main(["estimate", "--data", str(data), "--method", "plugin", "--checkpoint", str(ck),
                         "--out", str(rep)]) == 0
        doc = json.loads(rep.read_text())
        assert doc["method"] == "plugin" and doc["ci"][0] <= doc["theta_hat"] <= doc["ci"][1]
        assert cli_main(["estimate", "--data", str(data), "--method", "dope_oracle", "--functional", "tat",
                         "--epochs", "1", "--out", str(rep)]) == 0
        assert json.loads(rep.read_text())["method"] == "dope_oracle"

    def test_oracle_needs_latent(self, tmp_path):
        data = tmp_path / "d.json"
        cli_main(["generate", "--n", "6", "--out", str(data)])
        assert cli_main(["estimate", "--data", str(data), "--method", "dope_oracle"]) == 1

    def test_runtime_failure(self, tmp_path):
        bad = tmp_path / "d.json"
        bad.write_text("{}")
        assert cli_main(["train", "--data", str(bad), "--out", str(tmp_path / "c.json")]) == 2

    def test_experiment_writes_csv_and_plot(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"name": "mini", "sweep_values": [0.5], "methods": ["plugin"], "repeats": 2,
                                   "epochs": 1, "truth_pool": 40, "out_dir": str(tmp_path)}))
        assert cli_main(["experiment", "--config", str(cfg)]) == 0
        assert list(tmp_path.glob("mini-*.csv")) and (tmp_path / "mini-auc.svg").exists()

    @pytest.mark.parametrize("suite", ["functionals", "solvers"])
    def test_verify(self, suite, capsys):
        assert cli_main(["verify", "--suite", suite]) == 0
        assert "checks passed" in capsys.readouterr().out
