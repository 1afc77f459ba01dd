"""CLI surface: subcommands, exit codes, machine-readable output."""

import json

import pytest

from parssm.cli import main


class TestSolve:
    def test_s5_newton_single_iteration(self, capsys):
        code = main(["solve", "--model", "s5", "--method", "newton", "-T", "1000",
                     "--metric", "merit", "--tol", "1e-18", "--json"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["iterations"] == 1
        assert payload["converged"] is True
        assert payload["final_err_vs_oracle"] <= 1e-8

    def test_kalman_method(self, capsys):
        code = main(["solve", "--model", "gru", "--D", "3", "-T", "32",
                     "--method", "kalman", "--lambda", "0.5", "--tol", "1e-8", "--json"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["converged"] is True

    def test_human_readable_default(self, capsys):
        code = main(["solve", "--model", "affine", "--alpha", "0.5", "-T", "16"])
        assert code == 0
        assert "iterations:" in capsys.readouterr().out


class TestDiagnose:
    def test_picard_norm_T1(self, capsys):
        assert main(["diagnose", "picard-norm", "-T", "1"]) == 0
        assert float(capsys.readouterr().out) == pytest.approx(1.0)

    def test_pl_bounds(self, capsys):
        assert main(["diagnose", "pl-bounds", "--lle", "0.0", "-T", "2", "-D", "1"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["lower"] == pytest.approx(0.5)
        assert payload["upper"] == pytest.approx(0.816496580927726)

    def test_basin(self, capsys):
        assert main(["diagnose", "basin", "--mu", "1.0", "--L", "4.0"]) == 0
        assert float(capsys.readouterr().out) == pytest.approx(0.5)

    def test_gamma_jacobi_scalar_affine(self, capsys):
        assert main(["diagnose", "gamma", "--model", "affine", "--alpha", "0.3",
                     "-T", "32", "--method", "jacobi"]) == 0
        assert float(capsys.readouterr().out) == pytest.approx(0.3, abs=1e-10)


class TestOracle:
    def test_lm_smoother(self, capsys):
        assert main(["oracle", "lm-smoother", "-T", "16", "-D", "3", "--lambda", "0.5"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["ok"] and payload["max_deviation"] <= 1e-8

    def test_scan_fold(self, capsys):
        for kind in ("dense", "diagonal"):
            assert main(["oracle", "scan-fold", "-T", "128", "-D", "4", "--kind", kind]) == 0
            assert json.loads(capsys.readouterr().out)["ok"]

    def test_jinv(self, capsys):
        assert main(["oracle", "jinv", "-T", "8", "-D", "3"]) == 0
        assert json.loads(capsys.readouterr().out)["ok"]


class TestLle:
    def test_constant_contraction(self, capsys):
        import numpy as np

        assert main(["lle", "--model", "affine", "--alpha", "0.5", "-T", "64"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["lle"] == pytest.approx(np.log(0.5), abs=1e-12)


class TestBenchCommand:
    def test_bench_writes_csv(self, tmp_path, capsys):
        cfg = {
            "schema": 1, "name": "cli-smoke",
            "model": {"kind": "affine", "alpha": 0.5, "T": 16},
            "methods": [{"method": "newton"}, {"method": "picard"}],
            "sweep": {}, "seeds": [0], "tolerance": 1e-8,
            "output": str(tmp_path / "rows.csv"),
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        assert main(["bench", "--config", str(path)]) == 0
        assert (tmp_path / "rows.csv").exists()
        assert "wrote 2 rows" in capsys.readouterr().out


class TestExitCodes:
    def test_usage_error_is_2(self, capsys):
        assert main(["solve", "--model", "unknown-kind"]) == 2

    def test_bad_config_is_2(self, tmp_path, capsys):
        p = tmp_path / "broken.json"
        p.write_text("{")
        assert main(["bench", "--config", str(p)]) == 2

    def test_bad_flag_value_is_2(self, capsys):
        assert main(["solve", "--model", "rnn", "--D", "4", "--g", "-2.0", "-T", "8"]) == 2

    def test_runtime_failure_is_3(self, tmp_path, capsys):
        assert main(["bench", "--config", str(tmp_path / "missing.json")]) == 3
        err = capsys.readouterr().err
        assert json.loads(err)["type"]
