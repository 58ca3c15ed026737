import json
import subprocess
import sys
from pathlib import Path

import pytest

from rkhsmiss.cli import main


def run_cli(args):
    return main([str(a) for a in args])


def write_config(path, payload):
    path.write_text(json.dumps(payload, indent=2))
    return path


def test_float_formatting_handles_infinities():
    from rkhsmiss.cli import _fmt

    assert _fmt(float("inf")) == "inf"
    assert _fmt(float("-inf")) == "-inf"
    assert _fmt(0.1) == "0.1"
    assert _fmt(3) == "3"


def test_unknown_subcommand_exits_nonzero():
    proc = subprocess.run(
        [sys.executable, "-m", "rkhsmiss.cli", "frobnicate", "--config", "x.json"],
        capture_output=True,
    )
    assert proc.returncode != 0


def test_missing_seed_is_validation_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"simulate": {"n": 20}})
    rc = run_cli(["simulate", "--config", cfg, "--output", tmp_path / "out"])
    assert rc == 1
    assert "seed" in capsys.readouterr().err


def test_missing_config_path_is_error(tmp_path, capsys):
    rc = run_cli(["simulate", "--config", tmp_path / "absent.json"])
    assert rc == 1
    assert "missing path" in capsys.readouterr().err


def simulate_config(tmp_path, out, extra=None, n=60, signal="null", p=0.6):
    payload = {
        "seed": 7,
        "output": str(out),
        "simulate": {
            "n": n,
            "p_num": 1,
            "signal": signal,
            "noise_sd": 1.0,
            "mechanism": {"kind": "mcar", "p": p},
        },
        "data": {"path": str(out / "dataset.csv"), "schema": str(out / "schema.json")},
        "propensity": {"mcar": True},
        "hsic": {"m": 99},
    }
    if extra:
        payload.update(extra)
    return write_config(tmp_path / "config.json", payload)


def test_simulate_then_hsic_pipeline(tmp_path):
    out = tmp_path / "out"
    cfg = simulate_config(tmp_path, out)
    assert run_cli(["simulate", "--config", cfg]) == 0
    assert (out / "dataset.csv").exists() and (out / "schema.json").exists()
    assert (out / "truth.json").exists()

    assert run_cli(["hsic-test", "--config", cfg]) == 0
    result = json.loads((out / "hsic.json").read_text())
    assert result["tests"][0]["variable"] == "x0"
    assert 0.0 <= result["tests"][0]["p_value"] <= 1.0
    table = (out / "hsic_pvalues.csv").read_text().splitlines()
    assert table[0] == "variable,statistic,p_value,m"


def test_pipeline_rerun_is_byte_identical(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        cfg = simulate_config(tmp_path, out)
        assert run_cli(["simulate", "--config", cfg]) == 0
        assert run_cli(["hsic-test", "--config", cfg]) == 0
        assert run_cli(["propensity", "--config", cfg]) == 0
    for name in ("dataset.csv", "schema.json", "truth.json", "hsic.json", "hsic_pvalues.csv", "weights.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


def test_fit_requires_imputer_config_for_dr(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = simulate_config(
        tmp_path, out,
        extra={"fit": {"mode": "doubly_robust"}, "kernel": {"spec": {"b": 1.0, "sigma_mult": 1.0}}},
    )
    assert run_cli(["simulate", "--config", cfg]) == 0
    rc = run_cli(["fit", "--config", cfg])
    assert rc == 1
    assert "fit.imputer" in capsys.readouterr().err


def test_full_pipeline_walkthrough(tmp_path):
    out = tmp_path / "out"
    cfg = simulate_config(
        tmp_path, out, n=120, signal="linear", p=0.7,
        extra={
            "kernel": {"spec": {"b": 1.0, "sigma_mult": 1.5}},
            "fit": {"mode": "ipw"},
            "select": {"lambda_grid": [0.01, 0.1], "folds": 2},
            "conformal": {"alpha": 0.2, "train_fraction": 0.5, "mode": "ipw"},
            "propensity": {"mcar": False, "regularization": ["l2", 0.001]},
        },
    )
    for command in ("simulate", "propensity", "hsic-test", "select", "fit", "predict", "conformal", "report"):
        assert run_cli([command, "--config", cfg]) == 0, command

    preds = (out / "predictions.csv").read_text().splitlines()
    assert preds[0] == "id,prediction"
    assert len(preds) == 121

    conf = (out / "conformal.csv").read_text().splitlines()
    assert conf[0] == "id,prediction,lower,upper,level,length_gt_1"

    select = json.loads((out / "select.json").read_text())
    assert "norms" in select and "selected" in select and "lambda" in select

    fit_info = json.loads((out / "fit.json").read_text())
    assert fit_info["mode"] == "ipw" and "loo_r2" in fit_info

    residuals = (out / "report_residuals.csv").read_text().splitlines()
    assert residuals[0] == "id,baseline,prediction,residual"
    intervals = (out / "report_intervals.csv").read_text().splitlines()
    assert intervals[0] == "id,prediction,lower,upper,level,length_gt_1"
    hsic_table = (out / "report_hsic.csv").read_text().splitlines()
    assert hsic_table[0] == "variable,statistic,p_value,m"


def test_fit_with_kernel_tuning_and_dr(tmp_path):
    out = tmp_path / "out"
    cfg = simulate_config(
        tmp_path, out, n=60, signal="linear", p=0.8,
        extra={
            "kernel": {"tune": {"gamma_grid": [0.5, 1.0], "simplex_step": 0.5}},
            "fit": {"mode": "doubly_robust", "imputer": {"lambda": None}},
            "propensity": {"regularization": ["l2", 0.001]},
        },
    )
    assert run_cli(["simulate", "--config", cfg]) == 0
    assert run_cli(["fit", "--config", cfg]) == 0
    info = json.loads((out / "fit.json").read_text())
    assert info["mode"] == "doubly_robust"
    assert abs(sum(info["spec"][k] for k in ("a", "b", "c")) - 1.0) < 1e-9


def test_predict_with_external_query(tmp_path):
    out = tmp_path / "out"
    cfg_path = simulate_config(
        tmp_path, out, n=50, signal="linear", p=0.8,
        extra={"kernel": {"spec": {"b": 1.0, "sigma_mult": 1.5}}, "fit": {"mode": "ipw"},
               "propensity": {"regularization": ["l2", 0.001]}},
    )
    assert run_cli(["simulate", "--config", cfg_path]) == 0
    assert run_cli(["fit", "--config", cfg_path]) == 0
    assert run_cli(["predict", "--config", cfg_path]) == 0
    in_sample = (out / "predictions.csv").read_text()

    # querying the training file through the reference-standardization path
    # must reproduce the in-sample predictions
    cfg = json.loads(Path(cfg_path).read_text())
    cfg["query"] = {"path": str(out / "dataset.csv"), "schema": str(out / "schema.json")}
    cfg_path2 = write_config(tmp_path / "config2.json", cfg)
    assert run_cli(["predict", "--config", cfg_path2]) == 0
    assert (out / "predictions.csv").read_text() == in_sample


def test_seed_override_changes_outputs(tmp_path):
    out = tmp_path / "out"
    cfg = simulate_config(tmp_path, out)
    assert run_cli(["simulate", "--config", cfg]) == 0
    first = (out / "dataset.csv").read_bytes()
    assert run_cli(["simulate", "--config", cfg, "--seed", "8"]) == 0
    assert (out / "dataset.csv").read_bytes() != first


def test_report_validates_baseline_variable(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = simulate_config(
        tmp_path, out, n=40, signal="linear", p=0.8,
        extra={"kernel": {"spec": {"b": 1.0, "sigma_mult": 1.5}}, "fit": {"mode": "ipw"},
               "propensity": {"regularization": ["l2", 0.001]},
               "report": {"baseline_variable": "bogus"}},
    )
    assert run_cli(["simulate", "--config", cfg]) == 0
    assert run_cli(["fit", "--config", cfg]) == 0
    rc = run_cli(["report", "--config", cfg])
    assert rc == 1
    assert "baseline_variable" in capsys.readouterr().err


def test_inputs_not_mutated_by_downstream_commands(tmp_path):
    out = tmp_path / "out"
    cfg = simulate_config(tmp_path, out)
    assert run_cli(["simulate", "--config", cfg]) == 0
    data_before = (out / "dataset.csv").read_bytes()
    assert run_cli(["hsic-test", "--config", cfg]) == 0
    assert (out / "dataset.csv").read_bytes() == data_before


def test_distributional_pipeline_roundtrip(tmp_path):
    out = tmp_path / "out"
    cfg = write_config(
        tmp_path / "config.json",
        {
            "seed": 3,
            "output": str(out),
            "simulate": {
                "n": 50,
                "p_num": 1,
                "signal": "quantile_signal",
                "noise_sd": 0.5,
                "mechanism": {"kind": "mcar", "p": 0.8},
                "grid_size": 16,
            },
            "data": {
                "path": str(out / "dataset.csv"),
                "schema": str(out / "schema.json"),
                "cgm_path": str(out / "cgm.csv"),
                "grid_size": 16,
            },
            "propensity": {"mcar": True},
            "hsic": {"m": 99, "variables": ["distributional"], "write_replicates": True},
        },
    )
    assert run_cli(["simulate", "--config", cfg]) == 0
    assert (out / "cgm.csv").exists()
    assert run_cli(["hsic-test", "--config", cfg]) == 0
    result = json.loads((out / "hsic.json").read_text())
    assert result["tests"][0]["variable"] == "distributional"
    # strong distributional signal: dependence should be detected
    assert result["tests"][0]["p_value"] < 0.05
    replicates = (out / "hsic_replicates_distributional.csv").read_text().splitlines()
    assert replicates[0] == "replicate,statistic"
    assert len(replicates) == 100

    # the emitted stream has exactly grid_size readings per subject, so
    # reloading reproduces every quantile function bit for bit
    import numpy as np

    from rkhsmiss.dataset import load_dataset
    from rkhsmiss.simulate import SimDesign, generate

    reloaded = load_dataset(out / "dataset.csv", out / "schema.json",
                            cgm_path=out / "cgm.csv", grid_size=16)
    original, _ = generate(SimDesign(n=50, p_num=1, signal="quantile_signal", noise_sd=0.5,
                                     mechanism={"kind": "mcar", "p": 0.8}, seed=3, grid_size=16))
    np.testing.assert_array_equal(reloaded.quantile_matrix(), original.quantile_matrix())
