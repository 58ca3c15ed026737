"""Batch pipeline front door.

Subcommands cover each analysis stage (simulate, propensity, hsic-test,
select, fit, predict, conformal, report); all of them read one JSON config
and write deterministic JSON/CSV artifacts into the output directory.
Every source of randomness flows from explicit seeds in the config (or the
--seed override); a missing seed is a validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import conformal as conformal_mod
from . import gradsel, hsic, krr, simulate
from .dataset import Dataset, load_dataset, split
from .kernels import (
    KernelSpec,
    categ_sq_distances,
    gluco_sq_distances,
    median_heuristic,
    numeric_sq_distances,
    pair_masses,
    simplex_lattice,
    tune_spec,
)
from .propensity import compute_weights, fit_propensity, mcar_weights

THREADS_ENV = "RKHSMISS_THREADS"


class ConfigError(ValueError):
    """Configuration failed validation; message names the offending field."""


def _require(cfg: dict, field: str):
    cur = cfg
    for part in field.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise ConfigError(f"config field {field!r} is required")
        cur = cur[part]
    return cur


def _existing_path(value: str, field: str) -> Path:
    p = Path(value)
    if not p.exists():
        raise ConfigError(f"config field {field!r} references a missing path: {value}")
    return p


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, float):
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _load_config(path: str) -> dict:
    with open(_existing_path(path, "--config"), "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_data(cfg: dict, like: Dataset | None = None, section: str = "data") -> Dataset:
    data = _require(cfg, section)
    path = _existing_path(_require(cfg, f"{section}.path"), f"{section}.path")
    schema = _existing_path(_require(cfg, f"{section}.schema"), f"{section}.schema")
    cgm = data.get("cgm_path")
    if cgm is not None:
        cgm = _existing_path(cgm, f"{section}.cgm_path")
    return load_dataset(
        path,
        schema,
        na_tokens=tuple(data.get("na_tokens", ("", "NA"))),
        cgm_path=cgm,
        grid_size=int(data.get("grid_size", 100)),
        like=like,
    )


def _weights_for(ds: Dataset, cfg: dict, features=None):
    pcfg = cfg.get("propensity", {})
    feats = features if features is not None else pcfg.get("features")
    reg = pcfg.get("regularization")
    if reg is not None:
        reg = (str(reg[0]), float(reg[1]))
    clip = float(pcfg.get("clip_floor", 0.01))
    if pcfg.get("mcar", False):
        return mcar_weights(ds, clip_floor=clip), None
    model = fit_propensity(ds, feats, reg, clip_floor=clip)
    return compute_weights(ds, model), model


def _kernel_spec(ds: Dataset, cfg: dict, weights) -> KernelSpec:
    kcfg = cfg.get("kernel", {})
    if "spec" in kcfg:
        return KernelSpec(**kcfg["spec"])
    tune = kcfg.get("tune", {})

    # tuning always scores candidates by the IPW smoother's LOO error;
    # the doubly robust mode would need an imputer per candidate
    def objective(spec: KernelSpec) -> float:
        _, err = krr.loo_lambda(ds, spec, weights, grid=None, mode="ipw")
        return err

    gamma_grid = tune.get("gamma_grid")
    step = float(tune.get("simplex_step", 0.25))
    return tune_spec(ds, weights.normalized, objective, gamma_grid, simplex_lattice(step))


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict, out: Path, seed: int, threads: int) -> None:
    sim = dict(_require(cfg, "simulate"))
    sim["seed"] = seed  # the resolved run seed (--seed beats the config)
    design = simulate.SimDesign(**sim)
    ds, truth = simulate.generate(design)

    header = ["id"] + [f"x{j}" for j in range(ds.p_num)] + [f"c{j}" for j in range(ds.p_cat)] + ["y"]
    rows = []
    raw_y = ds.raw_response()
    raw_x = ds.raw_numeric()
    for i in range(ds.n):
        row = [str(i)]
        row += [float(v) for v in raw_x[i]]
        row += [int(v) for v in ds.categorical[i]]
        row.append("NA" if not ds.mask[i] else float(raw_y[i]))
        rows.append(row)
    _write_csv(out / "dataset.csv", header, rows)

    schema = {"id": "id", "y": "response"}
    schema.update({f"x{j}": "numeric" for j in range(ds.p_num)})
    schema.update({f"c{j}": "categorical" for j in range(ds.p_cat)})
    _write_json(out / "schema.json", schema)

    if ds.has_distributional:
        cgm_rows = []
        for i, qf in enumerate(ds.distributional):
            for t, val in enumerate(qf.values):
                cgm_rows.append([str(i), t, float(val)])
        _write_csv(out / "cgm.csv", ["subject_id", "timestamp", "glucose"], cgm_rows)

    _write_json(
        out / "truth.json",
        {
            "m": [float(v) for v in truth["m"]],
            "pi": [float(v) for v in truth["pi"]],
            "active": list(truth["active"]),
            "expected_response": truth["expected_response"],
            "signal": truth["signal"],
            "seed": design.seed,
        },
    )


def cmd_propensity(cfg: dict, out: Path, seed: int, threads: int) -> None:
    ds = _load_data(cfg)
    weights, model = _weights_for(ds, cfg)
    if model is not None:
        (out / "propensity.json").parent.mkdir(parents=True, exist_ok=True)
        (out / "propensity.json").write_text(model.to_json() + "\n")
        pi = model.predict(ds)
    else:
        pi = np.full(ds.n, float(ds.mask.mean()))
    rows = [
        [ds.ids[i], float(pi[i]), float(weights.raw[i]), float(weights.normalized[i])]
        for i in range(ds.n)
    ]
    _write_csv(out / "weights.csv", ["id", "pi", "raw_weight", "normalized_weight"], rows)


def _single_variable_dataset(ds: Dataset, var: str) -> Dataset:
    if var in ds.numeric_names:
        j = ds.numeric_names.index(var)
        return Dataset(
            numeric=ds.numeric[:, [j]],
            categorical=np.zeros((ds.n, 0), dtype=np.int64),
            response=ds.response,
            mask=ds.mask,
            numeric_names=(var,),
            numeric_mean=ds.numeric_mean[[j]],
            numeric_scale=ds.numeric_scale[[j]],
            response_mean=ds.response_mean,
            response_scale=ds.response_scale,
            ids=ds.ids,
        )
    if var in ds.categorical_names:
        j = ds.categorical_names.index(var)
        return Dataset(
            numeric=np.zeros((ds.n, 0)),
            categorical=ds.categorical[:, [j]],
            response=ds.response,
            mask=ds.mask,
            categorical_names=(var,),
            cardinalities=(ds.cardinalities[j],),
            categories=(ds.categories[j],) if ds.categories else (),
            response_mean=ds.response_mean,
            response_scale=ds.response_scale,
            ids=ds.ids,
        )
    if var == "distributional":
        if not ds.has_distributional:
            raise ConfigError("hsic.variables includes 'distributional' but the data has none")
        return Dataset(
            numeric=np.zeros((ds.n, 0)),
            categorical=np.zeros((ds.n, 0), dtype=np.int64),
            response=ds.response,
            mask=ds.mask,
            distributional=ds.distributional,
            response_mean=ds.response_mean,
            response_scale=ds.response_scale,
            ids=ds.ids,
        )
    raise ConfigError(f"hsic.variables names unknown variable {var!r}")


def _variable_spec(vds: Dataset, weights) -> KernelSpec:
    masses = pair_masses(weights.normalized)
    iu = np.triu_indices(vds.n, k=1)
    if vds.p_num:
        sigma = median_heuristic(numeric_sq_distances(vds)[iu], masses)
        return KernelSpec(b=1.0, a=0.0, c=0.0, sigma_mult=sigma)
    if vds.p_cat:
        sigma = median_heuristic(categ_sq_distances(vds)[iu], masses)
        return KernelSpec(c=1.0, a=0.0, b=0.0, sigma_categ=sigma)
    sigma = median_heuristic(gluco_sq_distances(vds)[iu], masses)
    return KernelSpec(a=1.0, b=0.0, c=0.0, sigma_gluco=sigma)


def cmd_hsic_test(cfg: dict, out: Path, seed: int, threads: int) -> None:
    ds = _load_data(cfg)
    hcfg = cfg.get("hsic", {})
    m = int(hcfg.get("m", 199))
    variables = hcfg.get("variables")
    if variables is None:
        variables = list(ds.numeric_names) + list(ds.categorical_names)
        if ds.has_distributional:
            variables.append("distributional")
    pcfg = cfg.get("propensity", {})
    reg = pcfg.get("regularization")
    if reg is not None:
        reg = (str(reg[0]), float(reg[1]))
    clip = float(pcfg.get("clip_floor", 0.01))
    use_mcar = bool(pcfg.get("mcar", False))

    results = []
    for var in variables:
        vds = _single_variable_dataset(ds, var)
        if use_mcar:
            weights = mcar_weights(vds, clip_floor=clip)
            fitter = lambda d: mcar_weights(d, clip_floor=clip)  # noqa: E731
        else:
            # univariate observation model on the covariate under test
            features = ["distributional"] if var == "distributional" else [var]
            model = fit_propensity(vds, features, reg, clip_floor=clip)
            weights = compute_weights(vds, model)

            def fitter(d, _f=features, _r=reg, _c=clip):
                # an all-observed resample has the uniform weights the
                # logistic limit would give; avoid a degenerate refit
                if d.mask.all() or not d.mask.any():
                    return mcar_weights(d, clip_floor=_c)
                return compute_weights(d, fit_propensity(d, _f, _r, clip_floor=_c))

        spec_x = _variable_spec(vds, weights)
        spec_y = hsic.default_response_spec(vds, weights)
        res = hsic.bootstrap_test(
            vds,
            spec_x,
            spec_y,
            weights,
            m,
            seed,
            weight_fitter=fitter,
            reuse_weights=bool(hcfg.get("reuse_weights", False)),
            threads=threads,
        )
        results.append((var, res, spec_x))
        if hcfg.get("write_replicates", False):
            _write_csv(
                out / f"hsic_replicates_{var}.csv",
                ["replicate", "statistic"],
                [[j, float(v)] for j, v in enumerate(res.replicates)],
            )

    _write_json(
        out / "hsic.json",
        {
            "seed": seed,
            "m": m,
            "tests": [
                {
                    "variable": var,
                    "statistic": res.statistic,
                    "p_value": res.p_value,
                    "spec": json.loads(spec.to_json()),
                    "weights": res.weights_ref,
                }
                for var, res, spec in results
            ],
        },
    )
    _write_csv(
        out / "hsic_pvalues.csv",
        ["variable", "statistic", "p_value", "m"],
        [[var, res.statistic, res.p_value, res.m] for var, res, _ in results],
    )


def cmd_select(cfg: dict, out: Path, seed: int, threads: int) -> None:
    ds = _load_data(cfg)
    weights, _ = _weights_for(ds, cfg)
    scfg = cfg.get("select", {})
    omega = gradsel.locality_weights(ds, scfg.get("bandwidth"))
    grid = scfg.get("lambda_grid")
    if grid is None:
        grid = [10.0**e for e in range(-4, 1)]
    penalty = scfg.get("penalty", "group_lasso")
    lam, cv_err = gradsel.select_lambda(
        ds, weights, omega, grid, folds=int(scfg.get("folds", 5)), penalty=penalty, seed=seed
    )
    result = gradsel.fit_gradient(ds, weights, omega, lam, penalty, cv_error=cv_err)
    _write_json(
        out / "select.json",
        {
            "norms": {name: float(v) for name, v in zip(result.variable_names, result.norms)},
            "selected": [result.variable_names[i] for i in result.selected],
            "lambda": result.lam,
            "cv_error": result.cv_error,
            "threshold": result.threshold,
            "converged": result.converged,
            "seed": seed,
        },
    )


def cmd_fit(cfg: dict, out: Path, seed: int, threads: int) -> None:
    ds = _load_data(cfg)
    fcfg = cfg.get("fit", {})
    mode = fcfg.get("mode", "ipw")
    weights, _ = _weights_for(ds, cfg)
    spec = _kernel_spec(ds, cfg, weights)
    imputer = None
    if mode == "doubly_robust":
        if "imputer" not in fcfg:
            raise ConfigError("config field 'fit.imputer' is required when fit.mode is doubly_robust")
        imputer = krr.impute(ds, spec, lambda_mu=fcfg["imputer"].get("lambda"))
    grid = fcfg.get("lambda_grid")
    if fcfg.get("lambda") is not None:
        lam, loo_err = float(fcfg["lambda"]), float("nan")
    else:
        lam, loo_err = krr.loo_lambda(ds, spec, weights, grid=grid, mode=mode, imputer=imputer)
    model = krr.fit(ds, spec, weights, lam, mode, imputer=imputer, loo_error=loo_err)
    r2 = krr.weighted_loo_r2(ds, spec, weights, lam, mode, imputer=imputer)
    (out / "model.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(model.to_json() + "\n")
    _write_json(
        out / "fit.json",
        {"mode": mode, "lambda": lam, "loo_error": loo_err, "loo_r2": r2, "spec": json.loads(spec.to_json()), "seed": seed},
    )


def _load_model(cfg: dict, out: Path) -> tuple[Dataset, krr.KrrModel]:
    ds = _load_data(cfg)
    model_path = Path(cfg.get("model_path", out / "model.json"))
    if not model_path.exists():
        raise ConfigError(f"model file {model_path} not found; run the fit subcommand first")
    model = krr.KrrModel.from_json(model_path.read_text(), ds)
    return ds, model


def cmd_predict(cfg: dict, out: Path, seed: int, threads: int) -> None:
    ds, model = _load_model(cfg, out)
    if "query" in cfg:
        query = _load_data(cfg, like=ds, section="query")
    else:
        query = ds
    preds = krr.predict(model, query)
    rows = [[query.ids[i], float(preds[i])] for i in range(query.n)]
    _write_csv(out / "predictions.csv", ["id", "prediction"], rows)


def cmd_conformal(cfg: dict, out: Path, seed: int, threads: int) -> None:
    ds = _load_data(cfg)
    ccfg = cfg.get("conformal", {})
    alpha = float(ccfg.get("alpha", 0.1))
    frac = float(ccfg.get("train_fraction", 0.5))
    mode = ccfg.get("mode", "doubly_robust")
    pcfg = cfg.get("propensity", {})
    reg = pcfg.get("regularization")
    if reg is not None:
        reg = (str(reg[0]), float(reg[1]))
    sp = split(ds, frac, seed)
    train = ds.subset(sp.training)
    if "spec" in cfg.get("kernel", {}):
        spec = KernelSpec(**cfg["kernel"]["spec"])
    else:
        train_weights, _ = _weights_for(train, cfg)
        spec = _kernel_spec(train, cfg, train_weights)
    cal = conformal_mod.calibrate(
        ds,
        sp,
        spec,
        alpha,
        mode=mode,
        lambda_grid=ccfg.get("lambda_grid"),
        propensity_features=pcfg.get("features"),
        propensity_regularization=reg if reg is not None else ("l2", 1e-3),
        clip_floor=float(pcfg.get("clip_floor", 0.01)),
    )
    if "query" in cfg:
        query = _load_data(cfg, like=ds, section="query")
    else:
        query = ds.subset(sp.test)
    ivs = conformal_mod.intervals(cal, query)
    rows = [
        [
            query.ids[i],
            iv.center,
            iv.lower,
            iv.upper,
            iv.level,
            int(iv.upper - iv.lower > 1.0),
        ]
        for i, iv in enumerate(ivs)
    ]
    _write_csv(out / "conformal.csv", ["id", "prediction", "lower", "upper", "level", "length_gt_1"], rows)


def cmd_report(cfg: dict, out: Path, seed: int, threads: int) -> None:
    """Aggregate prior artifacts into the three plot-ready tables."""
    ds, model = _load_model(cfg, out)
    baseline = cfg.get("report", {}).get("baseline_variable")
    if baseline is None:
        baseline = ds.numeric_names[0]
    if baseline not in ds.numeric_names:
        raise ConfigError(f"report.baseline_variable {baseline!r} is not a numeric column")
    j = ds.numeric_names.index(baseline)
    obs = ds.observed_indices()
    obs_ds = ds.subset(obs)
    preds = krr.predict(model, obs_ds)
    raw_baseline = ds.raw_numeric()[obs, j]
    residuals = obs_ds.raw_response() - preds
    _write_csv(
        out / "report_residuals.csv",
        ["id", "baseline", "prediction", "residual"],
        [
            [obs_ds.ids[i], float(raw_baseline[i]), float(preds[i]), float(residuals[i])]
            for i in range(len(obs))
        ],
    )

    conformal_path = out / "conformal.csv"
    if conformal_path.exists():
        with open(conformal_path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        _write_csv(out / "report_intervals.csv", rows[0], rows[1:])
    else:
        _write_csv(out / "report_intervals.csv", ["id", "prediction", "lower", "upper", "level", "length_gt_1"], [])

    hsic_path = out / "hsic_pvalues.csv"
    if hsic_path.exists():
        with open(hsic_path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        _write_csv(out / "report_hsic.csv", rows[0], rows[1:])
    else:
        _write_csv(out / "report_hsic.csv", ["variable", "statistic", "p_value", "m"], [])


COMMANDS = {
    "simulate": cmd_simulate,
    "propensity": cmd_propensity,
    "hsic-test": cmd_hsic_test,
    "select": cmd_select,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "conformal": cmd_conformal,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rkhsmiss", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--output", default=None, help="output directory (default: config 'output')")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="worker threads for internal parallelism")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        out = Path(args.output or cfg.get("output") or ".")
        seed = args.seed if args.seed is not None else cfg.get("seed")
        if seed is None:
            raise ConfigError("config field 'seed' is required (explicit seeds only)")
        threads = args.threads
        if threads is None:
            threads = int(os.environ.get(THREADS_ENV, cfg.get("threads", 1)))
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, int(seed), threads)
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
