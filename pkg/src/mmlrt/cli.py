"""Command-line interface.

Every subcommand reads its options from flags and, optionally, a JSON
config file (``--config``).  Flags win over the file, the file wins over
the built-in defaults.  The fully resolved options are written to
``manifest.json`` in the output directory, and passing that manifest back
as ``--config`` repeats the run.

Exit status is 0 on success, 1 for invalid options or malformed input and
2 when a computation fails.
"""

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, default_workers, parametric_bootstrap
from .censored_exp import (
    GUMBEL_MEDIAN,
    censored_monte_carlo,
    cov_scores,
    local_stationarity_estimate,
    long_range_ratio,
    rho,
    theta_of,
    v_theta,
)
from .ctmc import CtmcParams, paths_to_batch, read_paths, sample_paths, write_paths
from .mixture import (
    FitOptions,
    MixtureParams,
    em_fit_two_component,
    fit_one_component,
    lrt_statistic,
    penalty_report,
)
from .score_asymptotics import DivergenceConfig, divergence_report
from .streams import stream

FIT_DEFAULTS = {"max_iters": 500, "loglik_tol": 1e-8, "n_restarts": 10, "init_jitter": 0.5}

DEFAULTS = {
    "simulate": {"params": None, "n": 100},
    "fit": {"paths": None, "components": "both", "states": None, **FIT_DEFAULTS},
    "lrt": {"paths": None, "mode": "composite", "null_params": None, "states": None, "tie_alpha": False,
            "d_choices": None, **FIT_DEFAULTS},
    "bootstrap": {"paths": None, "null_params": None, "lambda_observed": None, "n": None, "states": None,
                  "B": 10_000, "chi2_df": 1, "bins": 50, **FIT_DEFAULTS},
    "censored-mc": {"n": [100], "T": 1.0, "reps": 2000, "theta_true": 1.0, "grid_points": 512,
                    "refine_tol": 1e-6},
    "cov-verify": {"s_min": -2.0, "s_max": 4.0, "grid": 50, "T": [0.5, 1.0, 5.0],
                   "deltas": [0.2, 0.1, 0.05, 0.025, 0.0125, 0.00625], "long_range": [5.0, 10.0, 20.0]},
    "divergence": {"base": None, "c_values": [2.0, 5.0, 10.0, 20.0], "nsim": 100_000},
}

# Base chain used by ``divergence`` when no file is given: one transient
# state with unit rate into an absorbing state, horizon 1.
TWO_STATE_BASE = {"alpha": [1.0, 0.0], "beta": [1.0, 0.0], "gamma": [[0.0, 1.0], [0.0, 0.0]], "T": 1.0}


class UsageError(Exception):
    pass


def fmt(x):
    return f"{x:.17g}"


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}: {what} is not valid JSON ({exc.msg})") from None


def load_ctmc(path):
    d = load_json(path, "chain parameters")
    try:
        return CtmcParams.from_dict(d)
    except KeyError as exc:
        raise ValueError(f"{path}: missing field {exc}") from None


# ---------------------------------------------------------------------------
# Argument parsing


def _common(p):
    S = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=S, help="master seed (default 0)")
    p.add_argument("--workers", type=int, default=S,
                   help="worker processes (default $MMLRT_WORKERS or the CPU count)")
    p.add_argument("--config", default=S, help="JSON file of options; a previous manifest also works")
    p.add_argument("--out", default=S, help="output directory (default .)")


def _fit_flags(p):
    S = argparse.SUPPRESS
    p.add_argument("--max-iters", dest="max_iters", type=int, default=S)
    p.add_argument("--loglik-tol", dest="loglik_tol", type=float, default=S)
    p.add_argument("--n-restarts", dest="n_restarts", type=int, default=S)
    p.add_argument("--init-jitter", dest="init_jitter", type=float, default=S)
    p.add_argument("--states", type=int, default=S, help="number of states, if not all are visited")


def build_parser():
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="mmlrt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate paths from chain or mixture parameters")
    _common(p)
    p.add_argument("--params", default=S, help="CtmcParams or MixtureParams JSON")
    p.add_argument("--n", type=int, default=S)

    p = sub.add_parser("fit", help="fit one and/or two components to paths")
    _common(p)
    p.add_argument("--paths", default=S, help="JSONL paths")
    p.add_argument("--components", choices=["1", "2", "both"], default=S)
    _fit_flags(p)

    p = sub.add_parser("lrt", help="log-likelihood ratio of one versus two components")
    _common(p)
    p.add_argument("--paths", default=S)
    p.add_argument("--mode", choices=["composite", "simple"], default=S)
    p.add_argument("--null-params", dest="null_params", default=S, help="CtmcParams JSON for simple mode")
    p.add_argument("--tie-alpha", dest="tie_alpha", action="store_true", default=S)
    p.add_argument("--d-choices", dest="d_choices", type=int, nargs="+", default=S,
                   help="parameter-count differences for the penalty table")
    _fit_flags(p)

    p = sub.add_parser("bootstrap", help="parametric bootstrap of the ratio statistic")
    _common(p)
    p.add_argument("--paths", default=S, help="observed paths; the null is fitted to them")
    p.add_argument("--null-params", dest="null_params", default=S, help="fitted null, instead of --paths")
    p.add_argument("--lambda-observed", dest="lambda_observed", type=float, default=S)
    p.add_argument("--n", type=int, default=S, help="paths per replicate (default: observed count)")
    p.add_argument("--B", type=int, default=S)
    p.add_argument("--chi2-df", dest="chi2_df", type=int, default=S)
    p.add_argument("--bins", type=int, default=S)
    _fit_flags(p)

    p = sub.add_parser("censored-mc", help="Monte Carlo of the censored exponential sup statistic")
    _common(p)
    p.add_argument("--n", type=int, nargs="+", default=S)
    p.add_argument("--T", type=float, default=S)
    p.add_argument("--reps", type=int, default=S)
    p.add_argument("--theta-true", dest="theta_true", type=float, default=S)
    p.add_argument("--grid-points", dest="grid_points", type=int, default=S)
    p.add_argument("--refine-tol", dest="refine_tol", type=float, default=S)

    p = sub.add_parser("cov-verify", help="check the closed-form covariance identities")
    _common(p)
    p.add_argument("--s-min", dest="s_min", type=float, default=S)
    p.add_argument("--s-max", dest="s_max", type=float, default=S)
    p.add_argument("--grid", type=int, default=S)
    p.add_argument("--T", type=float, nargs="+", default=S)
    p.add_argument("--deltas", type=float, nargs="+", default=S)
    p.add_argument("--long-range", dest="long_range", type=float, nargs="+", default=S)

    p = sub.add_parser("divergence", help="second moment of the density ratio along rate scalings")
    _common(p)
    p.add_argument("--base", default=S, help="CtmcParams JSON (default: two-state absorbing chain)")
    p.add_argument("--c-values", dest="c_values", type=float, nargs="+", default=S)
    p.add_argument("--nsim", type=int, default=S)
    return parser


def resolve(command, flags):
    """Merge defaults, the config file and explicit flags, in that order."""
    cfg = dict(DEFAULTS[command])
    cfg.update(seed=0, out=".", workers=None)
    path = flags.pop("config", None)
    if path is not None:
        d = load_json(path, "config")
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        if "config" in d and "command" in d:
            d = d["config"]
        unknown = set(d) - set(cfg)
        if unknown:
            raise ValueError(f"{path}: unknown option(s) {', '.join(sorted(unknown))}")
        cfg.update(d)
    cfg.update(flags)
    if cfg["workers"] is None:
        cfg["workers"] = default_workers()
    if cfg["workers"] < 1:
        raise ValueError("--workers must be at least 1")
    return cfg


def fit_options(cfg):
    return FitOptions(max_iters=cfg["max_iters"], loglik_tol=cfg["loglik_tol"],
                      n_restarts=cfg["n_restarts"], init_jitter=cfg["init_jitter"], seed=cfg["seed"])


def need(cfg, key):
    if cfg.get(key) is None:
        raise UsageError(f"--{key.replace('_', '-')} is required")
    return cfg[key]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(cfg, out):
    d = load_json(need(cfg, "params"), "parameters")
    n, seed = cfg["n"], cfg["seed"]
    if n < 1:
        raise ValueError("--n must be positive")
    try:
        if "p" in d:
            mp = MixtureParams.from_dict(d)
            labels = stream(seed, 0).random(n) < mp.p
            k = int(labels.sum())
            paths0 = sample_paths(mp.component(0), n - k, stream(seed, 1))
            paths1 = sample_paths(mp.component(1), k, stream(seed, 2))
            it0, it1 = iter(paths0), iter(paths1)
            paths = [next(it1) if lab else next(it0) for lab in labels]
            write_csv(os.path.join(out, "labels.csv"), ["path", "component"],
                      [(i, int(lab)) for i, lab in enumerate(labels)])
        else:
            paths = sample_paths(CtmcParams.from_dict(d), n, stream(seed))
    except KeyError as exc:
        raise ValueError(f"{cfg['params']}: missing field {exc}") from None
    write_paths(paths, os.path.join(out, "paths.jsonl"))
    print(f"wrote {n} paths")


def _batch(cfg):
    return paths_to_batch(read_paths(need(cfg, "paths")), cfg["states"])


def cmd_fit(cfg, out):
    batch = _batch(cfg)
    res = {"n": len(batch)}
    if cfg["components"] in ("1", "both"):
        f1 = fit_one_component(batch)
        res["fit1"] = f1.to_dict()
        print(f"one component: loglik {fmt(f1.loglik)}")
    if cfg["components"] in ("2", "both"):
        f2 = em_fit_two_component(batch, fit_options(cfg))
        res["fit2"] = f2.to_dict()
        print(f"two components: loglik {fmt(f2.loglik)} converged {f2.converged}")
    write_json(os.path.join(out, "fit.json"), res)


def cmd_lrt(cfg, out):
    batch = _batch(cfg)
    null = load_ctmc(cfg["null_params"]) if cfg["null_params"] else None
    r = lrt_statistic(batch, cfg["mode"], null, fit_options(cfg), tie_alpha=cfg["tie_alpha"])
    res = {"n": len(batch), "mode": cfg["mode"], **r.to_dict()}
    if cfg["d_choices"]:
        res["penalties"] = penalty_report(r.fit1.loglik, r.fit2.loglik, len(batch), cfg["d_choices"]).to_dict()
    write_json(os.path.join(out, "lrt.json"), res)
    print(f"lambda {fmt(r.lam)}")
    print(f"2*lambda {fmt(r.doubled)}")


def cmd_bootstrap(cfg, out):
    opts = fit_options(cfg)
    if cfg["paths"] is not None:
        batch = _batch(cfg)
        null = fit_one_component(batch).params
        lam = lrt_statistic(batch, "composite", None, opts).lam
        if cfg["lambda_observed"] is None:
            cfg["lambda_observed"] = lam
        if cfg["n"] is None:
            cfg["n"] = len(batch)
        write_json(os.path.join(out, "null_fit.json"), null.to_dict())
    elif cfg["null_params"] is not None:
        null = load_ctmc(cfg["null_params"])
        need(cfg, "lambda_observed")
        need(cfg, "n")
    else:
        raise UsageError("one of --paths or --null-params is required")
    bc = BootstrapConfig(B=cfg["B"], n=cfg["n"], master_seed=cfg["seed"], fit_opts=opts, workers=cfg["workers"],
                         chi2_df=cfg["chi2_df"], bins=cfg["bins"])
    rep = parametric_bootstrap(null, cfg["lambda_observed"], bc)
    with open(os.path.join(out, "bootstrap.json"), "w") as fh:
        fh.write(rep.to_json() + "\n")
    rep.write_histogram_csv(os.path.join(out, "histogram.csv"))
    print(f"lambda_observed {fmt(rep.lambda_observed)}")
    print(f"p_boot {fmt(rep.p_boot)}")
    print(f"p_chi2 {fmt(rep.p_chi2)}")
    if rep.failures:
        print(f"{rep.failures} replicate(s) hit max_iters", file=sys.stderr)


def cmd_censored_mc(cfg, out):
    ns = cfg["n"] if isinstance(cfg["n"], list) else [cfg["n"]]
    summary = []
    rows, cdf_rows = [], []
    for n in ns:
        mc = censored_monte_carlo(n, cfg["reps"], cfg["T"], cfg["seed"], cfg["theta_true"],
                                  cfg["grid_points"], cfg["refine_tol"], cfg["workers"])
        g = mc.centered
        for i in range(cfg["reps"]):
            rows.append((n, i, mc.lam[i], g[i], mc.theta_hat[i], mc.p_hat[i]))
        for x, emp, ref in mc.cdf_table():
            cdf_rows.append((n, x, emp, ref))
        s = {"n": n, "mean_lambda": float(mc.lam.mean()), "median_G": float(np.median(g)),
             "gumbel_median": GUMBEL_MEDIAN, "ks_gumbel": mc.ks_gumbel()}
        summary.append(s)
        print(f"n {n}: mean lambda {fmt(s['mean_lambda'])}  median G {fmt(s['median_G'])}  "
              f"KS {fmt(s['ks_gumbel'])}")
    write_csv(os.path.join(out, "replicates.csv"), ["n", "rep", "lambda", "G", "theta_hat", "p_hat"], rows)
    write_csv(os.path.join(out, "cdf.csv"), ["n", "x", "empirical", "gumbel"], cdf_rows)
    write_json(os.path.join(out, "summary.json"), summary)


def cmd_cov_verify(cfg, out):
    if cfg["grid"] < 2 or not cfg["s_max"] > cfg["s_min"]:
        raise ValueError("need --grid >= 2 and --s-max > --s-min")
    s = np.linspace(cfg["s_min"], cfg["s_max"], cfg["grid"])
    S, U = np.meshgrid(s, s, indexing="ij")
    rows, summary = [], {}
    for T in cfg["T"]:
        th1, th2 = theta_of(S), theta_of(U)
        lhs = rho(S, U, T) * np.sqrt(v_theta(th1, T) * v_theta(th2, T))
        rhs = cov_scores(th1, th2, T)
        resid = np.abs(lhs - rhs)
        diag = np.abs(rho(s, s, T) - 1.0)
        rows.append((T, float(resid.max()), float(diag.max())))
        summary[str(T)] = {"max_identity_residual": float(resid.max()), "max_diagonal_residual": float(diag.max())}
    write_csv(os.path.join(out, "identity.csv"), ["T", "max_identity_residual", "max_diagonal_residual"], rows)

    deltas = np.asarray(cfg["deltas"], dtype=float)
    ls_rows = []
    for T in [math.inf] + list(cfg["T"]):
        for t in s:
            ratios, limit = local_stationarity_estimate(float(t), T, deltas)
            ls_rows.append((T, float(t), limit, *ratios))
    write_csv(os.path.join(out, "local_stationarity.csv"),
              ["T", "t", "V"] + [f"ratio_{fmt(d)}" for d in deltas], ls_rows)

    lr_rows = [(d, long_range_ratio(d), long_range_ratio(d) - 2.0) for d in cfg["long_range"]]
    write_csv(os.path.join(out, "long_range.csv"), ["delta", "ratio", "ratio_minus_2"], lr_rows)
    summary["uncensored_rho_delta_1"] = float(rho(0.0, 1.0))
    write_json(os.path.join(out, "summary.json"), summary)
    for T, r, _ in rows:
        print(f"T {fmt(T)}: max identity residual {fmt(r)}")


def cmd_divergence(cfg, out):
    base = load_ctmc(cfg["base"]) if cfg["base"] else CtmcParams.from_dict(TWO_STATE_BASE)
    dc = DivergenceConfig(base, tuple(cfg["c_values"]), cfg["nsim"], cfg["seed"])
    rep = divergence_report(dc)
    with open(os.path.join(out, "divergence.json"), "w") as fh:
        fh.write(rep.to_json() + "\n")
    text = rep.to_text()
    with open(os.path.join(out, "divergence.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "lrt": cmd_lrt,
    "bootstrap": cmd_bootstrap,
    "censored-mc": cmd_censored_mc,
    "cov-verify": cmd_cov_verify,
    "divergence": cmd_divergence,
}


def run(argv=None):
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; usage errors are validation errors here.
        return 0 if exc.code == 0 else 1
    flags = vars(ns)
    command = flags.pop("command")
    started = time.time()
    try:
        cfg = resolve(command, flags)
        out = cfg["out"]
        os.makedirs(out, exist_ok=True)
        COMMANDS[command](cfg, out)
    except (UsageError, ValueError, TypeError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mmlrt {command}: error: {msg}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"mmlrt {command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    manifest = {
        "command": command,
        "config": {k: v for k, v in cfg.items() if k != "workers"},
        "seed": cfg["seed"],
        "workers": cfg["workers"],
        "version": __version__,
        "numpy": np.__version__,
        "elapsed_seconds": time.time() - started,
    }
    write_json(os.path.join(out, "manifest.json"), manifest)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
