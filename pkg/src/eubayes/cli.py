"""Command-line interface: ``eubayes {fit,cmse,holdout-pc,profile,simulate}``.

Exit codes: 0 success, 2 data error, 3 convergence error, 4 config error.
Every command is deterministic given its inputs and ``--seed``; each writes
a ``manifest.json`` with the seed and a hash of the resolved configuration.
Wall-clock time goes to stderr only, so output files are byte-identical
across runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import cmse, em, io, sim
from .family import AreaRecord, DataError, ModelParams, ParameterError, get_family
from .shrinkage import eub_estimate, shrinkage_profile, write_profile_csv

EXIT_OK, EXIT_DATA, EXIT_CONVERGENCE, EXIT_CONFIG = 0, 2, 3, 4
ESTIMATE_COLUMNS = ["area_id", "y", "m_hat", "r", "mu_hat"]


class ConfigError(ValueError):
    """Invalid command-line or design configuration."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which here means a data error
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# Option parsing
# ---------------------------------------------------------------------------


def _p_mode(text: str):
    if text == "free":
        return None
    if text.startswith("fixed="):
        try:
            v = float(text.split("=", 1)[1])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad p-mode {text!r}") from None
        if not 0.0 <= v <= 1.0:
            raise argparse.ArgumentTypeError("fixed p must lie in [0, 1]")
        return v
    raise argparse.ArgumentTypeError("p-mode must be 'free' or 'fixed=<v>'")


def _e_step(text: str):
    if text == "analytic":
        return ("analytic", None)
    if text.startswith("mc="):
        try:
            return ("monte_carlo", int(text[3:]))
        except ValueError:
            pass
    raise argparse.ArgumentTypeError("e-step must be 'analytic' or 'mc=<k>'")


def _fit_options(p):
    p.add_argument("--family", required=True, choices=["fh", "pg", "bb"])
    p.add_argument("--p-mode", type=_p_mode, default=None, metavar="{free,fixed=<v>}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--e-step", type=_e_step, default=("analytic", None),
                   metavar="{analytic,mc=<k>}")
    p.add_argument("--no-intercept", action="store_true",
                   help="use the x columns as given instead of prepending an intercept")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="eubayes", description="Empirical uncertain Bayes for area-level data.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit the model and write per-area estimates")
    f.add_argument("data")
    _fit_options(f)
    f.add_argument("--out", required=True)

    c = sub.add_parser("cmse", help="bootstrap CMSE estimates for a fitted model")
    c.add_argument("data")
    c.add_argument("--fit", required=True, help="fit.json written by 'eubayes fit'")
    c.add_argument("--bootstrap", type=int, default=100)
    c.add_argument("--z", type=float, default=None, help="derivative step (default m^-1.25)")
    c.add_argument("--scale", choices=["working", "natural"], default="working")
    c.add_argument("--score-sign", type=float, choices=[-1.0, 1.0], default=-1.0,
                   help="sign of the Omega L term in the conditional bias (default -1)")
    c.add_argument("--zero-omega", action="store_true",
                   help="testing hook: skip the bootstrap and use Omega = 0, B = 0")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)

    h = sub.add_parser("holdout-pc", help="hold-out predictive criterion")
    h.add_argument("data")
    _fit_options(h)
    h.add_argument("--alpha", type=float, required=True)
    h.add_argument("--out", required=True)

    pr = sub.add_parser("profile", help="shrinkage profile r(y) and mu_tilde(y)")
    pr.add_argument("--family", required=True, choices=["fh", "pg", "bb"])
    pr.add_argument("--beta", required=True, help="comma-separated coefficients")
    pr.add_argument("--nu", type=float, required=True)
    pr.add_argument("--p", type=float, required=True)
    pr.add_argument("--n", type=float, required=True)
    pr.add_argument("--x", required=True, help="comma-separated covariate vector")
    pr.add_argument("--grid", required=True, help="y grid as lo:hi:points")
    pr.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="run a simulation design file")
    s.add_argument("design", help="JSON with 'study' in {comparison, sensitivity, cmse_eval}")
    s.add_argument("--seed", type=int, default=None, help="override the design seed")
    s.add_argument("--out", required=True)
    return ap


def _fit_config(args) -> em.FitConfig:
    mode, k = args.e_step
    kw = {"mc_samples": k} if k is not None else {}
    try:
        return em.FitConfig(tol=args.tol, max_iter=args.max_iter, e_step_mode=mode, seed=args.seed,
                            p_fixed=args.p_mode, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj: dict):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(out: Path, command: str, seed, config: dict, **extra):
    m = {"command": command, "seed": seed, "config": config,
         "config_hash": sim.config_hash(config)}
    m.update(extra)
    _write_json(out / "manifest.json", m)


def _load(path, family, intercept: bool):
    data = io.read_dataset(path, family)
    return io.with_intercept(data) if intercept else data


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    kind = get_family(args.family)
    cfg = _fit_config(args)
    data = _load(args.data, kind, not args.no_intercept)
    if data.q == 0:
        raise ConfigError("no covariates: drop --no-intercept or add x columns")
    res = em.fit_em(data, kind, cfg)
    out = _outdir(args.out)
    fit = res.to_dict()
    fit.update({"intercept": not args.no_intercept, "covariates": list(data.covariate_names),
                "em": {"tol": cfg.tol, "max_iter": cfg.max_iter, "e_step": cfg.e_step_mode,
                       "mc_samples": cfg.mc_samples}})
    _write_json(out / "fit.json", fit)
    write_estimates(out / "estimates.csv", data, res.params, kind)
    _manifest(out, "fit", args.seed, _config_dict(args, cfg),
              iterations=res.iterations, converged=res.converged)
    if not res.converged:
        print(f"eubayes: EM did not converge in {cfg.max_iter} iterations", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def _config_dict(args, cfg: em.FitConfig) -> dict:
    return {"family": args.family, "p_mode": "free" if cfg.p_free else f"fixed={cfg.p_fixed!r}",
            "tol": cfg.tol, "max_iter": cfg.max_iter, "e_step": cfg.e_step_mode,
            "mc_samples": cfg.mc_samples, "seed": cfg.seed, "intercept": not args.no_intercept,
            "data": Path(args.data).name}


def write_estimates(path, data, params: ModelParams, kind):
    post = eub_estimate(data, params, kind)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ESTIMATE_COLUMNS)
        for i in range(data.m):
            w.writerow([data.area_ids[i], f"{data.y[i]:.17g}", f"{post.m[i]:.17g}",
                        f"{post.r[i]:.17g}", f"{post.mu_tilde[i]:.17g}"])


def _read_fit(path):
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return em.FitResult.from_dict(d), d
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read fit file {path}: {exc}") from None


def cmd_cmse(args) -> int:
    res, raw = _read_fit(args.fit)
    kind = res.family
    data = _load(args.data, kind, bool(raw.get("intercept", True)))
    if res.m and res.m != data.m:
        raise DataError(f"fit was made on {res.m} areas but {args.data} has {data.m}")
    if data.q != res.params.q:
        raise DataError(f"fit has {res.params.q} coefficients but the data give {data.q} columns")
    if args.bootstrap < 2 and not args.zero_omega:
        raise ConfigError("--bootstrap must be at least 2")
    # bootstrap refits reuse the EM settings of the original fit
    emc = raw.get("em", {})
    try:
        cfg = em.FitConfig(tol=float(emc.get("tol", 1e-6)), max_iter=int(emc.get("max_iter", 1000)),
                           e_step_mode=emc.get("e_step", "analytic"),
                           mc_samples=int(emc.get("mc_samples", 5000)), p_fixed=res.p_fixed,
                           seed=args.seed)
    except ValueError as exc:
        raise DataError(f"fit file has invalid EM settings: {exc}") from None
    k = res.params.q + (2 if res.p_fixed is None else 1)
    if args.zero_omega:
        unc = cmse.UncertaintyEstimates.zero(k)
    else:
        from .numerics import RngStream
        unc = cmse.bootstrap_uncertainty(data, res.params, kind, args.bootstrap, cfg,
                                         RngStream(args.seed, 0), scale=args.scale)
    table = cmse.cmse_table(data, res.params, unc, kind, cmse.DerivativeConfig(args.z, args.score_sign),
                            res.p_fixed)
    out = _outdir(args.out)
    cmse.write_cmse_csv(out / "cmse.csv", data.area_ids, table)
    config = {"fit": raw, "bootstrap": args.bootstrap, "z": args.z, "scale": args.scale,
              "score_sign": args.score_sign, "zero_omega": args.zero_omega, "seed": args.seed, "data": Path(args.data).name}
    _manifest(out, "cmse", args.seed, config, bootstrap_used=unc.boot_count,
              bootstrap_dropped=unc.dropped, bootstrap_retried=unc.retried,
              negative_cm_hat=int(np.sum(table["cm_hat"] < 0)))
    return EXIT_OK


def holdout_pc(data, kind, cfg: em.FitConfig, alpha: float):
    """Fit on areas with n_i <= q_alpha and score the synthetic mean on the rest.

    ``q_alpha`` is the type-1 (inverse-cdf) empirical quantile of n.
    Returns ``(pc, fit, held_out_mask)``.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    q = np.quantile(data.n, alpha, method="inverted_cdf")
    train = data.n <= q
    test = ~train
    if not test.any():
        raise DataError(f"no areas with n > q_alpha = {q:g}; the hold-out set is empty")
    if train.sum() < 2:
        raise DataError("fewer than two areas remain for fitting")
    res = em.fit_em(data.subset(train), kind, cfg)
    m_hat = kind.mean(data.X[test] @ res.params.beta)
    pc = float(np.mean((m_hat - data.y[test]) ** 2))
    return pc, res, test


def cmd_holdout_pc(args) -> int:
    kind = get_family(args.family)
    cfg = _fit_config(args)
    data = _load(args.data, kind, not args.no_intercept)
    pc, res, test = holdout_pc(data, kind, cfg, args.alpha)
    out = _outdir(args.out)
    _write_json(out / "pc.json", {"alpha": args.alpha, "pc": pc, "held_out": int(test.sum()),
                                  "fitted_on": int((~test).sum()), "fit": res.to_dict()})
    config = _config_dict(args, cfg)
    config["alpha"] = args.alpha
    _manifest(out, "holdout-pc", args.seed, config, converged=res.converged)
    print(f"{pc:.17g}")
    if not res.converged:
        print("eubayes: EM did not converge on the training areas", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_profile(args) -> int:
    kind = get_family(args.family)
    try:
        lo, hi, k = args.grid.split(":")
        grid = np.linspace(float(lo), float(hi), int(k))
    except ValueError:
        raise ConfigError("--grid must look like lo:hi:points") from None
    params = ModelParams(_floats(args.beta), args.nu, args.p)
    kind.check_params(params)
    rec = AreaRecord(0.0, args.n, np.array(_floats(args.x)))
    if rec.x.size != params.q:
        raise ConfigError("--x and --beta must have the same length")
    table = shrinkage_profile(grid, rec, params, kind)
    out = _outdir(args.out)
    write_profile_csv(table, out / "profile.csv")
    config = {"family": args.family, "beta": list(params.beta), "nu": params.nu, "p": params.p,
              "n": args.n, "x": list(rec.x), "grid": args.grid}
    _manifest(out, "profile", None, config)
    return EXIT_OK


STUDIES = {"comparison": sim.SimDesign, "sensitivity": sim.SimDesign,
           "cmse_eval": sim.CmseEvalDesign}


def load_design(path, seed=None):
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read design file {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"design file {path} is not valid JSON: {exc}") from None
    if not isinstance(d, dict) or d.get("study") not in STUDIES:
        raise ConfigError(f"design 'study' must be one of {sorted(STUDIES)}")
    study = d["study"]
    if seed is not None:
        d["seed"] = seed
    try:
        return study, STUDIES[study].from_dict(d)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid {study} design: {exc}") from None


def cmd_simulate(args) -> int:
    study, design = load_design(args.design, args.seed)
    out = _outdir(args.out)
    if study == "comparison":
        res = sim.run_comparison(design)
        sim.write_comparison_csv(out / "table.csv", [res])
    elif study == "sensitivity":
        res = sim.run_sensitivity(design)
        sim.write_sensitivity_csv(out / "table.csv", [res])
    else:
        res = sim.run_cmse_eval(design)
        sim.write_cmse_eval_csv(out / "table.csv", res)
    sim.write_manifest(out / "manifest.json", res.manifest())
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "cmse": cmd_cmse, "holdout-pc": cmd_holdout_pc,
            "profile": cmd_profile, "simulate": cmd_simulate}


def main(argv=None) -> int:
    t0 = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        code = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"eubayes: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (sim.DesignError, ParameterError, cmse.DerivativeError) as exc:
        print(f"eubayes: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, UnicodeDecodeError) as exc:
        print(f"eubayes: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (em.ConvergenceError, cmse.BootstrapError, sim.SimulationError) as exc:
        print(f"eubayes: convergence error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    print(f"eubayes: {args.command} finished in {time.perf_counter() - t0:.2f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
