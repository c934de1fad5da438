"""Responsibilities, uncertain Bayes estimates and shrinkage profiles."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .family import AreaRecord, FamilyKind, ModelParams, _prepare
from .numerics import expit

# clip for log(f2/f1); keeps exp() finite for extreme residuals
LOG_RATIO_CLIP = 700.0


@dataclass(frozen=True)
class AreaPosterior:
    m: float
    eta: float
    r: float
    mu_tilde: float


def responsibility_from_logs(lf1, lf2, p):
    """P(s=1 | y) = p / (p + (1-p) f2/f1), evaluated in log space."""
    d = np.clip(np.asarray(lf2) - np.asarray(lf1), -LOG_RATIO_CLIP, LOG_RATIO_CLIP)
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore"):
        lo = np.log(p) - np.log1p(-p)
    return expit(lo - d)


def posterior_kernel(kind: FamilyKind, y, n, m, nu, p):
    """Array version of :func:`ub_estimate`: returns (eta, r, mu_tilde)."""
    r = responsibility_from_logs(kind.log_f1(y, n, m, nu), kind.log_f2(y, n, m), p)
    w = n / (n + nu)
    eta = m + w * (y - m)
    return eta, r, m + w * (y - m) * r


def _f(v):
    return float(v) if np.ndim(v) == 0 else v


def responsibility(rec, params: ModelParams, kind: FamilyKind):
    y, n, m = _prepare(rec, params, kind)
    return _f(responsibility_from_logs(kind.log_f1(y, n, m, params.nu),
                                       kind.log_f2(y, n, m), params.p))


def ub_estimate(rec, params: ModelParams, kind: FamilyKind) -> AreaPosterior:
    """Uncertain Bayes estimate of the area mean at known hyperparameters.

    ``mu_tilde = m + n/(nu+n) * (y - m) * r``.  Accepts a single record (scalar
    fields) or a dataset (array fields).
    """
    y, n, m = _prepare(rec, params, kind)
    eta, r, mu = posterior_kernel(kind, y, n, m, params.nu, params.p)
    return AreaPosterior(_f(m), _f(eta), _f(r), _f(mu))


def eub_estimate(rec, fitted: ModelParams, kind: FamilyKind) -> AreaPosterior:
    """Empirical uncertain Bayes estimate: :func:`ub_estimate` at fitted values."""
    return ub_estimate(rec, fitted, kind)


def shrinkage_profile(y_grid, rec_template: AreaRecord, params: ModelParams, kind: FamilyKind):
    """Tabulate (y, r, mu_tilde) over ``y_grid`` holding n and x fixed.

    Returns a structured numpy array with fields ``y``, ``r``, ``mu_tilde``.
    """
    y_grid = np.asarray(y_grid, dtype=float)
    n = np.full_like(y_grid, rec_template.n)
    X = np.broadcast_to(rec_template.x, (y_grid.size, rec_template.x.size))
    kind.check_params(params)
    kind.validate(y_grid, n)
    m = kind.mean(X @ params.beta)
    _, r, mu = posterior_kernel(kind, y_grid, n, m, params.nu, params.p)
    out = np.empty(y_grid.size, dtype=[("y", float), ("r", float), ("mu_tilde", float)])
    out["y"], out["r"], out["mu_tilde"] = y_grid, r, mu
    return out


def write_profile_csv(table, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "r", "mu_tilde"])
        for row in table:
            w.writerow([f"{row['y']:.17g}", f"{row['r']:.17g}", f"{row['mu_tilde']:.17g}"])
