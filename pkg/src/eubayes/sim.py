"""Simulation studies: EUB versus EB, latent-law sensitivity and CMSE evaluation.

Every replicate draws from its own :class:`RngStream`, so tables depend only
on the design and seed, not on chunking or worker count.  Work is done in
fixed-size chunks of replicates that are fitted as one batch; with
``UEB_THREADS > 1`` the chunks are spread over worker processes and reduced
in chunk order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import cmse, em
from .family import POISSON_GAMMA, FamilyKind, ModelParams, get_family
from .numerics import RngStream, gammaln

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
QUANTILE_COLUMNS = ["q5", "q25", "q50", "q75", "q95"]
MAX_DROP_FRACTION = 0.05
LATENT_LAWS = ("conjugate", "lognormal_matched", "twopoint_matched")

# stream tags; the first key component separates independent uses of a seed
_DESIGN, _DATA, _MARGINAL, _TRUTH_DATA, _TRUTH_DRAW, _EVAL_DATA, _EVAL_BOOT = range(7)


class DesignError(ValueError):
    """A simulation design violates its invariants."""


class SimulationError(RuntimeError):
    """Too many replicates were dropped for non-convergence."""


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("UEB_THREADS", "1")))
    except ValueError:
        raise DesignError("UEB_THREADS must be an integer") from None


def _map(fn, jobs):
    """Ordered map; parallel over processes when UEB_THREADS > 1."""
    k = min(_workers(), len(jobs))
    if k <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=k) as ex:
        return list(ex.map(fn, *zip(*jobs)))


def _chunks(total: int, size: int):
    return [(a, min(a + size, total)) for a in range(0, total, size)]


def _drop_check(dropped: int, total: int, what: str):
    if dropped > MAX_DROP_FRACTION * total:
        raise SimulationError(f"{dropped} of {total} {what} failed to converge "
                              f"(limit {MAX_DROP_FRACTION:.0%})")


def config_hash(d: dict) -> str:
    """Short stable digest of a JSON-serializable config."""
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Designs
# ---------------------------------------------------------------------------


def _params_dict(p: ModelParams) -> dict:
    return {"beta": [float(b) for b in p.beta], "nu": p.nu, "p": p.p}


@dataclass(frozen=True)
class SimDesign:
    """Area-level design with n_i ~ U{lo..hi} and x_i ~ N(0, 1) plus an intercept.

    ``redraw_design=False`` draws (n, x) once and holds them fixed over the
    replicates, which is what makes per-area MSE_i meaningful.
    """

    family: FamilyKind = POISSON_GAMMA
    true_params: ModelParams = field(default_factory=lambda: ModelParams([0.0, 0.5], 5.0, 0.2))
    m: int = 50
    R: int = 500
    n_range: tuple = (5, 30)
    latent_law: str = "conjugate"
    seed: int = 0
    redraw_design: bool = False
    max_iter: int = 5000
    tol: float = 1e-6
    chunk: int = 250

    def __post_init__(self):
        object.__setattr__(self, "family", get_family(self.family))
        object.__setattr__(self, "n_range", tuple(int(v) for v in self.n_range))
        if self.R < 1 or self.m < 2:
            raise DesignError("need R >= 1 replicates and m >= 2 areas")
        lo, hi = self.n_range
        if not 1 <= lo <= hi:
            raise DesignError(f"n range must satisfy 1 <= lo <= hi, got {self.n_range}")
        if self.latent_law not in LATENT_LAWS:
            raise DesignError(f"latent_law must be one of {LATENT_LAWS}")
        if self.latent_law != "conjugate" and self.family is not POISSON_GAMMA:
            raise DesignError("alternative latent laws are defined for the Poisson-gamma family")
        if self.true_params.q != 2:
            raise DesignError("true_params.beta must be (intercept, slope)")
        self.family.check_params(self.true_params)
        if self.chunk < 1 or self.max_iter < 1 or not self.tol > 0:
            raise DesignError("chunk, max_iter and tol must be positive")

    @classmethod
    def table1(cls, family="pg", p: float = 0.2, **kw) -> "SimDesign":
        """The comparison design: beta = (0, 0.5), nu = 5, m = 50."""
        kind = get_family(family)
        kw.setdefault("n_range", (10, 30) if kind.short == "bb" else (5, 30))
        return cls(family=kind, true_params=ModelParams([0.0, 0.5], 5.0, p), **kw)

    def fit_config(self, p_fixed=None) -> em.FitConfig:
        return em.FitConfig(tol=self.tol, max_iter=self.max_iter, seed=self.seed, p_fixed=p_fixed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.short
        d["true_params"] = _params_dict(self.true_params)
        d["n_range"] = list(self.n_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimDesign":
        d = dict(d)
        d.pop("study", None)
        tp = d.pop("true_params", None)
        if tp is not None:
            d["true_params"] = ModelParams(tp["beta"], tp["nu"], tp["p"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DesignError(f"unknown design fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class CmseEvalDesign:
    """Intercept-only Poisson-gamma design with equal n_i for the CMSE study."""

    m: int = 50
    beta: float = 1.0
    nu: float = 5.0
    p: float = 0.5
    n_i: float = 10.0
    alpha_grid: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    marginal_draws: int = 10_000
    S: int = 500
    R_truth: int = 10_000
    B: int = 50
    seed: int = 0
    z: Optional[float] = None
    scale: str = "working"
    score_sign: float = -1.0
    max_iter: int = 5000
    tol: float = 1e-6
    chunk: int = 500

    def __post_init__(self):
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))
        if not self.alpha_grid or not all(0.0 < a < 1.0 for a in self.alpha_grid):
            raise DesignError("alpha_grid must be a non-empty subset of (0, 1)")
        if self.m < 2 or self.S < 1 or self.R_truth < 1 or self.B < 2 or self.marginal_draws < 1:
            raise DesignError("need m >= 2, S >= 1, R_truth >= 1, B >= 2, marginal_draws >= 1")
        POISSON_GAMMA.check_params(self.true_params)
        if self.scale not in ("working", "natural"):
            raise DesignError("scale must be 'working' or 'natural'")
        cmse.DerivativeConfig(self.z, self.score_sign)

    @property
    def true_params(self) -> ModelParams:
        return ModelParams([self.beta], self.nu, self.p)

    def fit_config(self) -> em.FitConfig:
        return em.FitConfig(tol=self.tol, max_iter=self.max_iter, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_grid"] = list(self.alpha_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CmseEvalDesign":
        d = dict(d)
        d.pop("study", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DesignError(f"unknown design fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------


def sample_latent_law(law: str, m, nu: float, rng, size=None):
    """Draw theta with mean m and variance m/nu from one of the latent laws.

    ``conjugate`` is Ga(nu m, nu); ``lognormal_matched`` has
    log theta ~ N(log(m / sqrt(1 + 1/(nu m))), log(1 + 1/(nu m)));
    ``twopoint_matched`` puts mass 1/2 on m +- sqrt(m/nu).
    """
    g = rng if isinstance(rng, np.random.Generator) else rng.generator()
    m = np.asarray(m, dtype=float)
    shape = m.shape if size is None else size
    if law == "conjugate":
        return g.gamma(nu * m, 1.0 / nu, shape)
    if law == "lognormal_matched":
        s2 = np.log1p(1.0 / (nu * m))
        return np.exp(g.normal(np.log(m) - 0.5 * s2, np.sqrt(s2), shape))
    if law == "twopoint_matched":
        half = np.sqrt(m / nu)
        if np.any(m - half <= 0):
            raise DesignError("two-point law needs m - sqrt(m/nu) > 0 in every area")
        return np.where(g.random(shape) < 0.5, m + half, m - half)
    raise DesignError(f"unknown latent law {law!r}")


def draw_design(design: SimDesign, replicate: Optional[int] = None):
    """(n (m,), X (m, 2)) for the fixed design, or for one replicate when redrawn."""
    key = (_DESIGN,) if replicate is None else (_DESIGN, replicate + 1)
    g = RngStream(design.seed, key).generator()
    lo, hi = design.n_range
    n = g.integers(lo, hi + 1, design.m).astype(float)
    x = g.standard_normal(design.m)
    X = np.column_stack([np.ones(design.m), x])
    if design.latent_law == "twopoint_matched":
        mm = design.family.mean(X @ design.true_params.beta)
        bad = np.flatnonzero(mm - np.sqrt(mm / design.true_params.nu) <= 0)
        if bad.size:
            raise DesignError(f"areas {bad.tolist()} violate m - sqrt(m/nu) > 0")
    return n, X


def simulate_replicates(design: SimDesign, start: int, stop: int):
    """Data for replicates [start, stop): returns y, latent mu, n, X (all batched)."""
    kind, tp = design.family, design.true_params
    ys, mus, ns, Xs = [], [], [], []
    fixed = None if design.redraw_design else draw_design(design)
    for r in range(start, stop):
        n, X = fixed if fixed is not None else draw_design(design, r)
        g = RngStream(design.seed, (_DATA, r)).generator()
        mm = kind.mean(X @ tp.beta)
        s = g.random(design.m) < tp.p
        if design.latent_law == "conjugate":
            lat = kind.sample_prior_mean(mm, tp.nu, g)
        else:
            lat = sample_latent_law(design.latent_law, mm, tp.nu, g)
        mu = np.where(s, lat, mm)
        ys.append(kind.sample_observation(mu, n, g))
        mus.append(mu)
        ns.append(n)
        Xs.append(X)
    return np.vstack(ys), np.vstack(mus), np.vstack(ns), np.stack(Xs)


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# EUB versus EB
# ---------------------------------------------------------------------------


@dataclass
class ComparisonResult:
    design: SimDesign
    mse_eub: np.ndarray
    mse_eb: np.ndarray
    bias_eub: np.ndarray
    bias_eb: np.ndarray
    used: int
    dropped: int
    checksum: str

    @property
    def mse_ratio(self) -> np.ndarray:
        return self.mse_eub / self.mse_eb

    @property
    def bias_ratio(self) -> np.ndarray:
        return self.bias_eub / self.bias_eb

    def quantiles(self) -> dict:
        return {"mse_ratio": np.quantile(self.mse_ratio, QUANTILES),
                "abs_bias_ratio": np.quantile(self.bias_ratio, QUANTILES)}

    def rows(self) -> list:
        head = [self.design.family.short, self.design.true_params.p]
        return [head + [k] + list(v) for k, v in self.quantiles().items()]

    def manifest(self) -> dict:
        return {"study": "comparison", "design": self.design.to_dict(), "seed": self.design.seed,
                "config_hash": config_hash(self.design.to_dict()), "replicates_used": self.used,
                "replicates_dropped": self.dropped, "data_checksum": self.checksum}


def _comparison_chunk(design: SimDesign, start: int, stop: int):
    kind = design.family
    y, mu, n, X = simulate_replicates(design, start, stop)
    before = _digest(y, n, X)
    eub = em.fit_em_batch(kind, y, n, X, design.fit_config())
    mid = _digest(y, n, X)
    eb = em.fit_em_batch(kind, y, n, X, design.fit_config(p_fixed=1.0))
    after = _digest(y, n, X)
    # both fits must see byte-identical data
    if not before == mid == after:
        raise RuntimeError("replicate data changed between the EUB and EB fits")
    mu_eub, _, _ = em.eub_batch(kind, y, n, X, eub.beta, eub.nu, eub.p)
    mu_eb, _, _ = em.eub_batch(kind, y, n, X, eb.beta, eb.nu, eb.p)
    ok = eub.converged & eb.converged
    e1, e2 = (mu_eub - mu)[ok], (mu_eb - mu)[ok]
    return (e1.sum(0), (e1 ** 2).sum(0), e2.sum(0), (e2 ** 2).sum(0),
            int(ok.sum()), int((~ok).sum()), before)


def run_comparison(design: SimDesign) -> ComparisonResult:
    """Per-area MSE and absolute bias of EUB (p free) and EB (p = 1) over R replicates.

    Replicates where either fit does not converge are dropped and counted;
    more than 5% dropped raises :class:`SimulationError`.
    """
    parts = _map(_comparison_chunk, [(design, a, b) for a, b in _chunks(design.R, design.chunk)])
    s1 = sum(p[0] for p in parts)
    q1 = sum(p[1] for p in parts)
    s2 = sum(p[2] for p in parts)
    q2 = sum(p[3] for p in parts)
    used = sum(p[4] for p in parts)
    dropped = sum(p[5] for p in parts)
    _drop_check(dropped, design.R, "replicates")
    if used == 0:
        raise SimulationError("no replicate converged")
    checksum = hashlib.sha256("".join(p[6] for p in parts).encode()).hexdigest()
    return ComparisonResult(design, q1 / used, q2 / used, np.abs(s1) / used, np.abs(s2) / used,
                            used, dropped, checksum)


# ---------------------------------------------------------------------------
# Sensitivity to the latent law
# ---------------------------------------------------------------------------


@dataclass
class SensitivityResult:
    design: SimDesign
    mse: np.ndarray
    bias: np.ndarray
    used: int
    dropped: int

    def quantiles(self) -> dict:
        # reported multiplied by 100
        return {"mse_x100": 100.0 * np.quantile(self.mse, QUANTILES),
                "abs_bias_x100": 100.0 * np.quantile(self.bias, QUANTILES)}

    def rows(self) -> list:
        return [[self.design.latent_law, k] + list(v) for k, v in self.quantiles().items()]

    def manifest(self) -> dict:
        return {"study": "sensitivity", "design": self.design.to_dict(), "seed": self.design.seed,
                "config_hash": config_hash(self.design.to_dict()), "replicates_used": self.used,
                "replicates_dropped": self.dropped}


def _sensitivity_chunk(design: SimDesign, start: int, stop: int):
    y, mu, n, X = simulate_replicates(design, start, stop)
    fit = em.fit_em_batch(design.family, y, n, X, design.fit_config())
    est, _, _ = em.eub_batch(design.family, y, n, X, fit.beta, fit.nu, fit.p)
    e = (est - mu)[fit.converged]
    return e.sum(0), (e ** 2).sum(0), int(fit.converged.sum()), int((~fit.converged).sum())


def run_sensitivity(design: SimDesign) -> SensitivityResult:
    """MSE_i and Bias_i of the EUB estimator when the latent law may be misspecified."""
    parts = _map(_sensitivity_chunk, [(design, a, b) for a, b in _chunks(design.R, design.chunk)])
    s = sum(p[0] for p in parts)
    q = sum(p[1] for p in parts)
    used = sum(p[2] for p in parts)
    dropped = sum(p[3] for p in parts)
    _drop_check(dropped, design.R, "replicates")
    if used == 0:
        raise SimulationError("no replicate converged")
    return SensitivityResult(design, q / used, np.abs(s) / used, used, dropped)


# ---------------------------------------------------------------------------
# CMSE estimator evaluation
# ---------------------------------------------------------------------------


def pg_responsibility(y, n, m, nu, p):
    """P(s = 1 | y) for the Poisson-gamma model written out in closed form.

    Kept separate from the family densities so the truth draws do not share
    code with the estimator under evaluation.
    """
    z = np.round(np.asarray(y, dtype=float) * n)
    a = nu * m
    log_ratio = (gammaln(a) - n * m - gammaln(z + a) + (z + a) * np.log(n + nu)
                 + z * np.log(m) - a * np.log(nu))
    with np.errstate(over="ignore"):
        return p / (p + (1.0 - p) * np.exp(log_ratio))


def truth_draws(y, n, m, nu, p, size, rng):
    """Draws of the area mean given y at the true parameters.

    With probability r the mean is Ga(n y + nu m, n + nu) (shape, rate),
    otherwise it equals m.
    """
    g = rng if isinstance(rng, np.random.Generator) else rng.generator()
    r = pg_responsibility(y, n, m, nu, p)
    lam = g.gamma(n * y + nu * m, 1.0 / (n + nu), size)
    return np.where(g.random(size) < r, lam, m)


def marginal_quantiles(design: CmseEvalDesign) -> np.ndarray:
    """Type-1 (inverse-cdf) alpha-quantiles of y from ``marginal_draws`` draws."""
    g = RngStream(design.seed, (_MARGINAL,)).generator()
    k, tp = design.marginal_draws, design.true_params
    m = math.exp(design.beta)
    s = g.random(k) < tp.p
    lam = np.where(s, g.gamma(tp.nu * m, 1.0 / tp.nu, k), m)
    y = g.poisson(design.n_i * lam) / design.n_i
    return np.quantile(y, design.alpha_grid, method="inverted_cdf")


def _eval_data(design: CmseEvalDesign, tag: int, start: int, stop: int):
    """Datasets for replicates [start, stop); y[:, 0] is overwritten by the caller."""
    m, tp = design.m, design.true_params
    mean = math.exp(design.beta)
    ys = []
    for r in range(start, stop):
        g = RngStream(design.seed, (tag, r)).generator()
        lam = np.where(g.random(m) < tp.p, g.gamma(tp.nu * mean, 1.0 / tp.nu, m), mean)
        ys.append(g.poisson(design.n_i * lam) / design.n_i)
    R = stop - start
    return np.vstack(ys), np.full((R, m), float(design.n_i)), np.ones((R, m, 1))


def _truth_chunk(design: CmseEvalDesign, ai: int, y_alpha: float, start: int, stop: int):
    y, n, X = _eval_data(design, _TRUTH_DATA, start, stop)
    y[:, 0] = y_alpha
    fit = em.fit_em_batch(POISSON_GAMMA, y, n, X, design.fit_config())
    est, _, _ = em.eub_batch(POISSON_GAMMA, y, n, X, fit.beta, fit.nu, fit.p)
    tp, mean = design.true_params, math.exp(design.beta)
    lam = np.array([truth_draws(y_alpha, design.n_i, mean, tp.nu, tp.p, None,
                                RngStream(design.seed, (_TRUTH_DRAW, ai, r)))
                    for r in range(start, stop)])
    err2 = (est[:, 0] - lam) ** 2
    ok = fit.converged
    return float(err2[ok].sum()), float((err2[ok] ** 2).sum()), int(ok.sum()), int((~ok).sum())


def _eval_chunk(design: CmseEvalDesign, ai: int, y_alpha: float, start: int, stop: int):
    kind = POISSON_GAMMA
    y, n, X = _eval_data(design, _EVAL_DATA, start, stop)
    y[:, 0] = y_alpha
    cfg = design.fit_config()
    fit = em.fit_em_batch(kind, y, n, X, cfg)
    idx = np.flatnonzero(fit.converged)
    out = np.full((stop - start, 2), np.nan)
    boot_failed = 0
    if idx.size:
        streams = [RngStream(design.seed, (_EVAL_BOOT, ai, start + int(i))) for i in idx]
        phi, ok, retried = cmse.bootstrap_batch(kind, n[idx], X[idx], fit.beta[idx], fit.nu[idx],
                                                fit.p[idx], design.B, cfg, streams)
        phi_hat = fit.phi(include_p=True)[idx]
        usable = (~ok).sum(axis=1) <= cmse.MAX_DROP_FRACTION * design.B
        boot_failed = int((~usable).sum())
        keep = np.flatnonzero(usable)
        if keep.size:
            unc = [cmse.uncertainty_from_draws(phi[j][ok[j]], phi_hat[j], design.scale, True)
                   for j in keep]
            z = cmse.DerivativeConfig(design.z).step(design.m)
            rows = cmse.cmse_rows(kind, y[idx[keep]], n[idx[keep]], X[idx[keep]], phi_hat[keep],
                                  np.stack([u.omega for u in unc]), np.stack([u.bias for u in unc]),
                                  z, score_sign=design.score_sign)
            out[idx[keep], 0] = rows["cm_hat"][:, 0]
            out[idx[keep], 1] = rows["cm_naive"][:, 0]
    return out, int((~fit.converged).sum()), boot_failed


@dataclass
class CmseEvalResult:
    design: CmseEvalDesign
    y_alpha: np.ndarray
    cm: np.ndarray
    cm_se: np.ndarray
    rb: np.ndarray
    cv: np.ndarray
    rbn: np.ndarray
    cvn: np.ndarray
    used: np.ndarray
    dropped: np.ndarray
    truth_dropped: np.ndarray
    negative: np.ndarray
    cm_hat: list = field(default_factory=list, repr=False)
    cm_naive: list = field(default_factory=list, repr=False)

    COLUMNS = ["alpha", "y_alpha", "cm", "rb", "cv", "rbn", "cvn", "used", "dropped",
               "negative"]

    def rows(self) -> list:
        out = []
        for i, a in enumerate(self.design.alpha_grid):
            out.append([a, self.y_alpha[i], self.cm[i], self.rb[i], self.cv[i], self.rbn[i],
                        self.cvn[i], int(self.used[i]), int(self.dropped[i]),
                        int(self.negative[i])])
        return out

    def manifest(self) -> dict:
        return {"study": "cmse_eval", "design": self.design.to_dict(), "seed": self.design.seed,
                "config_hash": config_hash(self.design.to_dict()),
                "replicates_dropped": [int(v) for v in self.dropped],
                "truth_replicates_dropped": [int(v) for v in self.truth_dropped]}


def simulated_cm(design: CmseEvalDesign, ai: int, y_alpha: float):
    """Monte Carlo CM for one conditioning value: (CM, its standard error, dropped)."""
    chunks = _chunks(design.R_truth, design.chunk)
    parts = _map(_truth_chunk, [(design, ai, y_alpha, a, b) for a, b in chunks])
    s = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    used = sum(p[2] for p in parts)
    dropped = sum(p[3] for p in parts)
    _drop_check(dropped, design.R_truth, "truth replicates")
    cm = s / used
    se = math.sqrt(max(s2 / used - cm * cm, 0.0) / used)
    return cm, se, dropped


def run_cmse_eval(design: CmseEvalDesign) -> CmseEvalResult:
    """Relative bias and CV of the bias-corrected and naive CMSE estimators.

    For each alpha, y_1 is set to the alpha-quantile of the marginal law in
    every replicate dataset.  CM_alpha comes from ``R_truth`` refits paired
    with draws of the area mean given y_alpha; the estimators are evaluated
    over ``S`` further replicates, each with its own bootstrap of size B.
    """
    y_alpha = marginal_quantiles(design)
    A = len(design.alpha_grid)
    res = {k: np.zeros(A) for k in ("cm", "cm_se", "rb", "cv", "rbn", "cvn")}
    used, dropped, tdrop, neg = (np.zeros(A, dtype=int) for _ in range(4))
    hats, naives = [], []
    # the bootstrap is the expensive part, so evaluation chunks are smaller
    eval_chunk = max(1, design.chunk // design.B)
    for ai, ya in enumerate(y_alpha):
        cm, se, td = simulated_cm(design, ai, float(ya))
        parts = _map(_eval_chunk, [(design, ai, float(ya), a, b)
                                   for a, b in _chunks(design.S, eval_chunk)])
        est = np.vstack([p[0] for p in parts])
        nd = sum(p[1] + p[2] for p in parts)
        _drop_check(nd, design.S, "evaluation replicates")
        est = est[np.isfinite(est).all(axis=1)]
        rel, reln = (est[:, 0] - cm) / cm, (est[:, 1] - cm) / cm
        res["cm"][ai], res["cm_se"][ai] = cm, se
        res["rb"][ai], res["cv"][ai] = 100.0 * rel.mean(), math.sqrt(np.mean(rel ** 2))
        res["rbn"][ai], res["cvn"][ai] = 100.0 * reln.mean(), math.sqrt(np.mean(reln ** 2))
        used[ai], dropped[ai], tdrop[ai] = est.shape[0], nd, td
        neg[ai] = int((est[:, 0] < 0).sum())
        hats.append(est[:, 0])
        naives.append(est[:, 1])
    return CmseEvalResult(design, np.asarray(y_alpha, dtype=float), res["cm"], res["cm_se"],
                          res["rb"], res["cv"], res["rbn"], res["cvn"], used, dropped, tdrop,
                          neg, hats, naives)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_table(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


COMPARISON_COLUMNS = ["family", "p", "measure"] + QUANTILE_COLUMNS
SENSITIVITY_COLUMNS = ["latent_law", "measure"] + QUANTILE_COLUMNS


def write_comparison_csv(path, results):
    rows = [row for r in results for row in r.rows()]
    write_table(path, COMPARISON_COLUMNS, rows)


def write_sensitivity_csv(path, results):
    rows = [row for r in results for row in r.rows()]
    write_table(path, SENSITIVITY_COLUMNS, rows)


def write_cmse_eval_csv(path, result: CmseEvalResult):
    write_table(path, CmseEvalResult.COLUMNS, result.rows())


def write_manifest(path, manifest: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
