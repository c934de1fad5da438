"""Conditional MSE of the EUB estimator given the area's own observation.

``cm_hat = (R1 - b) + R2`` where R1 is the posterior variance of mu_i at the
estimated hyperparameters, R2 = g' Omega g propagates the sampling variance of
phi_hat through the estimator (g = d mu_tilde / d phi), and b removes the
second-order bias of the plug-in R1.  Omega and B (the covariance and bias of
phi_hat) come from a parametric bootstrap; all derivatives are central
finite differences with step ``z = m**(-5/4)``.

Parameter vectors are on the natural scale ``phi = (beta, nu, p)``; when p is
held fixed the vector is ``(beta, nu)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import em
from .family import AreaData, FamilyKind, ModelParams, as_area_data, get_family
from .numerics import RngStream
from .shrinkage import posterior_kernel

MAX_SHRINK = 30
MAX_DROP_FRACTION = 0.2


class DerivativeError(ValueError):
    """A finite-difference probe stays outside the parameter space."""


class BootstrapError(RuntimeError):
    """Too many bootstrap refits failed to converge."""


@dataclass(frozen=True)
class DerivativeConfig:
    """Finite-difference settings; ``z=None`` means ``m**(-5/4)``.

    ``score_sign`` chooses the conditional-bias expansion used by the bias
    term (see :func:`cmse_rows`).
    """

    z: Optional[float] = None
    score_sign: float = -1.0

    def __post_init__(self):
        if self.z is not None and not (self.z > 0 and math.isfinite(self.z)):
            raise ValueError("derivative step z must be positive")
        if self.score_sign not in (-1.0, 1.0):
            raise ValueError("score_sign must be -1 or +1")

    def step(self, m: int) -> float:
        return self.z if self.z is not None else float(m) ** -1.25


@dataclass
class UncertaintyEstimates:
    """Bootstrap covariance ``omega`` and bias ``bias`` of phi_hat."""

    omega: np.ndarray
    bias: np.ndarray
    boot_count: int
    dropped: int = 0
    retried: int = 0
    draws: Optional[np.ndarray] = None

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)

    @classmethod
    def zero(cls, k: int) -> "UncertaintyEstimates":
        return cls(np.zeros((k, k)), np.zeros(k), 0)


@dataclass(frozen=True)
class CmseComponents:
    r1: float
    r2: float
    b: float
    r1_bc: float
    cm_hat: float
    cm_naive: float
    score: np.ndarray

    @property
    def negative(self) -> bool:
        return self.cm_hat < 0


# ---------------------------------------------------------------------------
# Per-area quantities as functions of phi
# ---------------------------------------------------------------------------


def r1_kernel(kind: FamilyKind, y, n, m, nu, p):
    """R1 = n^2/(n+nu)^2 (y-m)^2 r(1-r) + r Q(eta)/(n+nu-v2)."""
    eta, r, _ = posterior_kernel(kind, y, n, m, nu, p)
    w = n / (n + nu)
    return w * w * np.square(y - m) * r * (1.0 - r) + r * kind.variance_fn(eta) / (n + nu - kind.v2)


def r1(rec, params: ModelParams, kind: FamilyKind):
    """Posterior variance of mu_i under the uncertain prior (array or scalar)."""
    from .family import _prepare
    y, n, m = _prepare(rec, params, kind)
    if np.any(n + params.nu - kind.v2 <= 0):
        raise ValueError("R1 requires n + nu - v2 > 0")
    out = r1_kernel(kind, y, n, m, params.nu, params.p)
    return float(out) if np.ndim(out) == 0 else out


def _split(phi, q, p_fixed):
    beta = phi[..., :q]
    nu = phi[..., q]
    p = phi[..., q + 1] if p_fixed is None else np.full(nu.shape, float(p_fixed))
    return beta, nu, p


def area_functions(kind: FamilyKind, y, n, X, p_fixed=None):
    """Closures phi -> per-area (mu_tilde, R1, log-mixture) for a batch.

    ``y``, ``n`` are (R, a) and ``X`` is (R, a, q); ``phi`` passed to the
    closures is (R, k).  Each closure returns an (R, a) array.
    """
    q = X.shape[-1]

    def parts(phi):
        beta, nu, p = _split(phi, q, p_fixed)
        m = kind.mean(np.einsum("raq,rq->ra", X, beta))
        return m, nu[:, None], p[:, None]

    def mu_tilde(phi):
        m, nu, p = parts(phi)
        return posterior_kernel(kind, y, n, m, nu, p)[2]

    def r1_fn(phi):
        m, nu, p = parts(phi)
        return r1_kernel(kind, y, n, m, nu, p)

    def loglik(phi):
        m, nu, p = parts(phi)
        lf1 = kind.log_f1(y, n, m, nu)
        lf2 = kind.log_f2(y, n, m)
        with np.errstate(divide="ignore"):
            return np.logaddexp(np.log(p) + lf1, np.log1p(-p) + lf2)

    return mu_tilde, r1_fn, loglik


def valid_region(kind: FamilyKind, q: int, p_fixed=None):
    """Row-wise membership test of the open parameter box."""
    floor = kind.nu_floor()

    def valid(phi):
        ok = np.isfinite(phi).all(axis=-1) & (phi[..., q] > floor)
        if p_fixed is None:
            ok &= (phi[..., q + 1] > 0.0) & (phi[..., q + 1] < 1.0)
        return ok

    return valid


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def _as_rows(at):
    if isinstance(at, ModelParams):
        at = at.to_vector(include_p=True)
    at = np.asarray(at, dtype=float)
    single = at.ndim == 1
    return np.atleast_2d(at), single


def _steps(at, z, valid):
    R, k = at.shape
    h = np.full((R, k), float(z))
    if valid is None:
        return h
    for _ in range(MAX_SHRINK + 1):
        bad = np.zeros((R, k), dtype=bool)
        for j in range(k):
            e = np.zeros_like(at)
            e[:, j] = h[:, j]
            bad[:, j] = ~(valid(at + e) & valid(at - e))
        if not bad.any():
            return h
        h[bad] *= 0.5
    raise DerivativeError("finite-difference probe leaves the parameter space "
                          "even after shrinking the step")


def _probe(f, at, j, hj, sign=1.0, l=None, hl=None):
    e = np.zeros_like(at)
    e[:, j] = sign * hj
    if l is not None:
        e[:, l] = sign * hl
    return np.asarray(f(at + e), dtype=float)


def _resolve_z(z, cfg):
    if z is None and cfg is not None:
        z = cfg.z
    if z is None:
        raise ValueError("a step z is required (cfg.z or the z argument)")
    return float(z)


def _bshape(h, out):
    # broadcast a per-row step against f's output (R, ...)
    return h.reshape(h.shape + (1,) * (out.ndim - 1))


def numeric_grad(f: Callable, at, cfg: DerivativeConfig | None = None, valid=None,
                 z: float | None = None, steps=None):
    """Central differences ``(f(phi + z e_j) - f(phi - z e_j)) / (2 z)``.

    ``at`` is a parameter vector (k,) or a batch (R, k); ``f`` maps a batch of
    parameter rows to an array with leading axis R (a 1-d ``at`` is passed as
    a single row).  Returns shape ``(R, ..., k)`` (leading R dropped for 1-d
    input).  Coordinates whose probes fail ``valid`` get their step halved.
    """
    rows, single = _as_rows(at)
    k = rows.shape[1]
    if steps is None:
        steps = _steps(rows, _resolve_z(z, cfg), valid)
    cols = []
    for j in range(k):
        fp = _probe(f, rows, j, steps[:, j])
        fm = _probe(f, rows, j, steps[:, j], -1.0)
        cols.append((fp - fm) / (2.0 * _bshape(steps[:, j], fp)))
    g = np.stack(cols, axis=-1)
    return g[0] if single else g


def numeric_hess(f: Callable, at, cfg: DerivativeConfig | None = None, valid=None,
                 z: float | None = None, steps=None, f0=None):
    """Second derivatives from the three-point and e_jl stencils.

    Diagonal ``(f(+z e_j) + f(-z e_j) - 2 f) / z^2``; off-diagonal
    ``[f(+z e_jl) + f(-z e_jl) - 2 f - z^2 (H_jj + H_ll)] / (2 z^2)`` with
    ``e_jl = e_j + e_l``.  With coordinate-specific steps the same identity
    reads ``[S - h_j^2 H_jj - h_l^2 H_ll] / (2 h_j h_l)``.
    Returns shape ``(R, ..., k, k)``.
    """
    rows, single = _as_rows(at)
    k = rows.shape[1]
    if steps is None:
        steps = _steps(rows, _resolve_z(z, cfg), valid)
    if f0 is None:
        f0 = np.asarray(f(rows), dtype=float)
    H = np.empty(f0.shape + (k, k))
    for j in range(k):
        hj = _bshape(steps[:, j], f0)
        H[..., j, j] = (_probe(f, rows, j, steps[:, j]) + _probe(f, rows, j, steps[:, j], -1.0)
                        - 2.0 * f0) / (hj * hj)
    for j in range(k):
        hj = _bshape(steps[:, j], f0)
        for l in range(j + 1, k):
            hl = _bshape(steps[:, l], f0)
            s = (_probe(f, rows, j, steps[:, j], 1.0, l, steps[:, l])
                 + _probe(f, rows, j, steps[:, j], -1.0, l, steps[:, l]) - 2.0 * f0)
            v = (s - hj * hj * H[..., j, j] - hl * hl * H[..., l, l]) / (2.0 * hj * hl)
            H[..., j, l] = v
            H[..., l, j] = v
    return H[0] if single else H


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


def _phi_rows(beta, nu, p, p_free):
    cols = [beta, nu[:, None]]
    if p_free:
        cols.append(p[:, None])
    return np.hstack(cols)


def _simulate_rows(kind, n, X, beta, nu, p, gens):
    """One synthetic dataset per generator; row j uses the parameters of row j."""
    m = kind.mean(em._lin(X, beta))
    rows = []
    for j, g in enumerate(gens):
        s = g.random(m.shape[1]) < p[j]
        mu = np.where(s, kind.sample_prior_mean(m[j], nu[j], g), m[j])
        rows.append(kind.sample_observation(mu, n[j], g))
    return np.vstack(rows)


def _warm_start(beta, nu, p, p_free: bool):
    # p = 0 or 1 is absorbing for EM, so bootstrap refits start just inside
    p0 = np.clip(p, 0.01, 0.99) if p_free else p
    return beta, nu, p0


def bootstrap_batch(kind: FamilyKind, n, X, beta, nu, p, B: int, fit_config: em.FitConfig,
                    streams):
    """Parametric-bootstrap refits for several fitted datasets at once.

    ``n`` is (D, a), ``X`` (D, a, q) and ``beta``/``nu``/``p`` the fitted
    values of each of the D datasets.  Replicate b of dataset d is drawn from
    ``streams[d].child(b)``; a non-converged refit is redrawn once from
    ``streams[d].child(b, 1)`` and dropped if it fails again.
    Returns ``(phi (D, B, k), ok (D, B), retried (D,))``.
    """
    kind = get_family(kind)
    n, X = np.asarray(n, dtype=float), np.asarray(X, dtype=float)
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    nu, p = np.atleast_1d(nu).astype(float), np.atleast_1d(p).astype(float)
    D = beta.shape[0]
    p_free = fit_config.p_free
    owner = np.repeat(np.arange(D), B)
    rep = np.tile(np.arange(B), D)

    def refit(rows, gens):
        d = owner[rows]
        ys = _simulate_rows(kind, n[d], X[d], beta[d], nu[d], p[d], gens)
        init = _warm_start(beta[d], nu[d], p[d], p_free)
        bf = em.fit_em_batch(kind, ys, n[d], X[d], fit_config, initial=init)
        return _phi_rows(bf.beta, bf.nu, bf.p, p_free), bf.converged

    rows = np.arange(D * B)
    phi, ok = refit(rows, [streams[owner[r]].child(int(rep[r])).generator() for r in rows])
    retry = np.flatnonzero(~ok)
    if retry.size:
        phi2, ok2 = refit(retry, [streams[owner[r]].child(int(rep[r]), 1).generator()
                                  for r in retry])
        phi[retry], ok[retry] = phi2, ok2
    retried = np.bincount(owner[retry], minlength=D)
    return phi.reshape(D, B, -1), ok.reshape(D, B), retried


def bootstrap_draws(data, fitted: ModelParams, kind: FamilyKind, B: int,
                    fit_config: em.FitConfig, rng: RngStream):
    """Refit B parametric-bootstrap datasets; returns (phi_star (B', k), dropped, retried).

    Replicate b uses stream ``rng.child(b)``; a non-converged refit is redrawn
    once from ``rng.child(b, 1)`` and dropped if it fails again.
    """
    d = as_area_data(data)
    phi, ok, retried = bootstrap_batch(kind, d.n[None], d.X[None], fitted.beta[None],
                                       fitted.nu, fitted.p, B, fit_config, [rng])
    dropped = int((~ok).sum())
    if dropped > MAX_DROP_FRACTION * B:
        raise BootstrapError(f"{dropped} of {B} bootstrap refits failed to converge")
    return phi[0][ok[0]], dropped, int(retried[0])


def uncertainty_from_draws(phi_star, phi_hat, scale: str = "working", p_free: bool = True,
                           dropped: int = 0, retried: int = 0) -> UncertaintyEstimates:
    """Omega and B from bootstrap estimates.

    ``scale="natural"`` averages (phi* - phi_hat) directly.  ``"working"``
    averages on (beta, log nu, logit p) and maps back to the natural scale
    with the delta method: Omega = J Omega_w J and
    B = J B_w + diag(Omega_w) * g''/2 for the nu and p coordinates.
    """
    phi_star = np.asarray(phi_star, dtype=float)
    phi_hat = np.asarray(phi_hat, dtype=float)
    Bn = phi_star.shape[0]
    if Bn < 2:
        raise BootstrapError("need at least two usable bootstrap replicates")
    k = phi_hat.size
    q = k - (2 if p_free else 1)
    if scale == "natural":
        dev = phi_star - phi_hat
        omega = dev.T @ dev / Bn
        bias = dev.mean(axis=0)
    elif scale == "working":
        clip = em.P_CLIP
        to_w = lambda v: np.concatenate(
            [v[..., :q], np.log(v[..., q:q + 1])]
            + ([em.nx.logit(np.clip(v[..., q + 1:], clip, 1 - clip))] if p_free else []), axis=-1)
        dev = to_w(phi_star) - to_w(phi_hat)
        ow = dev.T @ dev / Bn
        bw = dev.mean(axis=0)
        J = np.ones(k)
        curv = np.zeros(k)
        J[q] = curv[q] = phi_hat[q]                    # nu = exp(omega)
        if p_free:
            pc = float(np.clip(phi_hat[q + 1], clip, 1 - clip))
            J[q + 1] = pc * (1 - pc)
            curv[q + 1] = pc * (1 - pc) * (1 - 2 * pc)
        omega = ow * np.outer(J, J)
        bias = J * bw + 0.5 * curv * np.diag(ow)
    else:
        raise ValueError("scale must be 'working' or 'natural'")
    omega = 0.5 * (omega + omega.T)
    return UncertaintyEstimates(omega, bias, Bn, dropped, retried, phi_star)


def bootstrap_uncertainty(data, fitted: ModelParams, kind: FamilyKind, B: int = 100,
                          fit_config: em.FitConfig | None = None, rng: RngStream | None = None,
                          scale: str = "working") -> UncertaintyEstimates:
    """Parametric-bootstrap estimates of Cov(phi_hat) and E(phi_hat - phi)."""
    if B < 2:
        raise ValueError("B must be at least 2")
    fit_config = fit_config or em.FitConfig()
    rng = rng or RngStream(fit_config.seed, 0)
    kind = get_family(kind)
    kind.check_params(fitted)
    draws, dropped, retried = bootstrap_draws(data, fitted, kind, B, fit_config, rng)
    phi_hat = fitted.to_vector(include_p=fit_config.p_free)
    return uncertainty_from_draws(draws, phi_hat, scale, fit_config.p_free, dropped, retried)


# ---------------------------------------------------------------------------
# CMSE
# ---------------------------------------------------------------------------


def derivative_center(phi, q, p_fixed, z):
    """Move a boundary p_hat (0 or 1) inwards by 2z so central probes exist."""
    phi = np.array(phi, dtype=float, copy=True)
    if p_fixed is None:
        phi[..., q + 1] = np.clip(phi[..., q + 1], 2.0 * z, 1.0 - 2.0 * z)
    return phi


def cmse_rows(kind: FamilyKind, y, n, X, phi, omega, bias, z: float, p_fixed=None,
              score_sign: float = -1.0):
    """Vectorized CMSE components for a batch.

    ``y``, ``n``: (R, a); ``X``: (R, a, q); ``phi``: (R, k) natural-scale
    estimates; ``omega``: (R, k, k); ``bias``: (R, k).  Returns a dict of
    (R, a) arrays: r1, r2, b, r1_bc, cm_hat, cm_naive, mu_hat, r and the
    score (R, a, k).

    The conditional bias of phi_hat given area i is taken as
    ``bias + score_sign * omega @ L_i``.  The default is -1; a first-order
    expansion of the estimating equation gives +1.
    """
    kind = get_family(kind)
    q = X.shape[-1]
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    mu_f, r1_f, ll_f = area_functions(kind, y, n, X, p_fixed)
    valid = valid_region(kind, q, p_fixed)
    center = derivative_center(phi, q, p_fixed, z)
    steps = _steps(center, z, valid)

    beta, nu, p = _split(phi, q, p_fixed)
    m = kind.mean(np.einsum("raq,rq->ra", X, beta))
    _, r, mu_hat = posterior_kernel(kind, y, n, m, nu[:, None], p[:, None])
    r1_hat = r1_kernel(kind, y, n, m, nu[:, None], p[:, None])

    g_mu = numeric_grad(mu_f, center, steps=steps)                  # (R, a, k)
    g_r1 = numeric_grad(r1_f, center, steps=steps)
    h_r1 = numeric_hess(r1_f, center, steps=steps)                  # (R, a, k, k)
    score = numeric_grad(ll_f, center, steps=steps)

    r2 = np.einsum("raj,rjl,ral->ra", g_mu, omega, g_mu)
    cond_bias = bias[:, None, :] + score_sign * np.einsum("rjl,ral->raj", omega, score)
    b = (np.einsum("raj,raj->ra", g_r1, cond_bias)
         + 0.5 * np.einsum("rajl,rlj->ra", h_r1, omega))
    r1_bc = r1_hat - b
    return {"r1": r1_hat, "r2": r2, "b": b, "r1_bc": r1_bc, "cm_hat": r1_bc + r2,
            "cm_naive": r1_hat, "mu_hat": mu_hat, "r": r, "m_hat": m, "score": score}


def _single(data, params: ModelParams, kind, p_fixed):
    d = as_area_data(data)
    y, n, X = d.y[None, :], d.n[None, :], d.X[None, :, :]
    phi = params.to_vector(include_p=p_fixed is None)[None, :]
    return d, y, n, X, phi


def r2(rec, params: ModelParams, omega, kind: FamilyKind, cfg: DerivativeConfig | None = None,
       p_fixed=None, m: int | None = None):
    """g' Omega g with g the finite-difference gradient of mu_tilde."""
    d, y, n, X, phi = _single(rec, params, kind, p_fixed)
    z = (cfg or DerivativeConfig()).step(m or d.m)
    q = X.shape[-1]
    mu_f, _, _ = area_functions(kind, y, n, X, p_fixed)
    c = derivative_center(phi, q, p_fixed, z)
    g = numeric_grad(mu_f, c, valid=valid_region(kind, q, p_fixed), z=z)[0]
    out = np.einsum("aj,jl,al->a", g, np.asarray(omega, dtype=float), g)
    return float(out[0]) if isinstance(rec, type(d.record(0))) else out


def bias_b(rec, params: ModelParams, unc: UncertaintyEstimates, kind: FamilyKind,
           cfg: DerivativeConfig | None = None, p_fixed=None, m: int | None = None):
    """Second-order bias of the plug-in R1: R1'(B - Omega L) + tr(R1'' Omega)/2."""
    d, y, n, X, phi = _single(rec, params, kind, p_fixed)
    cfg = cfg or DerivativeConfig()
    out = cmse_rows(kind, y, n, X, phi, unc.omega[None], unc.bias[None], cfg.step(m or d.m),
                    p_fixed, cfg.score_sign)["b"][0]
    return float(out[0]) if isinstance(rec, type(d.record(0))) else out


def cmse_estimate(rec, fitted: ModelParams, unc: UncertaintyEstimates, kind: FamilyKind,
                  cfg: DerivativeConfig | None = None, p_fixed=None, m: int | None = None):
    """CMSE components for one area.

    ``m`` is the number of areas in the fitted dataset (it sets the default
    step ``z = m**(-5/4)``); pass it when ``rec`` is a single record.
    """
    d, y, n, X, phi = _single(rec, fitted, kind, p_fixed)
    cfg = cfg or DerivativeConfig()
    out = cmse_rows(kind, y, n, X, phi, unc.omega[None], unc.bias[None], cfg.step(m or d.m),
                    p_fixed, cfg.score_sign)
    i = 0
    return CmseComponents(float(out["r1"][0, i]), float(out["r2"][0, i]), float(out["b"][0, i]),
                          float(out["r1_bc"][0, i]), float(out["cm_hat"][0, i]),
                          float(out["cm_naive"][0, i]), out["score"][0, i])


def cmse_table(data: AreaData, fitted: ModelParams, unc: UncertaintyEstimates,
               kind: FamilyKind, cfg: DerivativeConfig | None = None, p_fixed=None) -> dict:
    """CMSE components for every area of a dataset (arrays of length m)."""
    d, y, n, X, phi = _single(data, fitted, kind, p_fixed)
    cfg = cfg or DerivativeConfig()
    out = cmse_rows(kind, y, n, X, phi, unc.omega[None], unc.bias[None], cfg.step(d.m),
                    p_fixed, cfg.score_sign)
    return {key: v[0] for key, v in out.items()}


CMSE_COLUMNS = ["area_id", "mu_hat", "r", "r1", "r2", "b", "cm_hat", "cm_naive", "negative_flag"]


def write_cmse_csv(path, area_ids, table: dict):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CMSE_COLUMNS)
        for i, aid in enumerate(area_ids):
            row = [aid] + [f"{table[c][i]:.17g}" for c in CMSE_COLUMNS[1:-1]]
            row.append("1" if table["cm_hat"][i] < 0 else "0")
            w.writerow(row)
