"""Maximum likelihood for (beta, nu, p) by EM.

The engine works on a *batch* of independent datasets at once: ``y`` has shape
``(R, m)`` and every per-dataset quantity carries a leading ``R`` axis.  All
operations are row-wise, so a batch of one is an ordinary single fit and the
simulation / bootstrap code can refit thousands of datasets in one pass.

Two M-step flavours are available:

``exact``
    maximizes the full expected complete-data log-likelihood, including the
    (1 - r_i) log f2 term of areas without a random effect and, for
    Fay-Herriot, the posterior variance of theta.  EM ascent holds.
``plug_in``
    the simplified closed-form updates: the s = 1 part only and, for Fay-Herriot,
    ``A = mean((theta_tilde - x'beta)**2)`` over all areas.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .family import (AreaData, DataError, FamilyKind, FayHerriot, ModelParams,
                     as_area_data, get_family)
from .numerics import OptimizerConfig, RngStream
from .shrinkage import LOG_RATIO_CLIP, posterior_kernel, responsibility_from_logs

OMEGA_MIN, OMEGA_MAX = -12.0, 16.0   # log nu box
ESTEP_STREAM = 101                  # stream tag for Monte Carlo E-step draws
P_CLIP = 1e-6                        # for the logit-p convergence coordinate


class DegenerateDataError(DataError):
    """All observations identical: hyperparameters are not identified."""


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    """EM settings.

    ``p_fixed`` switches the mixing weight off (``p_fixed=1`` is the classical
    empirical Bayes fit).  ``e_step_mode`` is ``"analytic"`` or
    ``"monte_carlo"`` (with ``mc_samples`` draws per area).
    """

    tol: float = 1e-6
    max_iter: int = 1000
    e_step_mode: str = "analytic"
    mc_samples: int = 5000
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    p_fixed: Optional[float] = None
    update: str = "exact"
    m_step_solver: str = "newton"
    boundary_moves: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.e_step_mode not in ("analytic", "monte_carlo"):
            raise ValueError("e_step_mode must be 'analytic' or 'monte_carlo'")
        if self.e_step_mode == "monte_carlo" and self.mc_samples < 100:
            raise ValueError("monte_carlo E-step needs at least 100 samples")
        if self.p_fixed is not None and not 0.0 <= self.p_fixed <= 1.0:
            raise ValueError("p_fixed must lie in [0, 1]")
        if self.update not in ("exact", "plug_in"):
            raise ValueError("update must be 'exact' or 'plug_in'")
        if self.m_step_solver not in ("newton", "simplex"):
            raise ValueError("m_step_solver must be 'newton' or 'simplex'")

    @property
    def p_free(self) -> bool:
        return self.p_fixed is None

    def n_params(self, q: int) -> int:
        return q + (2 if self.p_free else 1)


@dataclass
class EQuantities:
    """E-step output per area: r_i, E[theta|s=1,y], E[psi(theta)|s=1,y]."""

    r: np.ndarray
    e_theta: np.ndarray
    e_psi: np.ndarray


@dataclass
class FitResult:
    params: ModelParams
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    family: FamilyKind
    p_fixed: Optional[float] = None
    m: int = 0

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])

    @property
    def n_params(self) -> int:
        return self.params.q + (2 if self.p_fixed is None else 1)

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.n_params

    @property
    def bic(self) -> float:
        return -2.0 * self.loglik + self.n_params * math.log(self.m)

    def to_dict(self) -> dict:
        return {
            "family": self.family.short,
            "beta": [float(b) for b in self.params.beta],
            "nu": self.params.nu,
            "p": self.params.p,
            "p_mode": "free" if self.p_fixed is None else f"fixed={self.p_fixed!r}",
            "loglik": self.loglik,
            "aic": self.aic,
            "bic": self.bic,
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "m": int(self.m),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        mode = d.get("p_mode", "free")
        p_fixed = None if mode == "free" else float(mode.split("=", 1)[1])
        return cls(ModelParams(d["beta"], d["nu"], d["p"]), np.array([d["loglik"]]),
                   int(d["iterations"]), bool(d["converged"]), get_family(d["family"]),
                   p_fixed, int(d.get("m", 0)))


@dataclass
class BatchFit:
    beta: np.ndarray
    nu: np.ndarray
    p: np.ndarray
    loglik: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    traces: Optional[list] = None

    def params(self, i: int) -> ModelParams:
        return ModelParams(self.beta[i], self.nu[i], self.p[i])

    def phi(self, include_p: bool = True) -> np.ndarray:
        cols = [self.beta, self.nu[:, None]]
        if include_p:
            cols.append(self.p[:, None])
        return np.hstack(cols)


# ---------------------------------------------------------------------------
# helpers on batches
# ---------------------------------------------------------------------------


def _as_batch(y, n, X):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    R, m = y.shape
    n = np.broadcast_to(np.asarray(n, dtype=float), (R, m))
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = np.broadcast_to(X, (R,) + X.shape)
    if X.shape[:2] != (R, m):
        raise ValueError("X must have shape (m, q) or (R, m, q)")
    return y, n, X


def _lin(X, beta):
    return np.einsum("rmq,rq->rm", X, beta)


def _mix_loglik(lf1, lf2, p):
    p = np.asarray(p, dtype=float)[:, None]
    with np.errstate(divide="ignore"):
        return np.logaddexp(np.log(p) + lf1, np.log1p(-p) + lf2).sum(axis=1)


def _working(beta, nu, p, p_free):
    cols = [beta, np.log(nu)[:, None]]
    if p_free:
        cols.append(nx.logit(np.clip(p, P_CLIP, 1.0 - P_CLIP))[:, None])
    return np.hstack(cols)


def marginal_loglik_batch(kind, y, n, X, beta, nu, p):
    y, n, X = _as_batch(y, n, X)
    m = kind.mean(_lin(X, np.atleast_2d(beta)))
    nu = np.asarray(nu, dtype=float).reshape(-1)
    lf1 = kind.log_f1(y, n, m, nu[:, None])
    lf2 = kind.log_f2(y, n, m)
    return _mix_loglik(lf1, lf2, np.asarray(p, dtype=float).reshape(-1))


def marginal_loglik(data, params: ModelParams, kind: FamilyKind) -> float:
    """sum_i log{p f1(y_i) + (1 - p) f2(y_i)}."""
    d = as_area_data(data)
    kind.check_params(params)
    kind.validate(d.y, d.n)
    return float(marginal_loglik_batch(kind, d.y, d.n, d.X, params.beta[None, :],
                                       [params.nu], [params.p])[0])


# ---------------------------------------------------------------------------
# Initial values
# ---------------------------------------------------------------------------


def initial_params_batch(kind: FamilyKind, y, n, X, p0: float = 0.5, ridge: float = 1e-8):
    """GLM (IRLS) start for beta, moment start for nu, p0 for p."""
    y, n, X = _as_batch(y, n, X)
    R, m, q = X.shape
    if isinstance(kind, FayHerriot):
        eta = y.copy()
    else:
        z = np.round(y * n)
        if kind.v2 < 0:
            eta = nx.logit((z + 0.5) / (n + 1.0))
        else:
            eta = np.log((z + 0.5) / n)
    eye = ridge * np.eye(q)
    beta = np.zeros((R, q))
    for it in range(25):
        mu = kind.mean(eta)
        qm = np.maximum(kind.variance_fn(mu), 1e-12)
        w = n * qm
        work = eta + (y - mu) / qm if it else eta
        M = np.einsum("rm,rmq,rmk->rqk", w, X, X) + eye
        b = np.einsum("rm,rmq->rq", w * work, X)
        new = np.linalg.solve(M, b[..., None])[..., 0]
        eta = _lin(X, new)
        if np.max(np.abs(new - beta)) < 1e-10:
            beta = new
            break
        beta = new
    mu = kind.mean(eta)
    qm = kind.variance_fn(mu)
    num = (np.square(y - mu) - qm / n).sum(axis=1)
    den = (qm * (1.0 + kind.v2 / n)).sum(axis=1)
    tau = num / den / max(p0, 1e-3)
    if isinstance(kind, FayHerriot):
        tau = np.maximum(tau, 1e-3 * np.mean(1.0 / n, axis=1))
        nu = 1.0 / tau
    else:
        # a non-positive moment estimate would start EM on the nu -> inf ridge
        nu = kind.v2 + 1.0 / np.maximum(tau, 0.02)
        nu = np.maximum(nu, max(kind.v2, 0.0) + 0.5)
    nu = np.clip(nu, math.exp(OMEGA_MIN), math.exp(OMEGA_MAX))
    return beta, nu, np.full(R, float(p0))


def initial_params(data, kind: FamilyKind, p0: float = 0.5) -> ModelParams:
    d = as_area_data(data)
    b, nu, p = initial_params_batch(kind, d.y, d.n, d.X, p0)
    return ModelParams(b[0], nu[0], p[0])


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


def _e_step_batch(kind, y, n, m, nu, p, config: FitConfig, streams=None):
    lf1 = kind.log_f1(y, n, m, nu[:, None])
    lf2 = kind.log_f2(y, n, m)
    ll = _mix_loglik(lf1, lf2, p)
    r = responsibility_from_logs(lf1, lf2, p[:, None])
    if config.e_step_mode == "analytic":
        t, ps = kind.posterior_moments(y, n, m, nu[:, None])
    else:
        t, ps = _mc_moments(kind, y, n, m, nu, config, streams)
    return ll, EQuantities(r, t, ps)


def _mc_moments(kind, y, n, m, nu, config, streams):
    # common random numbers: the same stream per dataset at every iteration
    R = y.shape[0]
    t = np.empty_like(y)
    ps = np.empty_like(y)
    for i in range(R):
        sid = i if streams is None else int(streams[i])
        g = RngStream(config.seed, (ESTEP_STREAM, sid)).generator()
        th = kind.sample_posterior_theta(y[i], n[i], m[i], nu[i], g,
                                         size=(config.mc_samples, y.shape[1]))
        t[i] = th.mean(axis=0)
        ps[i] = kind.psi(th).mean(axis=0)
    return t, ps


def e_step(data, params: ModelParams, kind: FamilyKind, mode: str = "analytic",
           rng=None, mc_samples: int = 5000) -> EQuantities:
    """Responsibilities and posterior expectations at ``params``."""
    d = as_area_data(data)
    kind.check_params(params)
    kind.validate(d.y, d.n)
    cfg = FitConfig(e_step_mode=mode, mc_samples=mc_samples,
                    seed=rng.seed if isinstance(rng, RngStream) else 0)
    y, n, X = _as_batch(d.y, d.n, d.X)
    m = kind.mean(_lin(X, params.beta[None, :]))
    streams = None
    if isinstance(rng, RngStream):
        streams = [rng.key[0] if rng.key else 0]
    _, eq = _e_step_batch(kind, y, n, m, np.array([params.nu]), np.array([params.p]), cfg, streams)
    return EQuantities(eq.r[0], eq.e_theta[0], eq.e_psi[0])


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def _q_objective(kind, X, y, n, r, T, P, w, literal, derivs):
    """Expected complete log-likelihood in (beta, log nu), plus derivatives."""
    q = X.shape[-1]
    beta = w[:, :q]
    nu = np.exp(w[:, q])[:, None]
    eta = _lin(X, beta)
    m = kind.mean(eta)
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        g = nu * (m * T - P) + kind.prior_norm(nu, m)
        val = (r * g).sum(axis=1)
        if not literal:
            val = val + ((1.0 - r) * kind.log_f2(y, n, m)).sum(axis=1)
    val = np.where(np.isfinite(val), val, -np.inf)
    if not derivs:
        return val
    qm = kind.variance_fn(m)
    dq = kind.variance_fn_deriv(m)
    c_m, c_mm, c_nu, c_mnu, c_nunu = kind.prior_norm_derivs(nu, m)
    a = nu * T + c_m
    d_eta = r * qm * a
    d2_eta = r * (dq * qm * a + qm * qm * c_mm)
    if not literal:
        d_eta = d_eta + (1.0 - r) * n * (y - m)
        d2_eta = d2_eta - (1.0 - r) * n * qm
    g_nu = m * T - P + c_nu
    R = w.shape[0]
    G = np.empty((R, q + 1))
    G[:, :q] = np.einsum("rm,rmq->rq", d_eta, X)
    G[:, q] = (r * nu * g_nu).sum(axis=1)
    H = np.empty((R, q + 1, q + 1))
    H[:, :q, :q] = np.einsum("rm,rmq,rmk->rqk", d2_eta, X, X)
    hbo = np.einsum("rm,rmq->rq", r * nu * qm * (T + c_mnu), X)
    H[:, :q, q] = hbo
    H[:, q, :q] = hbo
    H[:, q, q] = (r * (nu * g_nu + nu * nu * c_nunu)).sum(axis=1)
    return val, G, H


def _clamp(w, q):
    w[:, q] = np.clip(w[:, q], OMEGA_MIN, OMEGA_MAX)
    return w


def _newton_m_step(kind, X, y, n, eq, w0, literal, max_iter=50):
    """Damped (saddle-free) Newton with backtracking; never decreases Q."""
    q = X.shape[-1]
    r, T, P = eq.r, eq.e_theta, eq.e_psi
    w = _clamp(w0.copy(), q)
    R = w.shape[0]

    def fun(idx, ww, derivs):
        return _q_objective(kind, X[idx], y[idx], n[idx], r[idx], T[idx], P[idx], ww, literal, derivs)

    active = np.arange(R)
    prev = np.full(R, np.inf)
    for _ in range(max_iter):
        if active.size == 0:
            break
        v, G, H = fun(active, w[active], True)
        # log nu held at a bound with the gradient pointing outwards leaves the system
        wq = w[active, q]
        pin = (((wq >= OMEGA_MAX) & (G[:, q] > 0)) | ((wq <= OMEGA_MIN) & (G[:, q] < 0)))
        if pin.any():
            G[pin, q] = 0.0
            H[pin, q, :] = 0.0
            H[pin, :, q] = 0.0
            H[pin, q, q] = -1.0
        lam, V = np.linalg.eigh(H)
        scale = np.maximum(np.abs(lam).max(axis=1, keepdims=True), 1e-300)
        lam = np.maximum(np.abs(lam), 1e-10 * scale)
        d = np.einsum("rij,rj->ri", V, np.einsum("rji,rj->ri", V, G) / lam)
        big = np.abs(d).max(axis=1)
        d *= np.minimum(1.0, 4.0 / np.maximum(big, 1e-300))[:, None]
        dec = (G * d).sum(axis=1)
        size = 1.0 + np.abs(v)
        local = dec < 1e-6 * size
        # stop at convergence, or once the decrement stalls at the rounding floor
        stop = ((dec < 1e-15 * size) | (local & (dec > 0.1 * prev[active]))
                | ~np.all(np.isfinite(d), axis=1))
        prev[active] = dec
        # quadratic region: the full step is trusted (Q differences are noise here)
        quad = local & ~stop
        if quad.any():
            # trusted unless Q falls by more than its rounding floor
            qi = active[quad]
            trial = _clamp(w[qi] + d[quad], q)
            ok = fun(qi, trial, False) >= v[quad] - 1e-13 * size[quad]
            w[qi[ok]] = trial[ok]
            quad[np.flatnonzero(quad)[~ok]] = False
            local = local & (quad | stop)
        again = quad & (dec >= 1e-8 * size)
        keep = ~stop & ~local
        idx, d, dec, v = active[keep], d[keep], dec[keep], v[keep]
        t = np.ones(idx.size)
        pend = np.arange(idx.size)
        moved = np.zeros(idx.size, dtype=bool)
        for _ls in range(30):
            if pend.size == 0:
                break
            trial = _clamp(w[idx[pend]] + t[pend, None] * d[pend], q)
            tv = fun(idx[pend], trial, False)
            ok = tv >= v[pend] + 1e-4 * t[pend] * dec[pend]
            acc = pend[ok]
            w[idx[acc]] = trial[ok]
            moved[acc] = True
            pend = pend[~ok]
            t[pend] *= 0.5
        # a Newton step from a decrement below 1e-8 leaves one of order dec**2
        active = np.concatenate([active[again], idx[moved]])
    return w


def _fh_exact_m_step(X, y, n, eq, beta, nu, sweeps=200):
    """Closed-form coordinate ascent for (beta, A) in the Fay-Herriot model."""
    r, T = eq.r, eq.e_theta
    V = 2.0 * eq.e_psi - np.square(T)      # posterior variance given s = 1
    sr = r.sum(axis=1)
    A = 1.0 / nu
    for _ in range(sweeps):
        w1 = r / A[:, None]
        w2 = (1.0 - r) * n
        M = np.einsum("rm,rmq,rmk->rqk", w1 + w2, X, X)
        b = np.einsum("rm,rmq->rq", w1 * T + w2 * y, X)
        beta_new = np.linalg.solve(M, b[..., None])[..., 0]
        res = T - _lin(X, beta_new)
        with np.errstate(invalid="ignore", divide="ignore"):
            A_new = np.where(sr > 0, (r * (np.square(res) + V)).sum(axis=1) / sr, A)
        A_new = np.clip(A_new, math.exp(-OMEGA_MAX), math.exp(-OMEGA_MIN))
        done = (np.max(np.abs(beta_new - beta)) < 1e-13 * (1 + np.max(np.abs(beta)))
                and np.max(np.abs(A_new - A) / A) < 1e-13)
        beta, A = beta_new, A_new
        if done:
            break
    return beta, 1.0 / A


def _fh_literal_m_step(X, y, n, eq):
    r, T = eq.r, eq.e_theta
    M = np.einsum("rm,rmq,rmk->rqk", r, X, X)
    b = np.einsum("rm,rmq->rq", r * T, X)
    try:
        beta = np.linalg.solve(M, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise ConvergenceError("singular weighted design matrix in the Fay-Herriot M-step") from None
    A = np.mean(np.square(T - _lin(X, beta)), axis=1)
    A = np.clip(A, math.exp(-OMEGA_MAX), math.exp(-OMEGA_MIN))
    return beta, 1.0 / A


def _simplex_m_step(kind, X, y, n, eq, w0, literal, opt: OptimizerConfig):
    w = w0.copy()
    q = X.shape[-1]
    for i in range(w.shape[0]):
        sl = slice(i, i + 1)

        def obj(v):
            vv = v.reshape(1, -1).copy()
            if not OMEGA_MIN <= vv[0, q] <= OMEGA_MAX:
                return -math.inf
            return float(_q_objective(kind, X[sl], y[sl], n[sl], eq.r[sl], eq.e_theta[sl],
                                      eq.e_psi[sl], vv, literal, False)[0])
        try:
            w[i], _ = nx.maximize(obj, w0[i], opt)
        except nx.NonConvergenceError as exc:
            w[i] = exc.best
    return w


def _m_step_batch(kind, X, y, n, eq, beta, nu, p, config: FitConfig):
    literal = config.update == "plug_in"
    p_new = eq.r.mean(axis=1) if config.p_free else p
    if isinstance(kind, FayHerriot) and config.m_step_solver == "newton":
        if literal:
            b, v = _fh_literal_m_step(X, y, n, eq)
        else:
            b, v = _fh_exact_m_step(X, y, n, eq, beta, nu)
        return b, v, p_new
    q = X.shape[-1]
    w0 = np.hstack([beta, np.log(nu)[:, None]])
    if config.m_step_solver == "newton":
        w = _newton_m_step(kind, X, y, n, eq, w0, literal)
    else:
        w = _simplex_m_step(kind, X, y, n, eq, w0, literal, config.optimizer)
    return w[:, :q], np.exp(w[:, q]), p_new


def m_step(data, e_quantities: EQuantities, current: ModelParams, kind: FamilyKind,
           config: FitConfig | None = None) -> ModelParams:
    """One M-step from E-step output (single dataset)."""
    config = config or FitConfig()
    d = as_area_data(data)
    y, n, X = _as_batch(d.y, d.n, d.X)
    eq = EQuantities(*(np.atleast_2d(np.asarray(a, dtype=float)) for a in
                       (e_quantities.r, e_quantities.e_theta, e_quantities.e_psi)))
    b, v, p = _m_step_batch(kind, X, y, n, eq, current.beta[None, :], np.array([current.nu]),
                            np.array([current.p if config.p_free else config.p_fixed]), config)
    return ModelParams(b[0], v[0], p[0])


# ---------------------------------------------------------------------------
# Boundary moves
# ---------------------------------------------------------------------------

BOUNDARY_EVERY = 25
BOUNDARY_P = 0.05         # p within this of 0 or 1 triggers a boundary proposal
BOUNDARY_OMEGA = math.log(1e2)


def _golden_omega(kind, y, n, m, omega0, iters=40):
    """Row-wise golden-section maximization of the p = 1 likelihood in log nu."""
    a = np.maximum(omega0 - 3.0, OMEGA_MIN)
    b = np.full_like(a, OMEGA_MAX)
    g = (math.sqrt(5.0) - 1.0) / 2.0

    def f(w):
        return kind.log_f1(y, n, m, np.exp(w)[:, None]).sum(axis=1)

    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc >= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = b - g * (b - a)
        d_new = a + g * (b - a)
        # reuse the surviving interior point
        c, d = np.where(left, c_new, d), np.where(left, c, d_new)
        fc, fd = np.where(left, f(c), fd), np.where(left, fc, f(d))
    return 0.5 * (a + b)


def _boundary_moves(kind, y, n, X, beta, nu, p, p_free):
    """Propose jumps to the parameter-space boundary that EM only approaches.

    When the MLE sits at p = 1, p = 0, nu = 0 or nu = inf, EM creeps towards it at a
    sublinear rate and the parameter-change test is never met.  A proposal is
    accepted only if it does not lower the marginal log-likelihood and the
    one-sided derivative of L at the boundary points outwards, so an accepted
    move is a generalized-EM step.  Returns updated (nu, p) and the moved mask.
    """
    m = kind.mean(_lin(X, beta))
    lf2 = kind.log_f2(y, n, m)
    lf1 = kind.log_f1(y, n, m, nu[:, None])
    cur = _mix_loglik(lf1, lf2, p)
    nu_new, p_new = nu.copy(), p.copy()
    moved = np.zeros(y.shape[0], dtype=bool)
    if p_free:
        d = np.clip(lf2 - lf1, -LOG_RATIO_CLIP, LOG_RATIO_CLIP)
        hi = np.flatnonzero(p < 1.0)
        ok_hi = np.zeros(p.size, dtype=bool)
        if hi.size:
            # along the ridge p and nu trade off, so profile nu at p = 1
            om = _golden_omega(kind, y[hi], n[hi], m[hi], np.log(nu[hi]))
            lf1p = kind.log_f1(y[hi], n[hi], m[hi], np.exp(om)[:, None])
            dp = np.clip(lf2[hi] - lf1p, -LOG_RATIO_CLIP, LOG_RATIO_CLIP)
            # dL/dp at p = 1 is sum(1 - f2/f1)
            acc = (((1.0 - np.exp(dp)).sum(axis=1) >= 0)
                   & (_mix_loglik(lf1p, lf2[hi], np.ones(hi.size)) >= cur[hi]))
            ok_hi[hi[acc]] = True
            nu_new[hi[acc]] = np.exp(om[acc])
        # at p = 0 the derivative is sum(f1/f2 - 1)
        lo = (p < BOUNDARY_P) & (p > 0.0)
        ok_lo = lo & ((np.exp(-d) - 1.0).sum(axis=1) <= 0)
        ok_lo &= _mix_loglik(lf1, lf2, np.zeros_like(p)) >= cur
        p_new[ok_hi] = 1.0
        p_new[ok_lo] = 0.0
        moved |= ok_hi | ok_lo
        # a boundary reached earlier whose derivative now points inwards
        back = (p == 1.0) & ((1.0 - np.exp(d)).sum(axis=1) < -1e-8)
        back |= (p == 0.0) & ((np.exp(-d) - 1.0).sum(axis=1) > 1e-8)
        inner = np.where(p == 1.0, 1.0 - BOUNDARY_P, BOUNDARY_P)
        back &= _mix_loglik(lf1, lf2, inner) >= cur
        p_new[back] = inner[back]
        moved |= back
    # nu drifting to either end of its range: jump there if L rises along the way
    lognu = np.log(nu)
    for edge, factor, side in ((OMEGA_MAX, 2.0, lognu > BOUNDARY_OMEGA),
                               (OMEGA_MIN, 0.5, lognu < -BOUNDARY_OMEGA)):
        cand = side & (np.abs(lognu - edge) > 1e-9) & ~moved
        if not cand.any():
            continue
        lf1e = kind.log_f1(y[cand], n[cand], m[cand], np.full((cand.sum(), 1), math.exp(edge)))
        lf1h = kind.log_f1(y[cand], n[cand], m[cand], factor * nu[cand][:, None])
        c = cur[cand]
        ok = ((_mix_loglik(lf1e, lf2[cand], p[cand]) >= c)
              & (_mix_loglik(lf1h, lf2[cand], p[cand]) >= c))
        idx = np.flatnonzero(cand)[ok]
        nu_new[idx] = math.exp(edge)
        moved[idx] = True
    return nu_new, p_new, moved


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def fit_em_batch(kind: FamilyKind, y, n, X, config: FitConfig | None = None, initial=None,
                 keep_traces: bool = False, streams=None) -> BatchFit:
    """Run EM independently on every row of ``y``.

    ``initial`` is ``None`` (GLM start) or a tuple ``(beta (R,q), nu (R,), p (R,))``.
    Rows stop individually once the max-abs change of
    (beta, log nu, logit p) drops below ``config.tol``.
    """
    config = config or FitConfig()
    kind = get_family(kind)
    y, n, X = _as_batch(y, n, X)
    R, m, q = X.shape
    if initial is None:
        p0 = 0.5 if config.p_free else config.p_fixed
        beta, nu, p = initial_params_batch(kind, y, n, X, p0)
    else:
        beta = np.array(np.broadcast_to(initial[0], (R, q)), dtype=float)
        nu = np.array(np.broadcast_to(initial[1], (R,)), dtype=float)
        p = np.array(np.broadcast_to(initial[2], (R,)), dtype=float)
    if not config.p_free:
        p = np.full(R, float(config.p_fixed))
    nu = np.clip(nu, math.exp(OMEGA_MIN), math.exp(OMEGA_MAX))
    streams = np.arange(R) if streams is None else np.asarray(streams)

    loglik = np.full(R, np.nan)
    iters = np.zeros(R, dtype=int)
    conv = np.zeros(R, dtype=bool)
    traces = [[] for _ in range(R)] if keep_traces else None
    active = np.arange(R)
    work = _working(beta, nu, p, config.p_free)

    for it in range(config.max_iter + 1):
        a = active
        ya, na, Xa = y[a], n[a], X[a]
        ma = kind.mean(_lin(Xa, beta[a]))
        ll, eq = _e_step_batch(kind, ya, na, ma, nu[a], p[a], config, streams[a])
        loglik[a] = ll
        if keep_traces:
            for j, i in enumerate(a):
                traces[i].append(float(ll[j]))
        if it > 0:
            newly = np.max(np.abs(_working(beta[a], nu[a], p[a], config.p_free) - work[a]),
                           axis=1) < config.tol
            conv[a[newly]] = True
            work[a] = _working(beta[a], nu[a], p[a], config.p_free)
            keep = ~newly
            if it == config.max_iter:
                break
            a, ya, na, Xa = a[keep], ya[keep], na[keep], Xa[keep]
            eq = EQuantities(eq.r[keep], eq.e_theta[keep], eq.e_psi[keep])
            active = a
            if a.size == 0:
                break
        b_new, nu_new, p_new = _m_step_batch(kind, Xa, ya, na, eq, beta[a], nu[a], p[a], config)
        if config.boundary_moves and it >= 2 * BOUNDARY_EVERY and it % BOUNDARY_EVERY == 0:
            nu_new, p_new, _ = _boundary_moves(kind, ya, na, Xa, b_new, nu_new, p_new,
                                               config.p_free)
        beta[a], nu[a], p[a] = b_new, nu_new, p_new
        iters[a] += 1

    tr = [np.array(t) for t in traces] if keep_traces else None
    return BatchFit(beta, nu, p, loglik, iters, conv, tr)


def fit_em(data, kind: FamilyKind, config: FitConfig | None = None,
           initial: ModelParams | None = None) -> FitResult:
    """Fit (beta, nu, p) to one dataset by EM.

    Non-convergence is reported through ``FitResult.converged`` rather than
    raised.  Raises :class:`DegenerateDataError` when every y is identical.
    """
    config = config or FitConfig()
    kind = get_family(kind)
    d = as_area_data(data)
    kind.validate(d.y, d.n)
    if d.m < 2 or np.all(d.y == d.y[0]):
        raise DegenerateDataError("all observations are identical; the model is not identified")
    init = None
    if initial is not None:
        kind.check_params(initial)
        init = (initial.beta[None, :], np.array([initial.nu]), np.array([initial.p]))
    bf = fit_em_batch(kind, d.y, d.n, d.X, config, init, keep_traces=True,
                      streams=[0])
    return FitResult(bf.params(0), bf.traces[0], int(bf.iterations[0]), bool(bf.converged[0]),
                     kind, config.p_fixed, d.m)


def eub_batch(kind: FamilyKind, y, n, X, beta, nu, p):
    """EUB estimates for every row of a batch at per-row parameters."""
    y, n, X = _as_batch(y, n, X)
    m = kind.mean(_lin(X, beta))
    _, r, mu = posterior_kernel(kind, y, n, m, np.asarray(nu)[:, None], np.asarray(p)[:, None])
    return mu, r, m
