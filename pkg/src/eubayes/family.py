"""NEF-QVF area-level models with an uncertain conjugate prior.

Three members are supported: Fay-Herriot (normal-normal), Poisson-gamma and
binomial-beta.  Each family exposes array kernels (``log_f1``, ``log_f2``,
posterior moments, ...) that broadcast over any shape, so the same code serves
a single area, a dataset, or a stack of simulated datasets.

For the count families ``y`` is the rate/proportion ``z / n``; densities are
masses of the count ``z = n * y`` (no Jacobian).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import betaln, gammaln, log_rising, psi, trigamma

LOG_2PI = math.log(2.0 * math.pi)
MEAN_EPS = 1e-12
ETA_CLIP = 700.0


class ParameterError(ValueError):
    """Parameters or records violate a model invariant."""


class DataError(ValueError):
    """Input data violate the family's support (e.g. non-integer counts)."""


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AreaRecord:
    """One area: direct estimate ``y``, known scale ``n`` and covariates ``x``.

    For Fay-Herriot ``n = 1 / D`` where ``D`` is the sampling variance.
    """

    y: float
    n: float
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        if not self.n > 0:
            raise DataError("n must be positive")


@dataclass(frozen=True)
class ModelParams:
    """Hyperparameters (beta, nu, p). ``A = 1 / nu`` for Fay-Herriot."""

    beta: np.ndarray
    nu: float
    p: float

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.beta, dtype=float)).copy()
        b.setflags(write=False)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "nu", float(self.nu))
        object.__setattr__(self, "p", float(self.p))
        if not (0.0 <= self.p <= 1.0):
            raise ParameterError(f"p must lie in [0, 1], got {self.p}")
        if not (self.nu > 0 and math.isfinite(self.nu)):
            raise ParameterError(f"nu must be finite and positive, got {self.nu}")

    @property
    def A(self) -> float:
        return 1.0 / self.nu

    @property
    def q(self) -> int:
        return self.beta.size

    def to_vector(self, include_p: bool = True) -> np.ndarray:
        tail = [self.nu, self.p] if include_p else [self.nu]
        return np.concatenate([self.beta, tail])

    @classmethod
    def from_vector(cls, vec, p: float | None = None) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        if p is None:
            return cls(vec[:-2], vec[-2], vec[-1])
        return cls(vec[:-1], vec[-1], p)

    def replace(self, **kw) -> "ModelParams":
        d = {"beta": self.beta, "nu": self.nu, "p": self.p}
        d.update(kw)
        return ModelParams(**d)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (np.array_equal(self.beta, other.beta) and self.nu == other.nu
                and self.p == other.p)

    __hash__ = None


@dataclass(frozen=True)
class LatentState:
    s: int
    theta: float
    mu: float


@dataclass
class AreaData:
    """A set of areas held as arrays: ``y`` (m,), ``n`` (m,), ``X`` (m, q)."""

    y: np.ndarray
    n: np.ndarray
    X: np.ndarray
    area_ids: list = field(default_factory=list)
    covariate_names: list = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.n = np.asarray(self.n, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        self.X = X.reshape(-1, 1) if X.ndim == 1 else X
        m = self.y.size
        if self.n.size != m or self.X.shape[0] != m:
            raise DataError("y, n and X must describe the same number of areas")
        if not self.area_ids:
            self.area_ids = [str(i + 1) for i in range(m)]
        if not self.covariate_names:
            self.covariate_names = [f"x{j + 1}" for j in range(self.X.shape[1])]

    @property
    def m(self) -> int:
        return self.y.size

    @property
    def q(self) -> int:
        return self.X.shape[1]

    def record(self, i: int) -> AreaRecord:
        return AreaRecord(self.y[i], self.n[i], self.X[i])

    def records(self) -> list:
        return [self.record(i) for i in range(self.m)]

    def subset(self, mask) -> "AreaData":
        idx = np.flatnonzero(np.asarray(mask))
        return AreaData(self.y[idx], self.n[idx], self.X[idx],
                        [self.area_ids[i] for i in idx], list(self.covariate_names))

    def with_y(self, y) -> "AreaData":
        return AreaData(np.asarray(y, dtype=float), self.n, self.X,
                        list(self.area_ids), list(self.covariate_names))


def as_area_data(data) -> AreaData:
    if isinstance(data, AreaData):
        return data
    if isinstance(data, AreaRecord):
        data = [data]
    recs: Sequence[AreaRecord] = list(data)
    if not recs:
        raise DataError("no areas supplied")
    return AreaData([r.y for r in recs], [r.n for r in recs], np.vstack([r.x for r in recs]))


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------


class FamilyKind:
    """Base class; the variance function is Q(x) = v0 + v1 x + v2 x**2."""

    tag: str = ""
    short: str = ""
    v0 = v1 = v2 = 0.0

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return isinstance(other, FamilyKind) and other.tag == self.tag

    def __hash__(self):
        return hash(self.tag)

    def variance_fn(self, x):
        return self.v0 + self.v1 * x + self.v2 * x * x

    def variance_fn_deriv(self, x):
        return self.v1 + 2.0 * self.v2 * x

    def nu_floor(self) -> float:
        return max(0.0, self.v2)

    def check_params(self, params: ModelParams):
        if not params.nu > self.nu_floor():
            raise ParameterError(f"nu must exceed {self.nu_floor()} for {self.tag}")

    # link and natural-parameter maps -------------------------------------
    def mean(self, eta):
        """m = psi'(eta) for the canonical link."""
        raise NotImplementedError

    def theta_of_mean(self, mu):
        raise NotImplementedError

    def psi(self, theta):
        raise NotImplementedError

    # support -------------------------------------------------------------
    def counts(self, y, n):
        """Validated count n*y (count families) or None."""
        return None

    def validate(self, y, n):
        n = np.asarray(n, dtype=float)
        if np.any(~(n > 0)):
            raise DataError("n must be positive")
        self.counts(y, n)

    # densities -------------------------------------------------------------
    def log_f1(self, y, n, m, nu):
        raise NotImplementedError

    def log_f2(self, y, n, m):
        raise NotImplementedError

    # conjugate posterior given s = 1 ------------------------------------------
    def posterior(self, y, n, m, nu):
        raise NotImplementedError

    def posterior_moments(self, y, n, m, nu):
        """(E[theta | s=1, y], E[psi(theta) | s=1, y])."""
        raise NotImplementedError

    def sample_posterior_theta(self, y, n, m, nu, rng, size=None):
        raise NotImplementedError

    # prior and observation draws ----------------------------------------------
    def sample_prior_mean(self, m, nu, rng, size=None):
        """Draw mu from the conjugate prior (the s = 1 branch)."""
        raise NotImplementedError

    def sample_observation(self, mu, n, rng, size=None):
        raise NotImplementedError

    # log normalizer C(nu, m) and its partial derivatives ------------------------
    def prior_norm(self, nu, m):
        raise NotImplementedError

    def prior_norm_derivs(self, nu, m):
        """(C_m, C_mm, C_nu, C_mnu, C_nunu)."""
        raise NotImplementedError


def _eta_clip(eta):
    return np.clip(eta, -ETA_CLIP, ETA_CLIP)


def _counts(y, n, upper):
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    z = y * n
    zr = np.round(z)
    if np.any(np.abs(z - zr) > 1e-8 * np.maximum(1.0, np.abs(z))):
        raise DataError("n*y must be an integer count")
    if np.any(zr < 0):
        raise DataError("counts must be nonnegative")
    if upper and np.any(zr > np.round(n)):
        raise DataError("binomial count exceeds n")
    return zr


class FayHerriot(FamilyKind):
    tag, short = "FayHerriot", "fh"
    v0, v1, v2 = 1.0, 0.0, 0.0

    def mean(self, eta):
        return np.asarray(eta, dtype=float)

    def theta_of_mean(self, mu):
        return np.asarray(mu, dtype=float)

    def psi(self, theta):
        return 0.5 * np.square(theta)

    def log_f1(self, y, n, m, nu):
        v = 1.0 / nu + 1.0 / n
        return -0.5 * (LOG_2PI + np.log(v) + np.square(y - m) / v)

    def log_f2(self, y, n, m):
        return -0.5 * (LOG_2PI - np.log(n) + n * np.square(y - m))

    def posterior(self, y, n, m, nu):
        """(mean, variance) of the normal posterior of theta."""
        return (n * y + nu * m) / (n + nu), 1.0 / (n + nu)

    def posterior_moments(self, y, n, m, nu):
        mean, var = self.posterior(y, n, m, nu)
        return mean, 0.5 * (np.square(mean) + var)

    def sample_posterior_theta(self, y, n, m, nu, rng, size=None):
        mean, var = self.posterior(y, n, m, nu)
        return nx.sample(nx.Normal(mean, np.sqrt(var)), rng, size)

    def sample_prior_mean(self, m, nu, rng, size=None):
        return nx.sample(nx.Normal(m, np.sqrt(1.0 / np.asarray(nu, dtype=float))), rng, size)

    def sample_observation(self, mu, n, rng, size=None):
        return nx.sample(nx.Normal(mu, np.sqrt(1.0 / np.asarray(n, dtype=float))), rng, size)

    def prior_norm(self, nu, m):
        return -0.5 * nu * np.square(m) + 0.5 * (np.log(nu) - LOG_2PI)

    def prior_norm_derivs(self, nu, m):
        nu = np.asarray(nu, dtype=float)
        m = np.asarray(m, dtype=float)
        return (-nu * m, -nu + 0.0 * m, -0.5 * np.square(m) + 0.5 / nu,
                -m + 0.0 * nu, -0.5 / np.square(nu) + 0.0 * m)


def _log_gamma_draw(shape, rate, rng, size=None):
    """log of a Ga(shape, rate) draw without underflow for small shapes.

    Uses G(a) = G(a + 1) * U**(1/a) on the log scale when a < 1.
    """
    g = nx.as_generator(rng)
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(~(shape > 0)) or np.any(~(rate > 0)):
        raise nx.InvalidParameterError("gamma shape and rate must be positive")
    small = shape < 1.0
    boost = np.where(small, shape + 1.0, shape)
    out = np.log(g.gamma(boost, 1.0, size)) - np.log(rate)
    if np.any(small):
        u = g.random(np.shape(out))
        out = out + np.where(small, np.log(u) / shape, 0.0)
    return out


class PoissonGamma(FamilyKind):
    tag, short = "PoissonGamma", "pg"
    v0, v1, v2 = 0.0, 1.0, 0.0

    def mean(self, eta):
        return np.exp(_eta_clip(eta))

    def theta_of_mean(self, mu):
        return np.log(mu)

    def psi(self, theta):
        return np.exp(theta)

    def counts(self, y, n):
        return _counts(y, n, upper=False)

    def log_f1(self, y, n, m, nu):
        z = np.round(y * n)
        a = nu * m
        return (log_rising(a, z) - gammaln(z + 1.0)
                + z * np.log(n / (n + nu)) - a * np.log1p(n / nu))

    def log_f2(self, y, n, m):
        z = np.round(y * n)
        lam = n * m
        return z * np.log(lam) - lam - gammaln(z + 1.0)

    def posterior(self, y, n, m, nu):
        """(shape, rate) of the gamma posterior of lambda = exp(theta)."""
        return np.round(y * n) + nu * m, n + nu

    def posterior_moments(self, y, n, m, nu):
        a, b = self.posterior(y, n, m, nu)
        return psi(a) - np.log(b), a / b

    def sample_posterior_theta(self, y, n, m, nu, rng, size=None):
        a, b = self.posterior(y, n, m, nu)
        return _log_gamma_draw(a, b, rng, size)

    def sample_prior_mean(self, m, nu, rng, size=None):
        nu = np.asarray(nu, dtype=float)
        return nx.sample(nx.Gamma(nu * m, nu), rng, size)

    def sample_observation(self, mu, n, rng, size=None):
        mu = np.asarray(mu, dtype=float)
        if np.any(mu < 0):
            raise ParameterError("Poisson mean must be nonnegative")
        n = np.asarray(n, dtype=float)
        return nx.sample(nx.Poisson(n * mu), rng, size) / n

    def prior_norm(self, nu, m):
        a = nu * m
        return a * np.log(nu) - gammaln(a)

    def prior_norm_derivs(self, nu, m):
        nu = np.asarray(nu, dtype=float)
        a = nu * m
        lognu = np.log(nu)
        d0, d1 = psi(a), trigamma(a)
        return (nu * lognu - nu * d0, -nu * nu * d1, m * (lognu + 1.0 - d0),
                lognu + 1.0 - d0 - a * d1, m / nu - m * m * d1)


class BinomialBeta(FamilyKind):
    tag, short = "BinomialBeta", "bb"
    v0, v1, v2 = 0.0, 1.0, -1.0

    def mean(self, eta):
        return np.clip(nx.expit(eta), MEAN_EPS, 1.0 - MEAN_EPS)

    def theta_of_mean(self, mu):
        return nx.logit(mu)

    def psi(self, theta):
        return np.logaddexp(0.0, theta)

    def counts(self, y, n):
        n = np.asarray(n, dtype=float)
        if np.any(np.abs(n - np.round(n)) > 1e-8 * n):
            raise DataError("binomial n must be an integer")
        return _counts(y, n, upper=True)

    @staticmethod
    def _log_choose(n, z):
        return gammaln(n + 1.0) - gammaln(z + 1.0) - gammaln(n - z + 1.0)

    def log_f1(self, y, n, m, nu):
        z = np.round(y * n)
        a, b = nu * m, nu * (1.0 - m)
        return (self._log_choose(n, z) + log_rising(a, z) + log_rising(b, n - z)
                - log_rising(nu, n))

    def log_f2(self, y, n, m):
        z = np.round(y * n)
        return self._log_choose(n, z) + z * np.log(m) + (n - z) * np.log1p(-m)

    def posterior(self, y, n, m, nu):
        """(a, b) of the beta posterior of the success probability."""
        z = np.round(y * n)
        return nu * m + z, n - z + nu * (1.0 - m)

    def posterior_moments(self, y, n, m, nu):
        a, b = self.posterior(y, n, m, nu)
        dab = psi(a + b)
        db = psi(b)
        return psi(a) - db, dab - db

    def sample_posterior_theta(self, y, n, m, nu, rng, size=None):
        a, b = self.posterior(y, n, m, nu)
        g = nx.as_generator(rng)
        # logit of a beta draw through two gammas keeps precision near 0 and 1
        ga = g.gamma(a, 1.0, size)
        gb = g.gamma(b, 1.0, size)
        return np.log(ga) - np.log(gb)

    def sample_prior_mean(self, m, nu, rng, size=None):
        nu = np.asarray(nu, dtype=float)
        return nx.sample(nx.Beta(nu * m, nu * (1.0 - m)), rng, size)

    def sample_observation(self, mu, n, rng, size=None):
        mu = np.asarray(mu, dtype=float)
        if np.any((mu < 0) | (mu > 1)):
            raise ParameterError("binomial mean must lie in [0, 1]")
        n = np.asarray(n, dtype=float)
        return nx.sample(nx.Binomial(np.round(n), mu), rng, size) / n

    def prior_norm(self, nu, m):
        return -betaln(nu * m, nu * (1.0 - m))

    def prior_norm_derivs(self, nu, m):
        nu = np.asarray(nu, dtype=float)
        a, b = nu * m, nu * (1.0 - m)
        pa, pb, pn = psi(a), psi(b), psi(nu)
        ta, tb, tn = trigamma(a), trigamma(b), trigamma(nu)
        c_m = -nu * (pa - pb)
        c_mm = -nu * nu * (ta + tb)
        c_nu = -(m * pa + (1.0 - m) * pb - pn)
        c_mnu = -(pa - pb) - nu * (m * ta - (1.0 - m) * tb)
        c_nunu = -(m * m * ta + (1.0 - m) ** 2 * tb - tn)
        return c_m, c_mm, c_nu, c_mnu, c_nunu


FAY_HERRIOT = FayHerriot()
POISSON_GAMMA = PoissonGamma()
BINOMIAL_BETA = BinomialBeta()

FAMILIES = {f.short: f for f in (FAY_HERRIOT, POISSON_GAMMA, BINOMIAL_BETA)}
FAMILIES.update({f.tag: f for f in (FAY_HERRIOT, POISSON_GAMMA, BINOMIAL_BETA)})


def get_family(name) -> FamilyKind:
    if isinstance(name, FamilyKind):
        return name
    try:
        return FAMILIES[name]
    except KeyError:
        key = str(name).lower()
        if key in FAMILIES:
            return FAMILIES[key]
        raise ParameterError(f"unknown family {name!r}; expected one of fh, pg, bb") from None


# ---------------------------------------------------------------------------
# Record-level operations
# ---------------------------------------------------------------------------


def _linear(x, params: ModelParams):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[-1] != params.beta.size:
        raise ParameterError(
            f"covariate dimension {x.shape[-1]} does not match beta dimension {params.beta.size}")
    return x @ params.beta


def synthetic_mean(x, params: ModelParams, kind: FamilyKind):
    """m = psi'(x'beta); scalar for a single covariate vector."""
    out = kind.mean(_linear(x, params))
    return float(out) if np.ndim(out) == 0 else out


def _prepare(rec, params, kind):
    kind.check_params(params)
    if isinstance(rec, AreaRecord):
        y, n, x = rec.y, rec.n, rec.x
    else:
        d = as_area_data(rec)
        y, n, x = d.y, d.n, d.X
    kind.validate(y, n)
    return np.asarray(y, dtype=float), np.asarray(n, dtype=float), kind.mean(_linear(x, params))


def _out(v):
    return float(v) if np.ndim(v) == 0 else v


def log_f1(rec, params: ModelParams, kind: FamilyKind):
    y, n, m = _prepare(rec, params, kind)
    return _out(kind.log_f1(y, n, m, params.nu))


def log_f2(rec, params: ModelParams, kind: FamilyKind):
    y, n, m = _prepare(rec, params, kind)
    return _out(kind.log_f2(y, n, m))


def posterior_params(rec, params: ModelParams, kind: FamilyKind):
    """Conjugate posterior given s = 1 as a numerics distribution.

    Fay-Herriot returns a Normal on theta, Poisson-gamma a Gamma on
    lambda = exp(theta) and binomial-beta a Beta on the success probability.
    """
    y, n, m = _prepare(rec, params, kind)
    a, b = kind.posterior(y, n, m, params.nu)
    if isinstance(kind, FayHerriot):
        return nx.Normal(_out(a), _out(np.sqrt(b)))
    if isinstance(kind, PoissonGamma):
        return nx.Gamma(_out(a), _out(b))
    return nx.Beta(_out(a), _out(b))


def posterior_moments(rec, params: ModelParams, kind: FamilyKind):
    y, n, m = _prepare(rec, params, kind)
    t, p = kind.posterior_moments(y, n, m, params.nu)
    return _out(t), _out(p)


def sample_posterior_theta(rec, params: ModelParams, kind: FamilyKind, rng, size=None):
    y, n, m = _prepare(rec, params, kind)
    return kind.sample_posterior_theta(y, n, m, params.nu, rng, size)


def sample_observation(mu, n, kind: FamilyKind, rng, size=None):
    return kind.sample_observation(mu, n, rng, size)


def sample_latent(x, params: ModelParams, kind: FamilyKind, rng) -> LatentState:
    """Draw (s, theta, mu) for one area from the uncertain prior."""
    g = nx.as_generator(rng)
    m = synthetic_mean(x, params, kind)
    s = int(g.random() < params.p)
    mu = float(kind.sample_prior_mean(m, params.nu, g)) if s else m
    return LatentState(s, float(kind.theta_of_mean(mu)), mu)
