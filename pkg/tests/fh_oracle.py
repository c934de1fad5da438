"""Fay-Herriot reference derivatives used as oracles for the finite-difference stencils.

The gradient of mu_tilde is written out by hand.  Second derivatives come
from mpmath at 40 digits, whose extrapolated differences are exact far
below double precision.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np


def _expit(t):
    return 1.0 / (1.0 + math.exp(-t))


def mu_tilde_grad(y, n, x, phi):
    """Closed-form gradient of mu_tilde for the FH model at phi = (beta, nu, p)."""
    x = np.asarray(x, dtype=float)
    q = x.size
    beta, nu, p = np.asarray(phi[:q]), float(phi[q]), float(phi[q + 1])
    m = float(x @ beta)
    e = y - m
    V1 = 1.0 / nu + 1.0 / n
    lf1 = -0.5 * (math.log(2 * math.pi) + math.log(V1) + e * e / V1)
    lf2 = -0.5 * (math.log(2 * math.pi) - math.log(n) + n * e * e)
    L = math.log(p) - math.log1p(-p) - (lf2 - lf1)
    r = _expit(L)
    w = n / (n + nu)
    dL_dbeta = -(n * e - e / V1) * x
    dL_dnu = -0.5 * (1.0 / V1 - e * e / V1 ** 2) * (-1.0 / nu ** 2)
    dL_dp = 1.0 / (p * (1.0 - p))
    rr = r * (1.0 - r)
    g = np.empty(q + 2)
    g[:q] = x - w * x * r + w * e * rr * dL_dbeta
    g[q] = -n / (n + nu) ** 2 * e * r + w * e * rr * dL_dnu
    g[q + 1] = w * e * rr * dL_dp
    return g


def _mp_parts(y, n, x, phi):
    q = len(x)
    beta = phi[:q]
    nu, p = phi[q], phi[q + 1]
    m = mpmath.fsum(mpmath.mpf(xi) * b for xi, b in zip(x, beta))
    e = mpmath.mpf(y) - m
    n = mpmath.mpf(n)
    V1 = 1 / nu + 1 / n
    lf1 = -(mpmath.log(2 * mpmath.pi) + mpmath.log(V1) + e * e / V1) / 2
    lf2 = -(mpmath.log(2 * mpmath.pi) - mpmath.log(n) + n * e * e) / 2
    r = 1 / (1 + (1 - p) / p * mpmath.exp(lf2 - lf1))
    w = n / (n + nu)
    return m, e, r, w, nu, n


def mp_mu_tilde(y, n, x, phi):
    m, e, r, w, _, _ = _mp_parts(y, n, x, phi)
    return m + w * e * r


def mp_r1(y, n, x, phi):
    m, e, r, w, nu, n = _mp_parts(y, n, x, phi)
    return w * w * e * e * r * (1 - r) + r / (n + nu)


def mp_loglik(y, n, x, phi):
    q = len(x)
    m, e, r, w, nu, n = _mp_parts(y, n, x, phi)
    p = phi[q + 1]
    V1 = 1 / nu + 1 / n
    f1 = mpmath.exp(-(e * e / V1) / 2) / mpmath.sqrt(2 * mpmath.pi * V1)
    f2 = mpmath.exp(-(n * e * e) / 2) * mpmath.sqrt(n / (2 * mpmath.pi))
    return mpmath.log(p * f1 + (1 - p) * f2)


def mp_grad(fn, y, n, x, phi, dps=40):
    with mpmath.workdps(dps):
        at = [mpmath.mpf(float(v)) for v in phi]
        out = []
        for j in range(len(at)):
            def f(t, j=j):
                a = list(at)
                a[j] = t
                return fn(y, n, x, a)
            out.append(float(mpmath.diff(f, at[j])))
    return np.array(out)


def mp_hess(fn, y, n, x, phi, dps=40):
    with mpmath.workdps(dps):
        at = [mpmath.mpf(float(v)) for v in phi]
        k = len(at)
        H = np.empty((k, k))
        for j in range(k):
            for l in range(j, k):
                def f(*t, j=j, l=l):
                    a = list(at)
                    a[j] = t[0]
                    if l != j:
                        a[l] = t[1]
                    return fn(y, n, x, a)
                if j == l:
                    v = mpmath.diff(f, at[j], 2)
                else:
                    v = mpmath.diff(f, (at[j], at[l]), (1, 1))
                H[j, l] = H[l, j] = float(v)
    return H


def random_instance(g):
    """(y, n, x, phi) for a two-covariate FH area away from the parameter boundary."""
    x = np.array([1.0, g.normal()])
    phi = np.array([g.normal(0, 0.5), g.normal(0, 0.5), g.uniform(0.5, 5.0), g.uniform(0.15, 0.85)])
    n = g.uniform(0.5, 5.0)
    m = x @ phi[:2]
    y = m + g.normal(0, 1.0) * math.sqrt(1 / phi[2] + 1 / n)
    return y, n, x, phi
