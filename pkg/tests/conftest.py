"""Shared fixtures and the independent enumeration oracle used across tests.

The brute-force oracle below enumerates the full joint support of the
two-point process and computes every bound as the variance of the relevant
influence function.  That is a different route than the closed-form integrand
used by the library, so agreement is a genuine cross-check.
"""

from __future__ import annotations

import numpy as np
import pytest

from auxgmm.data import Case
from auxgmm.moments import mean_moment
from auxgmm.propensity import LinearFamily, LogitFamily
from auxgmm.sieve import BasisKind, BasisSpec
from auxgmm.simulate import DGP_A, generate


@pytest.fixture(scope="session")
def mean_model():
    return mean_moment()


@pytest.fixture(scope="session")
def saturated_basis():
    # x and 1(x = 1) coincide on {0, 1}, so a linear power basis is saturated
    return BasisSpec(kind=BasisKind.POWER, degree=1)


@pytest.fixture(scope="session")
def one_param_family():
    return LinearFamily(design=lambda x: (1.0 + x[:, :1]), d_gamma=1)


@pytest.fixture(scope="session")
def saturated_family():
    return LogitFamily(cols=(0,), intercept=True)


@pytest.fixture(scope="session")
def dgp_a_out():
    return generate(DGP_A, 20000, seed=101, case=Case.VERIFY_OUT)


@pytest.fixture(scope="session")
def dgp_a_in():
    return generate(DGP_A.with_case(Case.VERIFY_IN), 20000, seed=102)


def enumerate_two_point(p_fn=None):
    """Full joint support of the two-point process: (prob, x, y, d) tuples."""
    levels = [0.0, 1.0]
    y_table = {0.0: [0.0, 1.0], 1.0: [1.0, 2.0]}
    p_of = p_fn or (lambda x: 0.25 * (1.0 + x))
    rows = []
    for x in levels:
        for y in y_table[x]:
            for d in (0, 1):
                pr = 0.5 * 0.5 * (p_of(x) if d == 1 else 1.0 - p_of(x))
                rows.append((pr, x, y, d))
    assert abs(sum(r[0] for r in rows) - 1.0) < 1e-15
    return rows


def brute_force_bounds(case: Case, p_fn=None, family=None):
    """Bounds as variances of enumerated influence functions (mean model).

    Returns a dict with beta0, p, and the applicable bound values; the
    parametric-family bound is the variance of the three-term influence with
    the population least-squares projection on the score.
    """
    rows = enumerate_two_point(p_fn)
    p_of = p_fn or (lambda x: 0.25 * (1.0 + x))
    p = sum(pr for pr, x, y, d in rows if d == 1)

    if case is Case.VERIFY_OUT:
        beta0 = sum(pr * y for pr, x, y, d in rows if d == 1) / p
    else:
        beta0 = sum(pr * y for pr, x, y, d in rows)

    def cond_mean(x):
        sub = [(pr, y) for pr, xx, y, d in rows if xx == x]
        tot = sum(pr for pr, _ in sub)
        return sum(pr * y for pr, y in sub) / tot

    def var_of(influence):
        mean = sum(pr * influence(x, y, d) for pr, x, y, d in rows)
        return sum(pr * (influence(x, y, d) - mean) ** 2 for pr, x, y, d in rows)

    def e_at(x):
        return cond_mean(x) - beta0

    def f_out(x, y, d):
        m = y - beta0
        return d * e_at(x) / p + (1 - d) * p_of(x) / (p * (1 - p_of(x))) * (m - e_at(x))

    def f_in(x, y, d):
        m = y - beta0
        return e_at(x) + (1 - d) / (1 - p_of(x)) * (m - e_at(x))

    def f_out_known(x, y, d):
        m = y - beta0
        return (1 - d) / p * p_of(x) / (1 - p_of(x)) * (m - e_at(x)) + e_at(x) * p_of(x) / p

    out = {"beta0": beta0, "p": p,
           "omega1": var_of(f_out), "omega2": var_of(f_in),
           "omega1_known": var_of(f_out_known)}

    if family is not None:
        levels = np.array([[0.0], [1.0]])
        gamma0 = np.array(family.init_gamma(levels, np.array([p_of(0.0), p_of(1.0)])))
        # population MLE must reproduce the truth for these correctly
        # specified families; refine by one-dimensional search if needed
        from scipy.optimize import minimize

        def neg_expected_loglik(g):
            total = 0.0
            for pr, x, y, d in rows:
                pv = float(np.clip(family.value(np.array([[x]]), g), 1e-12, 1 - 1e-12)[0])
                total += pr * (d * np.log(pv) + (1 - d) * np.log(1 - pv))
            return -total

        res = minimize(neg_expected_loglik, gamma0, method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 5000})
        gamma0 = res.x

        def pgrad(x):
            return family.grad(np.array([[x]]), gamma0)[0]

        def score(x, d):
            pv = float(family.value(np.array([[x]]), gamma0)[0])
            return (d - pv) / (pv * (1 - pv)) * pgrad(x)

        info = sum(pr * np.outer(score(x, d), score(x, d)) for pr, x, y, d in rows)
        c = sum(pr * e_at(x) * pgrad(x) for pr, x, y, d in rows) / p
        coef = np.linalg.solve(info, c)

        def f_param(x, y, d):
            m = y - beta0
            proj = float(coef @ score(x, d))
            return ((1 - d) * p_of(x) / (p * (1 - p_of(x))) * (m - e_at(x))
                    + proj + p_of(x) * e_at(x) / p)

        out["omega_param"] = var_of(f_param)
    return out
