"""Selection-probability models p(x) = Pr(d = 1 | x), fit four ways.

Methods: a user-supplied known function, maximum likelihood in a parametric
family (logistic by default, arbitrary families supported through
:class:`ParametricFamily`), series least squares of d on a basis over the
pooled sample, and a logistic fit with a series linear index.
"""

from __future__ import annotations

import enum
import warnings
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import FitDiverged, SeparationWarning, SingularInformation
from .sieve import BasisSpec, ProjectionFit, SieveBasis, build_basis, predict_many, sieve_ls_fit

_P_FLOOR = 1e-9
_INDEX_CAP = 30.0


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t, dtype=float)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class ParametricFamily:
    """A parametric selection-probability family with analytic gradient.

    Subclasses provide value(X, gamma) -> (n,) probabilities and
    grad(X, gamma) -> (n, d_gamma) partial derivatives in gamma.
    """

    d_gamma: int

    def value(self, x: np.ndarray, gamma: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray, gamma: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def init_gamma(self, x: np.ndarray, d: np.ndarray) -> np.ndarray:
        return np.zeros(self.d_gamma)


def _linear_design(cols: tuple[int, ...] | None, intercept: bool):
    def _make(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        use = range(x.shape[1]) if cols is None else cols
        parts = ([np.ones((x.shape[0], 1))] if intercept else []) + [x[:, [c]] for c in use]
        return np.column_stack(parts)

    return _make


class LogitFamily(ParametricFamily):
    """p(x; gamma) = logistic(a(x)' gamma) for a linear design a(x)."""

    def __init__(self, design: Callable[[np.ndarray], np.ndarray] | None = None,
                 cols: tuple[int, ...] | None = None, intercept: bool = True,
                 d_gamma: int | None = None):
        self.design = design if design is not None else _linear_design(cols, intercept)
        if d_gamma is not None:
            self.d_gamma = d_gamma
        elif design is None and cols is not None:
            self.d_gamma = len(cols) + (1 if intercept else 0)
        else:
            self.d_gamma = None  # resolved on first evaluation

    def _resolve_d_gamma(self, x: np.ndarray) -> int:
        if self.d_gamma is None:
            self.d_gamma = self.design(np.atleast_2d(x)[:1]).shape[1]
        return self.d_gamma

    def value(self, x, gamma):
        self._resolve_d_gamma(x)
        return _sigmoid(self.design(x) @ gamma)

    def grad(self, x, gamma):
        p = self.value(x, gamma)
        return (p * (1.0 - p))[:, None] * self.design(x)

    def init_gamma(self, x, d):
        return np.zeros(self._resolve_d_gamma(x))


class LinearFamily(ParametricFamily):
    """p(x; gamma) = a(x)' gamma; the gradient in gamma is the design itself."""

    def __init__(self, design: Callable[[np.ndarray], np.ndarray], d_gamma: int):
        self.design = design
        self.d_gamma = d_gamma

    def value(self, x, gamma):
        return self.design(x) @ gamma

    def grad(self, x, gamma):
        return self.design(x)

    def init_gamma(self, x, d):
        a = self.design(x)
        coef, *_ = np.linalg.lstsq(a, np.asarray(d, dtype=float), rcond=None)
        return coef


class PropensityKind(enum.Enum):
    KNOWN = "known"
    PARAMETRIC = "parametric"
    SIEVE_LS = "sieve-ls"
    SIEVE_LOGIT = "sieve-logit"


@dataclass(frozen=True)
class PropensityModel:
    """Fitted (or known) selection-probability function with a clipping policy.

    Raw values are clipped into [clip, 1 - clip] at evaluation time; series
    least-squares fits can leave [0, 1], logistic fits cannot.
    """

    kind: PropensityKind
    clip: float = 0.01
    params: np.ndarray | None = None
    basis: SieveBasis | None = None
    fit: ProjectionFit | None = None
    family: ParametricFamily | None = None
    known_fn: Callable[[np.ndarray], np.ndarray] | None = None
    converged: bool = True

    def raw_values(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind is PropensityKind.KNOWN:
            return np.asarray(self.known_fn(x), dtype=float).reshape(-1)
        if self.kind is PropensityKind.PARAMETRIC:
            return self.family.value(x, self.params)
        if self.kind is PropensityKind.SIEVE_LS:
            return predict_many(self.fit, x)[:, 0]
        return _sigmoid(self.basis.design_matrix(x) @ self.params)


def propensity_values(model: PropensityModel, x: np.ndarray) -> tuple[np.ndarray, int]:
    """Clipped probabilities on the rows of x plus the number of clipped rows."""
    raw = model.raw_values(x)
    lo, hi = model.clip, 1.0 - model.clip
    clipped = int(((raw < lo) | (raw > hi)).sum())
    return np.clip(raw, lo, hi), clipped


def propensity_at(model: PropensityModel, x: np.ndarray) -> float:
    """Clipped probability at a single point."""
    values, _ = propensity_values(model, np.asarray(x, dtype=float).reshape(1, -1))
    return float(values[0])


def _mle_parametric(family: ParametricFamily, x: np.ndarray, d: np.ndarray,
                    max_iter: int = 200, tol: float = 1e-12) -> tuple[np.ndarray, bool]:
    """Damped Fisher-scoring MLE of the binary likelihood in the given family.

    Probabilities are floored away from {0, 1} inside the likelihood so that
    families whose raw values can leave (0, 1) (e.g. linear) stay evaluable.
    """
    d = np.asarray(d, dtype=float)
    n = d.shape[0]
    gamma = np.asarray(family.init_gamma(x, d), dtype=float)

    def loglik(g):
        p = np.clip(family.value(x, g), _P_FLOOR, 1.0 - _P_FLOOR)
        return float(np.sum(d * np.log(p) + (1.0 - d) * np.log(1.0 - p)))

    current = loglik(gamma)
    for _ in range(max_iter):
        p = np.clip(family.value(x, gamma), _P_FLOOR, 1.0 - _P_FLOOR)
        pg = family.grad(x, gamma)
        w = p * (1.0 - p)
        score = pg.T @ ((d - p) / w) / n
        if np.linalg.norm(score, np.inf) < tol:
            return gamma, True
        info = (pg / w[:, None]).T @ pg / n
        try:
            direction = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            direction = np.linalg.lstsq(info, score, rcond=None)[0]
        step = 1.0
        for _ in range(50):
            cand = gamma + step * direction
            value = loglik(cand)
            if value >= current - 1e-14 * abs(current):
                gamma, current = cand, value
                break
            step *= 0.5
        else:  # no ascent direction left; treat the point as converged enough
            break
    p = np.clip(family.value(x, gamma), _P_FLOOR, 1.0 - _P_FLOOR)
    pg = family.grad(x, gamma)
    score = pg.T @ ((d - p) / (p * (1.0 - p))) / n
    if np.linalg.norm(score, np.inf) < 1e-8:
        return gamma, True
    raise FitDiverged("parametric selection-probability fit did not converge")


def _check_separation(index_like: np.ndarray) -> None:
    if np.max(np.abs(index_like)) > _INDEX_CAP:
        warnings.warn("fitted linear index exceeds +-30: quasi-separation, "
                      "probabilities will be clipped", SeparationWarning, stacklevel=3)


def fit_propensity(method: PropensityKind | str, ds: Dataset,
                   spec: BasisSpec | ParametricFamily | Callable | None = None,
                   clip: float = 0.01,
                   basis: SieveBasis | None = None) -> PropensityModel:
    """Fit Pr(d = 1 | x) on the pooled sample.

    Parameters
    ----------
    method : PropensityKind or str
        "known" (spec is the probability function), "parametric" (spec is a
        ParametricFamily; plain logit on all x columns when omitted),
        "sieve-ls" or "sieve-logit" (spec is a BasisSpec, or pass ``basis``).
    """
    method = PropensityKind(method) if isinstance(method, str) else method
    x, d = ds.x, ds.d.astype(float)

    if method is PropensityKind.KNOWN:
        if not callable(spec):
            raise ValueError("known method needs a probability function of x")
        return PropensityModel(kind=method, clip=clip, known_fn=spec)

    if method is PropensityKind.PARAMETRIC:
        family = spec if isinstance(spec, ParametricFamily) else LogitFamily()
        gamma, ok = _mle_parametric(family, x, d)
        if isinstance(family, LogitFamily):
            _check_separation(family.design(x) @ gamma)
        return PropensityModel(kind=method, clip=clip, params=gamma,
                               family=family, converged=ok)

    if basis is None:
        bspec = spec if isinstance(spec, BasisSpec) else BasisSpec()
        basis = build_basis(bspec, x)

    if method is PropensityKind.SIEVE_LS:
        fit = sieve_ls_fit(basis, x, d[:, None])
        return PropensityModel(kind=method, clip=clip, basis=basis, fit=fit)

    if method is PropensityKind.SIEVE_LOGIT:
        family = LogitFamily(design=basis.design_matrix, d_gamma=basis.k_n)
        gamma, ok = _mle_parametric(family, x, d)
        _check_separation(basis.design_matrix(x) @ gamma)
        return PropensityModel(kind=method, clip=clip, basis=basis, params=gamma, converged=ok)

    raise ValueError(f"unknown method {method!r}")


@dataclass(frozen=True)
class ScoreInfo:
    """Per-row likelihood scores for gamma plus their outer-product average.

    ``scores`` holds (d_i - p_i) / (p_i (1 - p_i)) times the family gradient,
    ``pgrad`` the family gradient itself (needed by the parametric-family
    variance correction), and ``information`` the sample mean of score outer
    products.
    """

    scores: np.ndarray        # (n, d_gamma)
    pgrad: np.ndarray         # (n, d_gamma)
    information: np.ndarray   # (d_gamma, d_gamma)


def score_info(model: PropensityModel, ds: Dataset) -> ScoreInfo:
    """Scores and information of the parametric selection-probability fit."""
    if model.kind is not PropensityKind.PARAMETRIC:
        raise ValueError("score_info is defined for parametric models only")
    x, d = ds.x, ds.d.astype(float)
    p = np.clip(model.family.value(x, model.params), _P_FLOOR, 1.0 - _P_FLOOR)
    pg = model.family.grad(x, model.params)
    scores = ((d - p) / (p * (1.0 - p)))[:, None] * pg
    information = scores.T @ scores / ds.n
    eigvals = np.linalg.eigvalsh(information)
    if eigvals.min() <= 1e-10:
        raise SingularInformation("score information matrix is not positive definite")
    return ScoreInfo(scores=scores, pgrad=pg, information=information)
