"""Moment-function abstraction m(z; beta) and Jacobians of averaged moments.

Built-in models cover the common estimands: distribution function values at
fixed thresholds, means, and linear regression coefficients.  Custom models
plug in through the same :class:`MomentModel` record; batch evaluators are
optional but make the estimators much faster.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, MissingOutcome, RankDeficient

_BIG = 1.0e6


def _default_box(d_beta: int) -> np.ndarray:
    return np.array([[-_BIG] * d_beta, [_BIG] * d_beta])


@dataclass(frozen=True)
class MomentModel:
    """A set of d_m moment functions of (z, beta) with d_m >= d_beta.

    ``eval`` takes z = (y, x) with 1-d arrays and returns a length-d_m vector.
    Location-form models (m = g(z) - beta) expose ``loc_g_batch`` so that all
    estimators can reuse a single projection of g and solve for beta in closed
    form.  ``eval_batch``/``jac_batch`` operate on (n, d_y) and (n, d_x) blocks.
    """

    name: str
    d_m: int
    d_beta: int
    smooth: bool
    eval: Callable[[tuple, np.ndarray], np.ndarray]
    eval_batch: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    analytic_jac: Callable[[tuple, np.ndarray], np.ndarray] | None = None
    jac_batch: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None
    loc_g_batch: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    default_init: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    beta_box: np.ndarray = field(default=None)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d_m < self.d_beta:
            raise ValueError("need d_m >= d_beta")
        box = self.beta_box if self.beta_box is not None else _default_box(self.d_beta)
        box = np.asarray(box, dtype=float).reshape(2, self.d_beta)
        object.__setattr__(self, "beta_box", box)

    @property
    def location_form(self) -> bool:
        return self.loc_g_batch is not None

    def check_beta(self, beta: np.ndarray) -> np.ndarray:
        beta = np.asarray(beta, dtype=float).reshape(-1)
        if beta.shape[0] != self.d_beta:
            raise DomainError(f"beta must have length {self.d_beta}")
        if (beta < self.beta_box[0]).any() or (beta > self.beta_box[1]).any():
            raise DomainError("beta outside its admissible box")
        return beta


def eval_moment(model: MomentModel, z: tuple, beta: np.ndarray) -> np.ndarray:
    """Evaluate m(z; beta) for a single observation z = (y, x)."""
    beta = model.check_beta(beta)
    y = z[0] if isinstance(z, tuple) else z.y
    if y is None or not np.isfinite(np.asarray(y, dtype=float)).all():
        raise MissingOutcome("moment evaluation needs an observed outcome")
    return model.eval(z if isinstance(z, tuple) else (z.y, z.x), beta)


def cdf_moment(thresholds) -> MomentModel:
    """m_j(z; beta) = 1(y <= tau_j) - beta_j, one coordinate per threshold."""
    taus = np.sort(np.asarray(thresholds, dtype=float).reshape(-1))
    d = taus.size

    def _g_batch(y, x):
        return (y[:, :1] <= taus[None, :]).astype(float)

    def _eval_batch(y, x, beta):
        return _g_batch(y, x) - beta[None, :]

    def _eval(z, beta):
        y, _ = z
        return (float(np.asarray(y).reshape(-1)[0]) <= taus).astype(float) - beta

    return MomentModel(
        name="cdf", d_m=d, d_beta=d, smooth=False,
        eval=_eval, eval_batch=_eval_batch, loc_g_batch=_g_batch,
        beta_box=np.array([[0.0] * d, [1.0] * d]),
        params={"thresholds": tuple(float(t) for t in taus)},
    )


def mean_moment(d_y: int = 1) -> MomentModel:
    """m(z; beta) = y - beta."""

    def _g_batch(y, x):
        return y[:, :d_y]

    def _eval_batch(y, x, beta):
        return y[:, :d_y] - beta[None, :]

    def _eval(z, beta):
        y, _ = z
        return np.asarray(y, dtype=float).reshape(-1)[:d_y] - beta

    return MomentModel(
        name="mean", d_m=d_y, d_beta=d_y, smooth=True,
        eval=_eval, eval_batch=_eval_batch, loc_g_batch=_g_batch,
    )


def linreg_moment(regressors: tuple[int, ...], intercept: bool = True) -> MomentModel:
    """Least-squares score m = x~ (y - x~' beta) for a regressor sub-vector x~."""
    cols = tuple(int(c) for c in regressors)
    d = len(cols) + (1 if intercept else 0)

    def _design(x):
        x = np.atleast_2d(x)
        parts = ([np.ones((x.shape[0], 1))] if intercept else []) + [x[:, [c]] for c in cols]
        return np.column_stack(parts)

    def _eval_batch(y, x, beta):
        xt = _design(x)
        resid = y[:, 0] - xt @ beta
        return xt * resid[:, None]

    def _eval(z, beta):
        y, x = z
        xt = _design(np.asarray(x, dtype=float).reshape(1, -1))[0]
        return xt * (float(np.asarray(y).reshape(-1)[0]) - xt @ beta)

    def _jac_batch(y, x, beta):
        xt = _design(x)
        return -xt[:, :, None] * xt[:, None, :]

    def _jac(z, beta):
        _, x = z
        xt = _design(np.asarray(x, dtype=float).reshape(1, -1))[0]
        return -np.outer(xt, xt)

    def _init(y, x):
        coef, *_ = np.linalg.lstsq(_design(x), y[:, 0], rcond=None)
        return coef

    return MomentModel(
        name="linreg", d_m=d, d_beta=d, smooth=True,
        eval=_eval, eval_batch=_eval_batch,
        analytic_jac=_jac, jac_batch=_jac_batch, default_init=_init,
    )


@dataclass(frozen=True)
class JacobianEstimate:
    matrix: np.ndarray
    method: str  # "analytic" | "central-difference"

    def require_full_rank(self) -> "JacobianEstimate":
        s = np.linalg.svd(self.matrix, compute_uv=False)
        if s.size == 0 or s[-1] < 1e-8 * s[0]:
            raise RankDeficient("moment Jacobian is numerically rank deficient")
        return self


def moment_jacobian(
    model: MomentModel,
    averaged_moment: Callable[[np.ndarray], np.ndarray],
    beta: np.ndarray,
    step: float | None = None,
    averaged_jac: Callable[[np.ndarray], np.ndarray] | None = None,
) -> JacobianEstimate:
    """Jacobian of an averaged (sample) moment at beta.

    Location-form models have derivative exactly -I.  When the caller supplies
    ``averaged_jac`` (the same linear averaging applied to per-observation
    analytic Jacobians) it is used directly; otherwise central differences with
    per-coordinate step h_k = step * max(1, |beta_k|) are applied to
    ``averaged_moment``.
    """
    beta = model.check_beta(beta)
    if model.location_form:
        return JacobianEstimate(-np.eye(model.d_beta), "analytic").require_full_rank()
    if averaged_jac is not None:
        return JacobianEstimate(np.asarray(averaged_jac(beta), dtype=float), "analytic").require_full_rank()
    if step is None:
        step = 1e-5
    jac = np.empty((model.d_m, model.d_beta))
    for k in range(model.d_beta):
        h = step * max(1.0, abs(beta[k]))
        lo, hi = model.beta_box[0, k], model.beta_box[1, k]
        if beta[k] - h < lo or beta[k] + h > hi:
            raise DomainError("beta must be interior to its box by at least one step")
        up = beta.copy()
        dn = beta.copy()
        up[k] += h
        dn[k] -= h
        jac[:, k] = (np.asarray(averaged_moment(up)) - np.asarray(averaged_moment(dn))) / (2 * h)
    return JacobianEstimate(jac, "central-difference").require_full_rank()


BUILTIN_MOMENTS = {"cdf": cdf_moment, "mean": mean_moment, "linreg": linreg_moment}


def moment_from_config(cfg: dict) -> MomentModel:
    """Build a built-in moment model from a config mapping."""
    kind = cfg.get("kind")
    if kind == "cdf":
        return cdf_moment(cfg["thresholds"])
    if kind == "mean":
        return mean_moment(int(cfg.get("d_y", 1)))
    if kind == "linreg":
        return linreg_moment(tuple(cfg.get("regressors", ())), bool(cfg.get("intercept", True)))
    raise ValueError(f"unknown moment kind {kind!r}; expected one of {sorted(BUILTIN_MOMENTS)}")
