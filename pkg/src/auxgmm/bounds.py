"""Variance lower bounds, per-observation influence values, and sandwiches.

Four bound matrices are supported, distinguished by the study design and by
what is known about the selection probability p(x):

- ``out-unknown-p``   independent auxiliary sample, p(x) fully unknown;
- ``in-sample``       validated subset; knowledge of p(x) does not matter;
- ``out-known-p``     independent auxiliary sample, p(x) known;
- ``out-parametric-p`` independent auxiliary sample, p(x) in a correctly
  specified parametric family (known-p bound plus a score-projection term).

Every plug-in averages its integrand over the pooled n rows, with conditional
means/variances of the moment supplied by a :class:`CondMomentFit` (series
fits on the auxiliary sample) or by an exact source in tests.
"""

from __future__ import annotations

import enum
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import SingularBread
from .moments import MomentModel
from .propensity import PropensityModel, ScoreInfo, propensity_values
from .sieve import SieveBasis, predict_many, sieve_ls_fit


def invert_psd(mat: np.ndarray, rel_cutoff: float = 1e-12) -> tuple[np.ndarray, bool]:
    """Invert a symmetric PSD matrix via eigendecomposition.

    Eigenvalues below ``rel_cutoff`` times the largest are dropped
    (pseudo-inverse); the second return value flags that fallback.
    """
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    eigvals, eigvecs = np.linalg.eigh((mat + mat.T) / 2.0)
    top = float(eigvals.max(initial=0.0))
    keep = eigvals > rel_cutoff * max(top, np.finfo(float).tiny)
    if not keep.any():
        raise SingularBread("matrix has no usable eigenvalues")
    inv_vals = np.where(keep, 1.0 / np.where(keep, eigvals, 1.0), 0.0)
    inverse = (eigvecs * inv_vals[None, :]) @ eigvecs.T
    return inverse, bool((~keep).any())


class BoundKind(enum.Enum):
    OUT_UNKNOWN = "out-unknown-p"
    IN_SAMPLE = "in-sample"
    OUT_KNOWN = "out-known-p"
    OUT_PARAMETRIC = "out-parametric-p"


class InfluenceKind(enum.Enum):
    CEP_OUT = "cep-out"
    CEP_IN = "cep-in"
    IPW_OUT = "ipw-out"
    EFF_OUT = "eff-out"
    EFF_IN = "eff-in"
    EFF_OUT_KNOWN = "eff-out-known"
    EFF_OUT_PARAMETRIC = "eff-out-parametric"


def _vech_indices(d: int):
    return np.triu_indices(d)


@dataclass
class CondMomentFit:
    """Series fits of E[m | x] and E[m m' | x] on the auxiliary sample.

    The conditional variance V(x) = E[mm'|x] - E[m|x]E[m|x]' is assembled at
    evaluation time, symmetrized, and eigenvalue-floored at zero (finite-sample
    series differences can be indefinite); floored rows are counted.
    """

    moment: MomentModel
    beta_at: np.ndarray
    mean_fit: object
    second_fit: object

    def means(self, x: np.ndarray) -> np.ndarray:
        return predict_many(self.mean_fit, x)

    def variances(self, x: np.ndarray) -> np.ndarray:
        return self.variances_with_diagnostics(x)[0]

    def variances_with_diagnostics(self, x: np.ndarray) -> tuple[np.ndarray, int]:
        d = self.moment.d_m
        e_hat = self.means(x)
        vech = predict_many(self.second_fit, x)
        n = x.shape[0]
        second = np.zeros((n, d, d))
        rows, cols = _vech_indices(d)
        second[:, rows, cols] = vech
        second[:, cols, rows] = vech
        v = second - e_hat[:, :, None] * e_hat[:, None, :]
        v = (v + np.swapaxes(v, 1, 2)) / 2.0
        if d == 1:
            floored = int((v[:, 0, 0] < 0).sum())
            return np.maximum(v, 0.0), floored
        eigvals, eigvecs = np.linalg.eigh(v)
        floored = int((eigvals < 0).any(axis=1).sum())
        if floored:
            eigvals = np.maximum(eigvals, 0.0)
            v = eigvecs @ (eigvals[:, :, None] * np.swapaxes(eigvecs, 1, 2))
        return v, floored

    def moment_values(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.moment.eval_batch(y, x, self.beta_at)


@dataclass
class ExactCondMoments:
    """Conditional-moment source backed by closed-form functions (oracle tests)."""

    moment: MomentModel
    beta_at: np.ndarray
    mean_fn: Callable[[np.ndarray], np.ndarray]
    var_fn: Callable[[np.ndarray], np.ndarray]

    def means(self, x):
        return np.atleast_2d(self.mean_fn(np.atleast_2d(x)))

    def variances(self, x):
        return self.var_fn(np.atleast_2d(x))

    def variances_with_diagnostics(self, x):
        return self.variances(x), 0

    def moment_values(self, y, x):
        return self.moment.eval_batch(y, x, self.beta_at)


def fit_cond_moments(moment: MomentModel, beta: np.ndarray, aux_y: np.ndarray,
                     aux_x: np.ndarray, basis: SieveBasis) -> CondMomentFit:
    """Two series least-squares fits: the moment itself and its outer products."""
    beta = moment.check_beta(beta)
    m = moment.eval_batch(aux_y, aux_x, beta)
    rows, cols = _vech_indices(moment.d_m)
    second_targets = m[:, rows] * m[:, cols]
    return CondMomentFit(
        moment=moment,
        beta_at=beta,
        mean_fit=sieve_ls_fit(basis, aux_x, m),
        second_fit=sieve_ls_fit(basis, aux_x, second_targets),
    )


def _pooled_inputs(cm, pmodel: PropensityModel, ds: Dataset):
    e_hat = cm.means(ds.x)
    v_hat = cm.variances(ds.x)
    p_tilde, _ = propensity_values(pmodel, ds.x)
    return e_hat, v_hat, p_tilde


def estimate_omega(kind: BoundKind, cm, pmodel: PropensityModel, phat: float,
                   ds: Dataset, score: ScoreInfo | None = None) -> np.ndarray:
    """Plug-in estimate of the requested bound matrix, averaged over all rows."""
    kind = BoundKind(kind) if isinstance(kind, str) else kind
    e_hat, v_hat, p_tilde = _pooled_inputs(cm, pmodel, ds)
    ee = e_hat[:, :, None] * e_hat[:, None, :]

    if kind is BoundKind.OUT_UNKNOWN:
        wv = p_tilde ** 2 / (phat ** 2 * (1.0 - p_tilde))
        we = p_tilde / phat ** 2
    elif kind is BoundKind.IN_SAMPLE:
        wv = 1.0 / (1.0 - p_tilde)
        we = np.ones_like(p_tilde)
    elif kind in (BoundKind.OUT_KNOWN, BoundKind.OUT_PARAMETRIC):
        wv = p_tilde ** 2 / (phat ** 2 * (1.0 - p_tilde))
        we = p_tilde ** 2 / phat ** 2
    else:  # pragma: no cover
        raise ValueError(kind)

    omega = (wv[:, None, None] * v_hat + we[:, None, None] * ee).mean(axis=0)
    if kind is BoundKind.OUT_PARAMETRIC:
        if score is None:
            raise ValueError("parametric bound needs a ScoreInfo")
        c = (e_hat[:, :, None] * score.pgrad[:, None, :]).mean(axis=0) / phat
        info_inv, _ = invert_psd(score.information)
        omega = omega + c @ info_inv @ c.T
    return (omega + omega.T) / 2.0


def efficiency_bound(jac: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """(J' Omega^{-1} J)^{-1}: the smallest attainable asymptotic variance."""
    jac = np.atleast_2d(np.asarray(jac, dtype=float))
    omega_inv, _ = invert_psd(omega)
    bread = jac.T @ omega_inv @ jac
    bound, _ = invert_psd(bread)
    return (bound + bound.T) / 2.0


def sandwich_variance(jac: np.ndarray, weight: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """(J'WJ)^{-1} J'W Omega W J (J'WJ)^{-1}; collapses to the bound at W = Omega^{-1}."""
    jac = np.atleast_2d(np.asarray(jac, dtype=float))
    weight = np.atleast_2d(np.asarray(weight, dtype=float))
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    jwj = jac.T @ weight @ jac
    try:
        bread = np.linalg.inv(jwj)
    except np.linalg.LinAlgError as exc:
        raise SingularBread("J'WJ is singular") from exc
    meat = jac.T @ weight @ omega @ weight @ jac
    v = bread @ meat @ bread
    return (v + v.T) / 2.0


def influence_values(kind: InfluenceKind, cm, pmodel: PropensityModel, phat: float,
                     score: ScoreInfo | None, ds: Dataset, beta: np.ndarray) -> np.ndarray:
    """Per-observation influence vectors (n, d_m) for the requested estimator.

    Rows with d = 1 enter only through the fitted conditional mean and the
    selection probability; their unobserved moment values are never touched.
    """
    kind = InfluenceKind(kind) if isinstance(kind, str) else kind
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if not np.allclose(beta, cm.beta_at, atol=0.0, rtol=0.0, equal_nan=False):
        raise ValueError("conditional-moment fit was built at a different beta")

    e_hat, _, p_tilde = _pooled_inputs(cm, pmodel, ds)
    d = ds.d.astype(float)
    aux = ds.d == 0
    m = np.zeros_like(e_hat)
    m[aux] = cm.moment_values(ds.y[aux], ds.x[aux])
    resid = np.where(aux[:, None], m - e_hat, 0.0)

    if kind in (InfluenceKind.CEP_OUT, InfluenceKind.EFF_OUT):
        w = (1.0 - d) * p_tilde / (phat * (1.0 - p_tilde))
        return w[:, None] * resid + (d / phat)[:, None] * e_hat
    if kind in (InfluenceKind.CEP_IN, InfluenceKind.EFF_IN):
        w = (1.0 - d) / (1.0 - p_tilde)
        return w[:, None] * resid + e_hat
    if kind is InfluenceKind.IPW_OUT:
        term_m = ((1.0 - d) * p_tilde / (1.0 - p_tilde))[:, None] * m
        term_e = ((d - p_tilde) / (1.0 - p_tilde))[:, None] * e_hat
        return (term_m + term_e) / phat
    if kind is InfluenceKind.EFF_OUT_KNOWN:
        w = (1.0 - d) * p_tilde / (phat * (1.0 - p_tilde))
        return w[:, None] * resid + (p_tilde / phat)[:, None] * e_hat
    if kind is InfluenceKind.EFF_OUT_PARAMETRIC:
        if score is None:
            raise ValueError("parametric influence needs a ScoreInfo")
        w = (1.0 - d) * p_tilde / (phat * (1.0 - p_tilde))
        c = (e_hat[:, :, None] * score.pgrad[:, None, :]).mean(axis=0) / phat
        info_inv, _ = invert_psd(score.information)
        projection = score.scores @ (c @ info_inv).T
        return w[:, None] * resid + projection + (p_tilde / phat)[:, None] * e_hat
    raise ValueError(kind)  # pragma: no cover


def psd_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum eigenvalue of the symmetrized difference a - b."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    for name, mat in (("a", a), ("b", b)):
        if not np.allclose(mat, mat.T, atol=1e-8):
            raise ValueError(f"matrix {name} is not symmetric within 1e-8")
    diff = a - b
    return float(np.linalg.eigvalsh((diff + diff.T) / 2.0).min())
