"""Series bases (power series, polynomial splines) and least-squares projection.

The projection engine behind every nonparametric first step in this package:
conditional-mean fits of moment functions, conditional second moments, and the
series least-squares selection-probability estimator all reduce to
:func:`sieve_ls_fit` on some basis built here.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCovariateWarning, InsufficientData, SingularDesign


class BasisKind(enum.Enum):
    POWER = "power"
    SPLINE = "spline"


class Interaction(enum.Enum):
    NONE = "none"
    FULL_TENSOR = "tensor"


@dataclass(frozen=True)
class BasisSpec:
    """User-facing basis request.

    ``n_knots`` may be None for splines, in which case ceil(n^(1/3)) knots per
    coordinate are used; ``knots`` may pin explicit knot locations instead.
    """

    kind: BasisKind = BasisKind.SPLINE
    degree: int = 3
    n_knots: int | None = None
    knots: tuple[tuple[float, ...], ...] | None = None
    interaction: Interaction = Interaction.NONE

    def with_fewer_terms(self) -> "BasisSpec":
        """One step down the complexity ladder (used when n is too small)."""
        if self.kind is BasisKind.SPLINE and self.n_knots is not None and self.n_knots > 0:
            return BasisSpec(self.kind, self.degree, self.n_knots - 1, None, self.interaction)
        if self.kind is BasisKind.SPLINE and self.knots is not None:
            trimmed = tuple(k[:-1] for k in self.knots)
            if any(trimmed):
                return BasisSpec(self.kind, self.degree, None, trimmed, self.interaction)
            return BasisSpec(BasisKind.POWER, self.degree, None, None, self.interaction)
        if self.degree > 0:
            return BasisSpec(self.kind, self.degree - 1, self.n_knots, self.knots, self.interaction)
        raise InsufficientData("cannot shrink basis below the constant function")


@dataclass(frozen=True)
class SieveBasis:
    """Realized basis: knot locations are frozen against a fit sample.

    The first basis function is always the constant 1.  Spline pieces use the
    truncated-power form max(x - knot, 0)^degree; degree 0 gives indicator
    steps 1(x > knot).
    """

    kind: BasisKind
    degree: int
    knots: tuple[tuple[float, ...], ...]
    d_x: int
    interaction: Interaction

    @property
    def k_n(self) -> int:
        per_coord = [self._n_coord_terms(c) for c in range(self.d_x)]
        if self.interaction is Interaction.NONE:
            return 1 + sum(per_coord)
        return int(np.prod([p + 1 for p in per_coord]))

    def _n_coord_terms(self, c: int) -> int:
        return self.degree + len(self.knots[c]) if self.kind is BasisKind.SPLINE else self.degree

    def _coord_block(self, xc: np.ndarray, c: int) -> np.ndarray:
        """Non-constant basis columns in coordinate c, shape (n, terms)."""
        cols = [xc ** j for j in range(1, self.degree + 1)]
        if self.kind is BasisKind.SPLINE:
            for kappa in self.knots[c]:
                shifted = xc - kappa
                if self.degree == 0:
                    cols.append((shifted > 0).astype(float))
                else:
                    cols.append(np.where(shifted > 0, shifted, 0.0) ** self.degree)
        if not cols:
            return np.empty((xc.shape[0], 0))
        return np.column_stack(cols)

    def design_matrix(self, x: np.ndarray) -> np.ndarray:
        """Evaluate all basis functions on the rows of x, shape (n, k_n)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        blocks = [self._coord_block(x[:, c], c) for c in range(self.d_x)]
        if self.interaction is Interaction.NONE:
            return np.column_stack([np.ones((n, 1))] + blocks)
        # full tensor: products over per-coordinate {1} + block columns
        design = np.ones((n, 1))
        for block in blocks:
            with_one = np.column_stack([np.ones((n, 1)), block])
            design = (design[:, :, None] * with_one[:, None, :]).reshape(n, -1)
        return design


def eval_basis(basis: SieveBasis, x: np.ndarray) -> np.ndarray:
    """Basis vector at a single point, length k_n, first entry 1."""
    return basis.design_matrix(np.asarray(x, dtype=float).reshape(1, -1))[0]


def _quantile_knots(xc: np.ndarray, n_knots: int) -> tuple[float, ...]:
    probs = np.arange(1, n_knots + 1) / (n_knots + 1)
    raw = np.quantile(xc, probs)
    dedup = np.unique(raw)
    if dedup.size < raw.size:
        warnings.warn(
            f"covariate has too few distinct values for {n_knots} knots; "
            f"kept {dedup.size} after de-duplication",
            DegenerateCovariateWarning,
            stacklevel=3,
        )
    return tuple(float(v) for v in dedup)


def build_basis(spec: BasisSpec, x_sample: np.ndarray) -> SieveBasis:
    """Place spline knots at equal-range empirical quantiles of each coordinate.

    Parameters
    ----------
    spec : BasisSpec
        Requested kind/degree/knot budget.
    x_sample : (n, d_x) array
        Sample whose quantiles pin the knots; also used for the n >= k_n check.

    Raises
    ------
    InsufficientData
        When the sample is smaller than the number of basis functions.
    """
    x_sample = np.atleast_2d(np.asarray(x_sample, dtype=float))
    n, d_x = x_sample.shape
    if spec.degree < 0:
        raise ValueError("degree must be >= 0")
    if spec.kind is BasisKind.SPLINE:
        if spec.knots is not None:
            if len(spec.knots) != d_x:
                raise ValueError("explicit knots must be given per coordinate")
            knots = tuple(tuple(sorted(float(v) for v in k)) for k in spec.knots)
        else:
            n_knots = spec.n_knots if spec.n_knots is not None else math.ceil(n ** (1.0 / 3.0))
            knots = tuple(_quantile_knots(x_sample[:, c], n_knots) for c in range(d_x))
    else:
        knots = tuple(() for _ in range(d_x))
    basis = SieveBasis(kind=spec.kind, degree=spec.degree, knots=knots,
                       d_x=d_x, interaction=spec.interaction)
    if n < basis.k_n:
        raise InsufficientData(f"n = {n} rows cannot support k_n = {basis.k_n} basis functions")
    return basis


@dataclass(frozen=True)
class ProjectionFit:
    """Least-squares coefficients of targets on a basis."""

    basis: SieveBasis
    coeffs: np.ndarray  # (k_n, d_target)
    ridge: float
    n_fit: int

    @property
    def d_target(self) -> int:
        return self.coeffs.shape[1]


# ridge escalation ladder, as multiples of trace(Q'Q)/k_n
_RIDGE_LADDER = (0.0, 1e-10, 1e-8, 1e-6)
_MIN_REL_EIG = 1e-13


def sieve_ls_fit(basis: SieveBasis, x_sample: np.ndarray, targets: np.ndarray) -> ProjectionFit:
    """Solve (Q'Q + ridge I) c = Q' targets with an escalating ridge.

    Q is the basis design matrix on ``x_sample``.  The ridge starts at zero and
    climbs the documented ladder until the regularized normal equations are
    numerically solvable (smallest relative eigenvalue above cutoff).
    """
    x_sample = np.atleast_2d(np.asarray(x_sample, dtype=float))
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    if x_sample.shape[0] != targets.shape[0]:
        raise ValueError("x_sample and targets must have the same number of rows")

    q = basis.design_matrix(x_sample)
    gram = q.T @ q
    rhs = q.T @ targets
    eigvals, eigvecs = np.linalg.eigh(gram)
    scale = float(np.trace(gram)) / basis.k_n

    for level in _RIDGE_LADDER:
        ridge = level * scale
        shifted = eigvals + ridge
        top = shifted.max()
        if top <= 0 or shifted.min() <= _MIN_REL_EIG * top:
            continue
        coeffs = eigvecs @ ((eigvecs.T @ rhs) / shifted[:, None])
        if np.isfinite(coeffs).all():
            return ProjectionFit(basis=basis, coeffs=coeffs, ridge=ridge, n_fit=x_sample.shape[0])
    raise SingularDesign("design matrix unsolvable at every ridge level")


def predict(fit: ProjectionFit, x: np.ndarray) -> np.ndarray:
    """Fitted value at one point: eval_basis(x)' coeffs, length d_target."""
    return eval_basis(fit.basis, x) @ fit.coeffs


def predict_many(fit: ProjectionFit, x: np.ndarray) -> np.ndarray:
    """Fitted values on the rows of x, shape (n, d_target)."""
    return fit.basis.design_matrix(x) @ fit.coeffs
