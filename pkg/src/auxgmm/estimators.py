"""The estimator families: projection-based and inverse-probability-weighted GMM.

Seven variants are supported.  Projection (CEP) estimators average a series
fit of the conditional moment over the relevant x distribution; three flavors
differ in how the selection probability enters the averaging weights (not at
all, through a parametric fit, or as a known function).  IPW estimators
reweight the auxiliary sample by odds of the selection probability; four
flavors differ in which probability feeds the weights (series fit, parametric
fit, known function, or the efficient parametric/series mix).

Exactly identified location-form models (m = g(z) - beta) solve in closed
form; everything else goes through a deterministic Nelder-Mead simplex with
reflection into the parameter box, optionally reweighted by the inverse of
the estimated moment covariance in a second step.
"""

from __future__ import annotations

import enum
import warnings
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import bounds as bounds_mod
from .data import Case, Dataset, marginal_p, split_samples
from .errors import InsufficientData, NoConvergenceWarning, ShrunkBasisWarning, SpecError
from .moments import JacobianEstimate, MomentModel, moment_jacobian
from .propensity import (
    LogitFamily,
    ParametricFamily,
    PropensityKind,
    PropensityModel,
    fit_propensity,
    propensity_values,
    score_info,
)
from .sieve import BasisSpec, build_basis, predict_many, sieve_ls_fit


class Family(enum.Enum):
    CEP = "cep"
    CEP_PARAMETRIC_P = "cep-param"
    CEP_KNOWN_P = "cep-known"
    IPW = "ipw"
    IPW_PARAMETRIC_P = "ipw-param"
    IPW_KNOWN_P = "ipw-known"
    IPW_MIXED = "ipw-mixed"


class IPWKind(enum.Enum):
    OUT_NP = "out-np"
    IN_NP = "in-np"
    OUT_PARAM = "out-param"
    OUT_KNOWN = "out-known"
    OUT_MIXED = "out-mixed"
    IN_PARAM = "in-param"
    IN_KNOWN = "in-known"


_OUT_ONLY = {Family.CEP_PARAMETRIC_P, Family.CEP_KNOWN_P, Family.IPW_MIXED}


@dataclass(frozen=True)
class PropensitySpec:
    """How the selection probability is modelled inside an estimator.

    ``method`` names the sieve flavor used wherever a nonparametric p is
    needed (IPW weights, mixed denominators, variance plug-ins for the plain
    CEP estimator).  ``family`` supplies the parametric family, ``known_fn``
    the known function.  ``basis`` defaults to the estimator's own basis.
    """

    method: str = "sieve-logit"
    clip: float = 0.01
    basis: BasisSpec | None = None
    known_fn: Callable[[np.ndarray], np.ndarray] | None = None
    family: ParametricFamily | None = None


@dataclass(frozen=True)
class OptimizerSpec:
    max_iter: int = 5000
    diam_tol: float = 1e-9
    init_step: float = 0.05


@dataclass(frozen=True)
class EstimatorConfig:
    family: Family
    case: Case
    moment: MomentModel
    basis: BasisSpec = field(default_factory=BasisSpec)
    propensity: PropensitySpec = field(default_factory=PropensitySpec)
    weighting: str | np.ndarray = "two-step"  # "identity" | "two-step" | fixed matrix
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    beta_init: np.ndarray | None = None

    def validate(self, ds: Dataset) -> None:
        if self.case is not ds.case:
            raise SpecError(f"config case {self.case} does not match dataset case {ds.case}")
        if self.family in _OUT_ONLY and self.case is not Case.VERIFY_OUT:
            raise SpecError(f"{self.family.value} is only defined for the verify-out case")
        if self.family in (Family.CEP_KNOWN_P, Family.IPW_KNOWN_P) and self.propensity.known_fn is None:
            raise SpecError(f"{self.family.value} needs propensity.known_fn")


@dataclass(frozen=True)
class Estimate:
    beta: np.ndarray
    vcov: np.ndarray
    omega: np.ndarray
    jac: JacobianEstimate
    weighting_used: np.ndarray
    family: Family
    case: Case
    diagnostics: dict

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))


# ---------------------------------------------------------------------------
# sample moments


def cep_sample_moment(beta: np.ndarray, fit, x_rows: np.ndarray,
                      pweight: np.ndarray | None = None,
                      shift_by_beta: bool = False) -> np.ndarray:
    """Average the fitted conditional moment over the rows of ``x_rows``.

    Plain form: mean of predictions.  Weighted form: mean of prediction times
    ``pweight`` (the selection-probability ratio), taken over a pooled sample.
    With ``shift_by_beta`` the fit is of the g part of a location-form model
    and predictions are shifted by -beta to become the conditional moment.
    """
    preds = predict_many(fit, x_rows)
    if shift_by_beta:
        preds = preds - np.asarray(beta, dtype=float)[None, :]
    if pweight is None:
        return preds.mean(axis=0)
    return (preds * np.asarray(pweight, dtype=float)[:, None]).mean(axis=0)


def ipw_sample_moment(beta: np.ndarray, moment: MomentModel,
                      aux_y: np.ndarray, aux_x: np.ndarray,
                      pmodel: PropensityModel, phat: float,
                      kind: IPWKind | str,
                      numerator_model: PropensityModel | None = None) -> np.ndarray:
    """Weighted auxiliary-sample average of m(z; beta) for the given variant."""
    kind = IPWKind(kind) if isinstance(kind, str) else kind
    weights = _ipw_weights(aux_x, pmodel, phat, kind, numerator_model)[0]
    m = moment.eval_batch(aux_y, aux_x, moment.check_beta(beta))
    return (m * weights[:, None]).mean(axis=0)


def _ipw_weights(aux_x, pmodel, phat, kind, numerator_model=None):
    p_tilde, clipped = propensity_values(pmodel, aux_x)
    if kind in (IPWKind.OUT_NP, IPWKind.OUT_PARAM, IPWKind.OUT_KNOWN):
        w = p_tilde / (1.0 - p_tilde) * (1.0 - phat) / phat
    elif kind in (IPWKind.IN_NP, IPWKind.IN_PARAM, IPWKind.IN_KNOWN):
        w = (1.0 - phat) / (1.0 - p_tilde)
    elif kind is IPWKind.OUT_MIXED:
        if numerator_model is None:
            raise SpecError("mixed weights need a parametric numerator model")
        p_num, c2 = propensity_values(numerator_model, aux_x)
        clipped += c2
        w = p_num / (1.0 - p_tilde) * (1.0 - phat) / phat
    else:  # pragma: no cover
        raise ValueError(kind)
    return w, clipped


# ---------------------------------------------------------------------------
# optimizer


def _reflect_into_box(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    x = np.where(x < lo, lo + (lo - x), x)
    x = np.where(x > hi, hi - (x - hi), x)
    return np.clip(x, lo, hi)


def gmm_minimize(objective: Callable[[np.ndarray], float], beta_init: np.ndarray,
                 spec: OptimizerSpec | None = None,
                 box: np.ndarray | None = None,
                 closed_form: Callable[[], np.ndarray] | None = None):
    """Minimize a GMM objective over a box.

    Exactly identified location-form problems pass ``closed_form`` and skip
    the search entirely.  Otherwise a deterministic Nelder-Mead simplex runs
    with trial points reflected back into the box, stopping when the simplex
    diameter falls below diam_tol * (1 + |best|) or at the iteration cap (the
    best vertex is still returned, with a warning).

    Returns (beta_hat, objective_value, iterations, converged).
    """
    spec = spec or OptimizerSpec()
    beta_init = np.asarray(beta_init, dtype=float).reshape(-1)
    k = beta_init.size
    if box is None:
        box = np.array([[-1e6] * k, [1e6] * k])
    lo, hi = box[0], box[1]

    if closed_form is not None:
        beta = np.clip(np.asarray(closed_form(), dtype=float).reshape(-1), lo, hi)
        return beta, float(objective(beta)), 0, True

    # fixed deterministic initial simplex
    verts = [np.clip(beta_init, lo, hi)]
    for j in range(k):
        step = spec.init_step * max(1.0, abs(beta_init[j]))
        v = verts[0].copy()
        v[j] = v[j] + step if v[j] + step <= hi[j] else v[j] - step
        verts.append(v)
    simplex = np.array(verts)
    values = np.array([objective(v) for v in simplex])

    alpha, gamma, rho, sigma = 1.0, 2.0, 0.5, 0.5
    iterations = 0
    converged = False
    while iterations < spec.max_iter:
        order = np.argsort(values, kind="stable")
        simplex, values = simplex[order], values[order]
        best = simplex[0]
        diameter = max(np.linalg.norm(v - best) for v in simplex[1:])
        if diameter < spec.diam_tol * (1.0 + np.linalg.norm(best)):
            converged = True
            break
        iterations += 1
        centroid = simplex[:-1].mean(axis=0)
        worst, worst_val = simplex[-1], values[-1]

        refl = _reflect_into_box(centroid + alpha * (centroid - worst), lo, hi)
        f_refl = objective(refl)
        if values[0] <= f_refl < values[-2]:
            simplex[-1], values[-1] = refl, f_refl
            continue
        if f_refl < values[0]:
            exp = _reflect_into_box(centroid + gamma * (refl - centroid), lo, hi)
            f_exp = objective(exp)
            if f_exp < f_refl:
                simplex[-1], values[-1] = exp, f_exp
            else:
                simplex[-1], values[-1] = refl, f_refl
            continue
        contr = _reflect_into_box(centroid + rho * (worst - centroid), lo, hi)
        f_contr = objective(contr)
        if f_contr < worst_val:
            simplex[-1], values[-1] = contr, f_contr
            continue
        for i in range(1, k + 1):  # shrink toward the best vertex
            simplex[i] = simplex[0] + sigma * (simplex[i] - simplex[0])
            values[i] = objective(simplex[i])

    order = np.argsort(values, kind="stable")
    simplex, values = simplex[order], values[order]
    if not converged:
        warnings.warn("simplex search hit its iteration cap before the diameter "
                      "tolerance", NoConvergenceWarning, stacklevel=2)
    return simplex[0], float(values[0]), iterations, converged


# ---------------------------------------------------------------------------
# moment assembly: one object per estimate() call


class _MomentAssembly:
    """Precomputed pieces that turn beta into an averaged sample moment.

    Every variant reduces to sum_i a_i * E_hat(x_i; beta) (projection forms,
    weights a_i over the pooled sample) or to a weighted auxiliary average of
    m itself (IPW forms).  Both are linear in the moment values, so averaged
    analytic Jacobians apply the same weights to per-observation Jacobians.
    """

    def __init__(self, cfg: EstimatorConfig, ds: Dataset, basis, aux, pieces: dict):
        self.cfg = cfg
        self.moment = cfg.moment
        self.ds = ds
        self.basis = basis
        self.aux = aux
        self.pieces = pieces
        fam = cfg.family
        if fam in (Family.CEP, Family.CEP_PARAMETRIC_P, Family.CEP_KNOWN_P):
            if fam is Family.CEP:
                if cfg.case is Case.VERIFY_OUT:
                    weights = (ds.d == 1).astype(float) / ds.n_primary
                else:
                    weights = np.full(ds.n, 1.0 / ds.n)
            else:
                p_tilde = pieces["cep_weight_p"]
                weights = p_tilde / (pieces["phat"] * ds.n)
            # project once: weighted sum of predictions is (a'Q_pool) @ coeffs
            self._pool_row = weights @ basis.design_matrix(ds.x)
            self._weight_total = float(weights.sum())
            self._mode = "cep"
        else:
            kind = pieces["ipw_kind"]
            self._ipw_weights = _ipw_weights(aux.x, pieces["ipw_model"], pieces["phat"],
                                             kind, pieces.get("ipw_numerator"))[0]
            self._mode = "ipw"
        if self.moment.location_form:
            g = self.moment.loc_g_batch(aux.y, aux.x)
            if self._mode == "cep":
                coeffs = sieve_ls_fit(basis, aux.x, g).coeffs
                self._loc_level = self._pool_row @ coeffs
                self._loc_slope = self._weight_total
            else:
                self._loc_level = (g * self._ipw_weights[:, None]).mean(axis=0)
                self._loc_slope = float(self._ipw_weights.mean())

    def averaged(self, beta: np.ndarray) -> np.ndarray:
        beta = self.moment.check_beta(beta)
        if self.moment.location_form:
            return self._loc_level - self._loc_slope * beta
        m = self.moment.eval_batch(self.aux.y, self.aux.x, beta)
        if self._mode == "cep":
            coeffs = sieve_ls_fit(self.basis, self.aux.x, m).coeffs
            return self._pool_row @ coeffs
        return (m * self._ipw_weights[:, None]).mean(axis=0)

    def closed_form(self):
        if not (self.moment.location_form and self.moment.d_m == self.moment.d_beta):
            return None
        return lambda: self._loc_level / self._loc_slope

    def averaged_jac(self, beta: np.ndarray) -> np.ndarray | None:
        if self.moment.jac_batch is None:
            return None
        jac = self.moment.jac_batch(self.aux.y, self.aux.x, beta)  # (n_a, d_m, d_b)
        flat = jac.reshape(self.aux.n, -1)
        if self._mode == "cep":
            coeffs = sieve_ls_fit(self.basis, self.aux.x, flat).coeffs
            averaged = self._pool_row @ coeffs
        else:
            averaged = (flat * self._ipw_weights[:, None]).mean(axis=0)
        return averaged.reshape(self.moment.d_m, self.moment.d_beta)


# ---------------------------------------------------------------------------
# orchestration


def _build_basis_shrinking(spec: BasisSpec, x_fit: np.ndarray):
    current = spec
    while True:
        try:
            return build_basis(current, x_fit)
        except InsufficientData:
            current = current.with_fewer_terms()
            warnings.warn("basis shrunk to fit the sample size", ShrunkBasisWarning,
                          stacklevel=3)


def _default_beta_init(cfg: EstimatorConfig, aux) -> np.ndarray:
    m = cfg.moment
    if m.location_form:
        g = m.loc_g_batch(aux.y, aux.x)
        init = g.mean(axis=0)
        return np.clip(init, m.beta_box[0] + 1e-12, m.beta_box[1] - 1e-12)
    if m.default_init is not None:
        return np.asarray(m.default_init(aux.y, aux.x), dtype=float).reshape(-1)
    raise SpecError("beta_init is required for custom non-location moment models")


def _fit_needed_propensities(cfg: EstimatorConfig, ds: Dataset, basis) -> dict:
    """Fit whichever selection-probability models the family requires."""
    ps = cfg.propensity
    out: dict = {}
    sieve_spec = ps.basis or BasisSpec(kind=cfg.basis.kind, degree=cfg.basis.degree,
                                       n_knots=cfg.basis.n_knots, knots=cfg.basis.knots,
                                       interaction=cfg.basis.interaction)

    def sieve_model():
        b = _build_basis_shrinking(sieve_spec, ds.x)
        method = ps.method if ps.method in ("sieve-ls", "sieve-logit") else "sieve-logit"
        return fit_propensity(method, ds, basis=b, clip=ps.clip)

    def parametric_model():
        family = ps.family or LogitFamily()
        return fit_propensity(PropensityKind.PARAMETRIC, ds, family, clip=ps.clip)

    def known_model():
        return fit_propensity(PropensityKind.KNOWN, ds, ps.known_fn, clip=ps.clip)

    fam = cfg.family
    if fam is Family.CEP:
        if ps.method == "known" and ps.known_fn is not None:
            out["variance_p"] = known_model()
        elif ps.method == "parametric" or (ps.method == "logit"):
            out["variance_p"] = parametric_model()
        else:
            out["variance_p"] = sieve_model()
    elif fam is Family.CEP_PARAMETRIC_P:
        model = parametric_model()
        out["variance_p"] = model
        out["parametric"] = model
    elif fam is Family.CEP_KNOWN_P:
        out["variance_p"] = known_model()
    elif fam is Family.IPW:
        model = sieve_model()
        out["ipw"] = model
        out["variance_p"] = model
    elif fam is Family.IPW_PARAMETRIC_P:
        model = parametric_model()
        out["ipw"] = model
        out["variance_p"] = model
    elif fam is Family.IPW_KNOWN_P:
        model = known_model()
        out["ipw"] = model
        out["variance_p"] = model
    elif fam is Family.IPW_MIXED:
        out["ipw"] = sieve_model()
        model = parametric_model()
        out["mixed_numerator"] = model
        out["parametric"] = model
        out["variance_p"] = model
    return out


_IPW_KIND_TABLE = {
    (Family.IPW, Case.VERIFY_OUT): IPWKind.OUT_NP,
    (Family.IPW, Case.VERIFY_IN): IPWKind.IN_NP,
    (Family.IPW_PARAMETRIC_P, Case.VERIFY_OUT): IPWKind.OUT_PARAM,
    (Family.IPW_PARAMETRIC_P, Case.VERIFY_IN): IPWKind.IN_PARAM,
    (Family.IPW_KNOWN_P, Case.VERIFY_OUT): IPWKind.OUT_KNOWN,
    (Family.IPW_KNOWN_P, Case.VERIFY_IN): IPWKind.IN_KNOWN,
    (Family.IPW_MIXED, Case.VERIFY_OUT): IPWKind.OUT_MIXED,
}


def _omega_kind(cfg: EstimatorConfig) -> bounds_mod.BoundKind:
    if cfg.family is Family.CEP_PARAMETRIC_P or cfg.family is Family.IPW_MIXED:
        return bounds_mod.BoundKind.OUT_PARAMETRIC
    if cfg.family is Family.CEP_KNOWN_P:
        return bounds_mod.BoundKind.OUT_KNOWN
    if cfg.case is Case.VERIFY_OUT:
        return bounds_mod.BoundKind.OUT_UNKNOWN
    return bounds_mod.BoundKind.IN_SAMPLE


def optimal_combination(jac: JacobianEstimate | np.ndarray, omega: np.ndarray) -> np.ndarray:
    """The moment combination A = J' Omega^{-1} that attains the variance bound."""
    j = jac.matrix if isinstance(jac, JacobianEstimate) else np.asarray(jac, dtype=float)
    omega_inv, _ = bounds_mod.invert_psd(omega)
    return j.T @ omega_inv


def estimate(cfg: EstimatorConfig, ds: Dataset) -> Estimate:
    """Run the full two-step pipeline for one estimator configuration."""
    cfg.validate(ds)
    moment = cfg.moment
    primary, aux = split_samples(ds)
    phat = marginal_p(ds)

    basis = _build_basis_shrinking(cfg.basis, aux.x)
    pmodels = _fit_needed_propensities(cfg, ds, basis)

    pieces: dict = {"phat": phat}
    clip_count = 0
    if cfg.family in (Family.CEP_PARAMETRIC_P, Family.CEP_KNOWN_P):
        weight_model = pmodels.get("parametric") or pmodels["variance_p"]
        pieces["cep_weight_p"], c = propensity_values(weight_model, ds.x)
        clip_count += c
    kind = _IPW_KIND_TABLE.get((cfg.family, cfg.case))
    if kind is not None:
        pieces["ipw_kind"] = kind
        pieces["ipw_model"] = pmodels["ipw"]
        pieces["ipw_numerator"] = pmodels.get("mixed_numerator")
        clip_count += _ipw_weights(aux.x, pmodels["ipw"], phat, kind,
                                   pmodels.get("mixed_numerator"))[1]

    assembly = _MomentAssembly(cfg, ds, basis, aux, pieces)
    beta_init = (np.asarray(cfg.beta_init, dtype=float).reshape(-1)
                 if cfg.beta_init is not None else _default_beta_init(cfg, aux))

    if isinstance(cfg.weighting, str):
        w_first = np.eye(moment.d_m)
        two_step = cfg.weighting == "two-step"
    else:
        w_first = np.atleast_2d(np.asarray(cfg.weighting, dtype=float))
        two_step = False

    def objective_with(weight):
        def q(beta):
            g = assembly.averaged(beta)
            return float(g @ weight @ g)
        return q

    closed = assembly.closed_form()
    beta1, val1, iters1, conv1 = gmm_minimize(objective_with(w_first), beta_init,
                                              cfg.optimizer, moment.beta_box, closed)

    def omega_at(beta):
        cm = bounds_mod.fit_cond_moments(moment, beta, aux.y, aux.x, basis)
        score = None
        if _omega_kind(cfg) is bounds_mod.BoundKind.OUT_PARAMETRIC:
            score = score_info(pmodels["parametric"], ds)
        omega = bounds_mod.estimate_omega(_omega_kind(cfg), cm, pmodels["variance_p"],
                                          phat, ds, score)
        _, floored = cm.variances_with_diagnostics(ds.x)
        return omega, floored

    omega1, floored = omega_at(beta1)

    if two_step:
        w_opt, used_pinv = bounds_mod.invert_psd(omega1)
        beta_hat, val, iters2, conv2 = gmm_minimize(objective_with(w_opt), beta1,
                                                    cfg.optimizer, moment.beta_box, closed)
        w_used = w_opt
        iterations = iters1 + iters2
        converged = conv1 and conv2
    else:
        beta_hat, val = beta1, val1
        w_used, used_pinv = w_first, False
        iterations, converged = iters1, conv1

    if closed is not None and np.allclose(beta_hat, beta1):
        omega, floored_final = omega1, floored
    else:
        omega, floored_final = omega_at(beta_hat)

    step = None if moment.smooth else ds.n ** (-0.2)
    jac = moment_jacobian(moment, assembly.averaged, beta_hat, step=step,
                          averaged_jac=(assembly.averaged_jac
                                        if moment.jac_batch is not None else None))

    if two_step:
        omega_inv, pinv2 = bounds_mod.invert_psd(omega)
        used_pinv = used_pinv or pinv2
        bread, _ = bounds_mod.invert_psd(jac.matrix.T @ omega_inv @ jac.matrix)
        vcov = (bread + bread.T) / 2.0 / ds.n
    else:
        vcov = bounds_mod.sandwich_variance(jac.matrix, w_used, omega) / ds.n

    diagnostics = {
        "n": ds.n, "n_p": ds.n_primary, "n_a": ds.n_auxiliary,
        "k_n": basis.k_n,
        "optimizer_iterations": iterations,
        "objective": val,
        "converged": converged,
        "clip_count": int(clip_count),
        "floored_variance_rows": int(floored_final),
        "omega_pseudo_inverse": bool(used_pinv),
        "variance_approximate": cfg.family in (Family.IPW_PARAMETRIC_P, Family.IPW_KNOWN_P),
        "phat": phat,
    }
    return Estimate(beta=beta_hat, vcov=vcov, omega=omega, jac=jac,
                    weighting_used=w_used, family=cfg.family, case=cfg.case,
                    diagnostics=diagnostics)
