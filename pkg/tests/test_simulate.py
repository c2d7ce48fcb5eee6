import json
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chi2

from auxgmm.data import Case, marginal_p
from auxgmm.errors import AuxGMMError, SpecError, UnsupportedSpec
from auxgmm.estimators import EstimatorConfig, Family, PropensitySpec
from auxgmm.moments import cdf_moment, mean_moment
from auxgmm.simulate import (
    DGP_A,
    DGP_B,
    DiscreteX,
    exact_oracle_discrete,
    generate,
    oracle_bounds_continuous,
    replication_seed,
    run_monte_carlo,
)
from conftest import brute_force_bounds, enumerate_two_point


def test_generation_is_deterministic():
    a = generate(DGP_A, 500, seed=9)
    b = generate(DGP_A, 500, seed=9)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.d, b.d)
    assert np.array_equal(a.y, b.y, equal_nan=True)


def test_verify_in_generation_differs_only_in_label():
    a = generate(DGP_A, 500, seed=9)
    b = generate(DGP_A.with_case(Case.VERIFY_IN), 500, seed=9)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.d, b.d)
    assert a.case is Case.VERIFY_OUT and b.case is Case.VERIFY_IN


def test_cell_frequencies_match_enumeration():
    ds = generate(DGP_A, 100000, seed=14)
    support = enumerate_two_point()
    observed_y = ~np.isnan(ds.y[:, 0])
    for pr, x, y, d in support:
        if d == 1:
            continue  # y hidden on primary rows; check (x, d, y) on auxiliary
        hits = ((ds.x[:, 0] == x) & (ds.d == d) & observed_y & (ds.y[:, 0] == y)).mean()
        se = np.sqrt(pr * (1 - pr) / ds.n)
        assert abs(hits - pr) < 3.5 * se
    for x in (0.0, 1.0):
        for d in (0, 1):
            pr = 0.5 * (DGP_A.p_fn(np.array([[x]]))[0] if d == 1 else
                        1 - DGP_A.p_fn(np.array([[x]]))[0])
            hits = ((ds.x[:, 0] == x) & (ds.d == d)).mean()
            se = np.sqrt(pr * (1 - pr) / ds.n)
            assert abs(hits - pr) < 3.5 * se


def test_outcome_independent_of_flag_within_cells():
    # chi-square independence of (y, d) within each x cell on rows where both
    # are visible cannot be run (y hidden when d = 1), so simulate with the
    # selection flag drawn twice: the construction draws y before d
    spec = replace(DGP_A, p_fn=lambda x: np.full(x.shape[0], 0.4))
    ds = generate(spec, 50000, seed=15)
    # within each x cell the auxiliary y distribution must match the y law
    for level, (values, probs) in zip((0.0, 1.0), DGP_A.y_law.table):
        cell = ds.y[(ds.x[:, 0] == level) & (ds.d == 0), 0]
        counts = np.array([(cell == v).sum() for v in values])
        expected = cell.size * np.asarray(probs)
        stat = ((counts - expected) ** 2 / expected).sum()
        assert stat < chi2.ppf(0.999, df=len(values) - 1)


def test_p_fn_outside_unit_interval_rejected():
    spec = replace(DGP_A, p_fn=lambda x: 1.0 + x[:, 0])
    with pytest.raises(SpecError):
        generate(spec, 100, seed=1)


def test_exact_oracle_against_brute_force(mean_model, one_param_family, saturated_family):
    # the influence variances are case-specific: each influence is mean zero
    # only at its own case's parameter value
    families = {"one": one_param_family, "sat": saturated_family}
    out_lib = exact_oracle_discrete(DGP_A, mean_model, Case.VERIFY_OUT, families)
    out_ref = brute_force_bounds(Case.VERIFY_OUT, family=one_param_family)
    assert out_lib.beta0[0] == pytest.approx(out_ref["beta0"], abs=1e-12)
    assert out_lib.p == pytest.approx(out_ref["p"], abs=1e-15)
    assert out_lib.omega1[0, 0] == pytest.approx(out_ref["omega1"], abs=1e-12)
    assert out_lib.omega1_known[0, 0] == pytest.approx(out_ref["omega1_known"], abs=1e-12)
    assert out_lib.omega_param["one"][0, 0] == pytest.approx(out_ref["omega_param"], abs=1e-9)

    in_lib = exact_oracle_discrete(DGP_A, mean_model, Case.VERIFY_IN, families)
    in_ref = brute_force_bounds(Case.VERIFY_IN)
    assert in_lib.beta0[0] == pytest.approx(in_ref["beta0"], abs=1e-12)
    assert in_lib.omega2[0, 0] == pytest.approx(in_ref["omega2"], abs=1e-12)


def test_exact_oracle_dgp_a_closed_forms(mean_model):
    out = exact_oracle_discrete(DGP_A, mean_model, Case.VERIFY_OUT)
    assert out.beta0[0] == pytest.approx(7.0 / 6.0, abs=1e-15)
    assert out.omega1[0, 0] == pytest.approx(10.0 / 9.0, abs=1e-14)
    assert out.omega1_known[0, 0] == pytest.approx(58.0 / 81.0, abs=1e-14)
    inn = exact_oracle_discrete(DGP_A, mean_model, Case.VERIFY_IN)
    assert inn.beta0[0] == pytest.approx(1.0, abs=1e-15)
    assert inn.omega2[0, 0] == pytest.approx(2.0 / 3.0, abs=1e-14)


def test_constant_p_collapses_cases(mean_model):
    spec = replace(DGP_A, p_fn=lambda x: np.full(x.shape[0], 0.375))
    out = exact_oracle_discrete(spec, mean_model, Case.VERIFY_OUT)
    inn = exact_oracle_discrete(spec, mean_model, Case.VERIFY_IN)
    assert out.beta0[0] == pytest.approx(inn.beta0[0], abs=1e-14)
    np.testing.assert_allclose(out.omega1_known, out.omega2, atol=1e-14)


def test_oracle_rejects_continuous_law(mean_model):
    with pytest.raises(UnsupportedSpec):
        exact_oracle_discrete(DGP_B, mean_model, Case.VERIFY_OUT)


def test_oracle_rejects_misspecified_family(mean_model):
    from auxgmm.propensity import LinearFamily

    bad = LinearFamily(design=lambda x: np.ones((x.shape[0], 1)), d_gamma=1)  # constant p
    with pytest.raises(SpecError):
        exact_oracle_discrete(DGP_A, mean_model, Case.VERIFY_OUT, {"bad": bad})


def test_oracle_nonlocation_bisection_matches_location_path():
    from auxgmm.moments import MomentModel

    def _eval_batch(y, x, beta):
        return y[:, :1] - beta[None, :]

    def _eval(z, beta):
        y, _ = z
        return np.asarray(y, dtype=float).reshape(-1)[:1] - beta

    opaque_mean = MomentModel(name="opaque", d_m=1, d_beta=1, smooth=True,
                              eval=_eval, eval_batch=_eval_batch,
                              beta_box=np.array([[-100.0], [100.0]]))
    got = exact_oracle_discrete(DGP_A, opaque_mean, Case.VERIFY_OUT)
    assert got.beta0[0] == pytest.approx(7.0 / 6.0, abs=1e-10)
    assert got.omega1[0, 0] == pytest.approx(10.0 / 9.0, rel=1e-9)


def test_quadrature_oracle_mean_model(mean_model):
    out = oracle_bounds_continuous(DGP_B, mean_model, Case.VERIFY_OUT)
    # independent check with Gauss-Hermite quadrature
    nodes, weights = np.polynomial.hermite_e.hermegauss(201)
    w = weights / weights.sum()
    p_x = DGP_B.p_fn(nodes.reshape(-1, 1))
    p = float(w @ p_x)
    beta0 = float(w @ (p_x * np.sin(nodes))) / p
    assert out.p == pytest.approx(p, abs=1e-10)
    assert out.beta0[0] == pytest.approx(beta0, abs=1e-10)
    e2 = w @ (p_x ** 2 / (1 - p_x) * 0.25) / p ** 2 \
        + w @ (p_x * (np.sin(nodes) - beta0) ** 2) / p ** 2
    assert out.omega1[0, 0] == pytest.approx(float(e2), rel=1e-8)


def test_quadrature_oracle_cdf_in_unit_interval():
    model = cdf_moment([-0.5, 0.5])
    out = oracle_bounds_continuous(DGP_B, model, Case.VERIFY_IN)
    assert np.all(np.diff(out.beta0) > 0)
    assert np.all((out.beta0 > 0) & (out.beta0 < 1))
    assert np.linalg.eigvalsh(out.omega2).min() > 0


def test_monte_carlo_smoke(mean_model, saturated_basis):
    cfgs = {"cep": EstimatorConfig(Family.CEP, Case.VERIFY_OUT, mean_model, saturated_basis)}
    report = run_monte_carlo(DGP_A, cfgs, n=50, R=2, base_seed=123)
    entry = report.entries["cep"]
    assert 0.0 <= entry.coverage[0] <= 1.0
    assert entry.n_used == 2
    payload = report.to_jsonable()
    assert json.loads(json.dumps(payload)) == payload
    assert "cep" in report.text_table()


def test_monte_carlo_thread_invariance(mean_model, saturated_basis):
    cfgs = {
        "cep": EstimatorConfig(Family.CEP, Case.VERIFY_OUT, mean_model, saturated_basis),
        "ipw": EstimatorConfig(Family.IPW, Case.VERIFY_OUT, mean_model, saturated_basis),
    }
    r1 = run_monte_carlo(DGP_A, cfgs, n=200, R=12, base_seed=5, threads=1)
    r4 = run_monte_carlo(DGP_A, cfgs, n=200, R=12, base_seed=5, threads=4)
    assert json.dumps(r1.to_jsonable(), sort_keys=True) == \
        json.dumps(r4.to_jsonable(), sort_keys=True)


def test_monte_carlo_rejects_mixed_cases(mean_model, saturated_basis):
    cfgs = {
        "a": EstimatorConfig(Family.CEP, Case.VERIFY_OUT, mean_model, saturated_basis),
        "b": EstimatorConfig(Family.CEP, Case.VERIFY_IN, mean_model, saturated_basis),
    }
    with pytest.raises(SpecError):
        run_monte_carlo(DGP_A, cfgs, n=100, R=2, base_seed=1)


def test_replication_seed_is_deterministic_function():
    a = np.random.default_rng(replication_seed(7, 3)).random(4)
    b = np.random.default_rng(replication_seed(7, 3)).random(4)
    c = np.random.default_rng(replication_seed(7, 4)).random(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@pytest.mark.slow
def test_consistency_every_family_tightens_with_n(mean_model, saturated_basis,
                                                  one_param_family):
    # median |beta_hat - beta0| should shrink by at least 2x for a 10x n jump
    prop_param = PropensitySpec(family=one_param_family)
    prop_known = PropensitySpec(known_fn=DGP_A.p_fn)
    out_configs = {
        "cep": EstimatorConfig(Family.CEP, Case.VERIFY_OUT, mean_model, saturated_basis),
        "ipw": EstimatorConfig(Family.IPW, Case.VERIFY_OUT, mean_model, saturated_basis),
        "cep-param": EstimatorConfig(Family.CEP_PARAMETRIC_P, Case.VERIFY_OUT, mean_model,
                                     saturated_basis, prop_param),
        "cep-known": EstimatorConfig(Family.CEP_KNOWN_P, Case.VERIFY_OUT, mean_model,
                                     saturated_basis, prop_known),
        "ipw-param": EstimatorConfig(Family.IPW_PARAMETRIC_P, Case.VERIFY_OUT, mean_model,
                                     saturated_basis, prop_param),
        "ipw-known": EstimatorConfig(Family.IPW_KNOWN_P, Case.VERIFY_OUT, mean_model,
                                     saturated_basis, prop_known),
        "ipw-mixed": EstimatorConfig(Family.IPW_MIXED, Case.VERIFY_OUT, mean_model,
                                     saturated_basis, prop_param),
    }
    in_configs = {
        "cep": EstimatorConfig(Family.CEP, Case.VERIFY_IN, mean_model, saturated_basis),
        "ipw": EstimatorConfig(Family.IPW, Case.VERIFY_IN, mean_model, saturated_basis),
        "ipw-param": EstimatorConfig(Family.IPW_PARAMETRIC_P, Case.VERIFY_IN, mean_model,
                                     saturated_basis, prop_param),
        "ipw-known": EstimatorConfig(Family.IPW_KNOWN_P, Case.VERIFY_IN, mean_model,
                                     saturated_basis, prop_known),
    }
    from auxgmm.estimators import estimate

    for case, configs in ((Case.VERIFY_OUT, out_configs), (Case.VERIFY_IN, in_configs)):
        spec = DGP_A.with_case(case)
        oracle = exact_oracle_discrete(DGP_A, mean_model, case)
        devs = {}
        for n in (2000, 20000):
            rows = {name: [] for name in configs}
            for r in range(80):
                ds = generate(spec, n, replication_seed(606, r), case=case)
                for name, cfg in configs.items():
                    rows[name].append(abs(estimate(cfg, ds).beta[0] - oracle.beta0[0]))
            devs[n] = {name: float(np.median(v)) for name, v in rows.items()}
        for name in configs:
            assert devs[2000][name] / devs[20000][name] >= 2.0, name
