"""Command-line front end: ``estimate``, ``bounds``, and ``simulate``.

Configs are JSON; every run writes a provenance block (package version, seed,
config hash) so that reports are reproducible and byte-identical across
repeated runs with the same inputs.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.  Failures are reported as machine-readable JSON on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import re
import sys

import numpy as np

from . import __version__
from . import bounds as bounds_mod
from .data import Case, ColumnSpec, load_dataset, marginal_p, split_samples
from .errors import AuxGMMError, MalformedRow, ParseError, SpecError, UnsupportedSpec
from .estimators import (
    Estimate,
    EstimatorConfig,
    Family,
    OptimizerSpec,
    PropensitySpec,
    estimate,
)
from .moments import moment_from_config
from .propensity import LogitFamily, PropensityKind, fit_propensity, score_info
from .sieve import BasisKind, BasisSpec, Interaction, build_basis
from .simulate import PRESETS, run_monte_carlo

_EXPR_TOKEN = re.compile(r"\s+|\d+\.?\d*(?:[eE][+-]?\d+)?|x\d+|exp|[-+*/()]")


def parse_expression(text: str, d_x: int):
    """Compile a restricted arithmetic expression of x1..x{d_x} into a function.

    Allowed: numbers, x_j names, exp, and + - * / ( ).
    """
    tokens = _EXPR_TOKEN.findall(text)
    if "".join(tokens) != text or "**" in text:
        raise SpecError(f"expression contains disallowed syntax: {text!r}")
    for tok in tokens:
        if tok.startswith("x") and tok != "exp" and int(tok[1:]) > d_x:
            raise SpecError(f"expression references {tok} but data has {d_x} x columns")
    code = compile(text, "<expression>", "eval")

    def fn(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        env = {"exp": np.exp}
        env.update({f"x{j + 1}": x[:, j] for j in range(x.shape[1])})
        value = eval(code, {"__builtins__": {}}, env)  # noqa: S307 - tokens whitelisted above
        return np.broadcast_to(np.asarray(value, dtype=float), (x.shape[0],)).copy()

    return fn


def _basis_from_config(cfg: dict | None) -> BasisSpec:
    if not cfg:
        return BasisSpec()
    kind = BasisKind(cfg.get("kind", "spline"))
    knots = cfg.get("knots")
    n_knots, explicit = None, None
    if isinstance(knots, int):
        n_knots = knots
    elif isinstance(knots, (list, tuple)):
        explicit = tuple(tuple(float(v) for v in per) for per in knots)
    return BasisSpec(kind=kind, degree=int(cfg.get("degree", 3)), n_knots=n_knots,
                     knots=explicit, interaction=Interaction(cfg.get("interaction", "none")))


def _propensity_from_config(cfg: dict | None, d_x: int) -> PropensitySpec:
    if not cfg:
        return PropensitySpec()
    method = cfg.get("method", "sieve-logit")
    clip = float(cfg.get("clip", 0.01))
    basis = _basis_from_config(cfg.get("basis")) if cfg.get("basis") else None
    known_fn = None
    family = None
    if "known" in cfg and cfg["known"] is not None:
        known_fn = parse_expression(str(cfg["known"]), d_x)
    if method == "logit":
        cols = tuple(int(c) for c in cfg["design"]) if cfg.get("design") else None
        family = LogitFamily(cols=cols, intercept=bool(cfg.get("intercept", True)))
    return PropensitySpec(method=method, clip=clip, basis=basis,
                          known_fn=known_fn, family=family)


_FAMILY_ALIASES = {f.value: f for f in Family}


def _estimator_configs(config: dict, d_x: int) -> dict[str, EstimatorConfig]:
    case = Case.parse(config.get("case", "verify-out"))
    moment = moment_from_config(config["moment"])
    basis = _basis_from_config(config.get("basis"))
    prop = _propensity_from_config(config.get("propensity"), d_x)
    weighting = config.get("weighting", "two-step")
    beta_init = config.get("beta_init")
    names = config.get("estimators") or [config.get("estimator", "cep")]
    out = {}
    for name in names:
        if name not in _FAMILY_ALIASES:
            raise SpecError(f"unknown estimator {name!r}; expected one of {sorted(_FAMILY_ALIASES)}")
        out[name] = EstimatorConfig(
            family=_FAMILY_ALIASES[name], case=case, moment=moment, basis=basis,
            propensity=prop, weighting=weighting, optimizer=OptimizerSpec(),
            beta_init=None if beta_init is None else np.asarray(beta_init, dtype=float),
        )
    return out


def _config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _provenance(config: dict, seed) -> dict:
    return {"version": __version__, "seed": seed, "config_hash": _config_hash(config)}


def _estimate_payload(est: Estimate) -> dict:
    return {
        "beta": est.beta.tolist(),
        "se": est.se.tolist(),
        "vcov": est.vcov.tolist(),
        "omega": est.omega.tolist(),
        "jacobian": est.jac.matrix.tolist(),
        "family": est.family.value,
        "case": est.case.value,
        "diagnostics": {k: (v if not isinstance(v, (np.floating, np.integer)) else v.item())
                        for k, v in est.diagnostics.items()},
    }


def format_report(estimates, style: str = "table", labels=None, row_labels=None,
                  scale_by_100: bool = False, extra_columns=None) -> str:
    """Render estimates as JSON or as a fixed-precision grid.

    Table style: one row per parameter component, one column per estimator,
    point estimate with the standard error in parentheses.  Distribution
    function estimates are conventionally scaled by 100.
    """
    columns = []
    for item in extra_columns or []:
        columns.append(item)
    for i, est in enumerate(estimates):
        if isinstance(est, Estimate):
            label = labels[i] if labels else est.family.value
            columns.append((label, est.beta, est.se))
        else:
            columns.append(est)
    if not columns:
        raise ValueError("nothing to format")

    if style == "json":
        payload = {label: {"beta": np.asarray(b).tolist(), "se": np.asarray(s).tolist()}
                   for label, b, s in columns}
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    d = len(np.asarray(columns[0][1]).reshape(-1))
    rows = row_labels or [str(k + 1) for k in range(d)]
    mult = 100.0 if scale_by_100 else 1.0
    est_fmt = "{:.2f}" if scale_by_100 else "{:.4f}"
    width = max(16, max(len(str(c[0])) for c in columns) + 2)
    header = f"{'':<10}" + "".join(f"{str(c[0]):>{width}}" for c in columns)
    lines = [header, "-" * len(header)]
    for k in range(d):
        cells = []
        for _, beta, se in columns:
            b = np.asarray(beta).reshape(-1)[k] * mult
            s = np.asarray(se).reshape(-1)[k] * mult
            cells.append(f"{est_fmt.format(b)} ({s:.4g})")
        lines.append(f"{str(rows[k]):<10}" + "".join(f"{cell:>{width}}" for cell in cells))
    return "\n".join(lines) + "\n"


def _unadjusted_column(moment, aux):
    g = moment.loc_g_batch(aux.y, aux.x)
    beta = g.mean(axis=0)
    se = g.std(axis=0, ddof=1) / np.sqrt(aux.n)
    return ("unadjusted", beta, se)


def _write_output(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_estimate(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        config = json.load(fh)
    data_path = args.data or config.get("data")
    if not data_path:
        raise SpecError("no data path given (flag --data or config key 'data')")
    case = Case.parse(config.get("case", "verify-out"))
    with open(data_path, encoding="utf-8") as fh:
        ds = load_dataset(fh, ColumnSpec(), case)
    configs = _estimator_configs(config, ds.d_x)
    results = {name: estimate(cfg, ds) for name, cfg in configs.items()}

    fmt = args.format or config.get("format", "json")
    seed = args.seed if args.seed is not None else config.get("seed")
    if fmt == "table":
        moment = next(iter(configs.values())).moment
        extra = []
        row_labels = None
        if moment.location_form:
            _, aux = split_samples(ds)
            extra = [_unadjusted_column(moment, aux)]
        if moment.name == "cdf":
            row_labels = [f"{t:g}" for t in moment.params["thresholds"]]
        text = format_report(list(results.values()), "table", labels=list(results),
                             row_labels=row_labels, scale_by_100=moment.name == "cdf",
                             extra_columns=extra)
    else:
        payload = {
            "provenance": _provenance(config, seed),
            "results": {name: _estimate_payload(est) for name, est in results.items()},
        }
        text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    _write_output(text, args.out or config.get("out"))
    return 0


def _cmd_bounds(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        config = json.load(fh)
    data_path = args.data or config.get("data")
    if not data_path:
        raise SpecError("no data path given (flag --data or config key 'data')")
    case = Case.parse(config.get("case", "verify-out"))
    with open(data_path, encoding="utf-8") as fh:
        ds = load_dataset(fh, ColumnSpec(), case)

    configs = _estimator_configs({**config, "estimators": ["cep"]}, ds.d_x)
    base = configs["cep"]
    est = estimate(base, ds)
    beta = est.beta
    _, aux = split_samples(ds)
    basis = build_basis(base.basis, aux.x)
    cm = bounds_mod.fit_cond_moments(base.moment, beta, aux.y, aux.x, basis)
    phat = marginal_p(ds)
    prop = base.propensity

    sieve_model = fit_propensity("sieve-logit" if prop.method not in ("sieve-ls", "sieve-logit")
                                 else prop.method, ds,
                                 basis=build_basis(prop.basis or base.basis, ds.x),
                                 clip=prop.clip)
    out: dict = {"beta": beta.tolist(), "p_hat": phat}
    kinds: list[tuple[str, bounds_mod.BoundKind, object, object]] = []
    if case is Case.VERIFY_IN:
        kinds.append(("in-sample", bounds_mod.BoundKind.IN_SAMPLE, sieve_model, None))
    else:
        kinds.append(("out-unknown-p", bounds_mod.BoundKind.OUT_UNKNOWN, sieve_model, None))
        if prop.known_fn is not None:
            known = fit_propensity(PropensityKind.KNOWN, ds, prop.known_fn, clip=prop.clip)
            kinds.append(("out-known-p", bounds_mod.BoundKind.OUT_KNOWN, known, None))
        if prop.family is not None:
            pmodel = fit_propensity(PropensityKind.PARAMETRIC, ds, prop.family, clip=prop.clip)
            kinds.append(("out-parametric-p", bounds_mod.BoundKind.OUT_PARAMETRIC, pmodel,
                          score_info(pmodel, ds)))
    omegas = {}
    for name, kind, pmodel, score in kinds:
        om = bounds_mod.estimate_omega(kind, cm, pmodel, phat, ds, score)
        omegas[name] = {
            "omega": om.tolist(),
            "v0": bounds_mod.efficiency_bound(est.jac.matrix, om).tolist(),
        }
    payload = {"provenance": _provenance(config, args.seed), "bounds": omegas, **out}
    _write_output(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                  args.out or config.get("out"))
    return 0


_DEFAULT_MC_ESTIMATORS = ("cep", "ipw")


def _cmd_simulate(args) -> int:
    preset = PRESETS.get(args.preset)
    if preset is None:
        raise SpecError(f"unknown preset {args.preset!r}; expected one of {sorted(PRESETS)}")
    case = Case.parse(args.case)
    spec = preset.with_case(case)
    from .moments import mean_moment

    moment = mean_moment()
    names = [s for s in (args.estimators.split(",") if args.estimators else _DEFAULT_MC_ESTIMATORS) if s]
    basis = BasisSpec(kind=BasisKind.POWER, degree=1) if spec.name == "dgp-a" else BasisSpec()
    prop = PropensitySpec()
    if "cep-known" in names or "ipw-known" in names or "ipw-mixed" in names:
        prop = PropensitySpec(known_fn=spec.p_fn)
    configs = {
        name: EstimatorConfig(family=_FAMILY_ALIASES[name], case=case, moment=moment,
                              basis=basis, propensity=prop)
        for name in names
    }
    report = run_monte_carlo(spec, configs, n=args.n, R=args.reps, base_seed=args.seed,
                             threads=args.threads)
    config_view = {"preset": args.preset, "case": case.value, "n": args.n,
                   "reps": args.reps, "estimators": names}
    if args.format == "table":
        text = report.text_table()
    else:
        payload = {"provenance": _provenance(config_view, args.seed),
                   "report": report.to_jsonable()}
        text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    _write_output(text, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auxgmm",
                                     description="GMM estimation with auxiliary-sample recovery of missing outcomes")
    sub = parser.add_subparsers(dest="command", required=True)

    p_est = sub.add_parser("estimate", help="fit estimators described by a JSON config")
    p_est.add_argument("--config", required=True)
    p_est.add_argument("--data")
    p_est.add_argument("--out")
    p_est.add_argument("--seed", type=int)
    p_est.add_argument("--format", choices=("json", "table"))
    p_est.set_defaults(func=_cmd_estimate)

    p_b = sub.add_parser("bounds", help="estimate every applicable variance bound")
    p_b.add_argument("--config", required=True)
    p_b.add_argument("--data")
    p_b.add_argument("--out")
    p_b.add_argument("--seed", type=int)
    p_b.set_defaults(func=_cmd_bounds)

    p_sim = sub.add_parser("simulate", help="Monte Carlo study on a named preset")
    p_sim.add_argument("--preset", required=True)
    p_sim.add_argument("--n", type=int, default=2000)
    p_sim.add_argument("--reps", type=int, default=100)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--case", default="verify-out")
    p_sim.add_argument("--estimators")
    p_sim.add_argument("--threads", type=int)
    p_sim.add_argument("--out")
    p_sim.add_argument("--format", choices=("json", "table"), default="json")
    p_sim.set_defaults(func=_cmd_simulate)
    return parser


def _error_json(kind: str, exc: Exception) -> None:
    sys.stderr.write(json.dumps({"error": {"type": type(exc).__name__,
                                           "kind": kind,
                                           "message": str(exc)}}) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (FileNotFoundError, ParseError, MalformedRow) as exc:
        _error_json("data", exc)
        return 2
    except (SpecError, UnsupportedSpec, KeyError, ValueError, json.JSONDecodeError) as exc:
        _error_json("usage", exc)
        return 1
    except AuxGMMError as exc:
        _error_json("numerical", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
