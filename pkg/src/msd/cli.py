"""Command line front end, one subcommand per analysis pipeline.

Every run is a pure function of its argv: all randomness sits behind
``--seed``, the worker cap (``--threads``, or the ``MSD_THREADS``
environment variable) never changes results, and JSON is emitted with
sorted keys, so identical invocations produce byte-identical output.

Exit codes: 0 on success, 1 for validation problems (bad flags, bad
system files, parameter windows violated), 2 for numeric failures
(explosions, iterations that ran out of budget). Errors are reported as
a single ``error: <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import expr as ex
from .bounds import (
    BoundsError,
    bounds_report,
    lower_bound,
    triangularize_paths,
    unitary_invariance_check,
)
from .dichotomy import (
    DichotomyError,
    dichotomy_surface,
    fit_envelope,
    fit_to_dict,
    pair_grid,
    predicted_exponent,
    uniform_witness,
)
from .engines import (
    EngineError,
    ExplosionError,
    MomentCurve,
    MomentSurface,
    NonPsdError,
    TimeGrid,
    curve_to_csv,
    curve_to_records,
    moment_ode,
    simulate_fundamental,
    surface_to_csv,
)
from .expr import ExprError
from .lyapunov import (
    LyapunovError,
    chi_estimate,
    duality_defect,
    regularity_estimate,
    spectrum,
)
from .model import (
    GALLERY_NAMES,
    LinearSde,
    ModelError,
    PerturbationSpec,
    PerturbedSde,
    from_dict,
    gallery,
    make_projector,
    to_dict,
)
from .numerics import NumericsError
from .perturb import (
    NonConvergenceError,
    PerturbError,
    check_condition_42,
    condition_to_dict,
    perron_instability,
    perron_to_dict,
    stability_experiment,
    stability_to_dict,
    voc_solve,
)

__all__ = ["build_parser", "dispatch", "main"]

# Numeric failures first: they subclass the validation errors below.
_NUMERIC_ERRORS = (ExplosionError, NonPsdError, NonConvergenceError)
_VALIDATION_ERRORS = (
    ModelError,
    EngineError,
    LyapunovError,
    BoundsError,
    DichotomyError,
    PerturbError,
    NumericsError,
    ExprError,
    OSError,
    json.JSONDecodeError,
)


class CliError(ValueError):
    """Flag combination that argparse alone cannot reject."""


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise CliError(message)


class _UsageError(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    """Argparse parser whose errors map to exit code 1, not 2."""

    def error(self, message):
        raise _UsageError(message, self.format_usage())


def _csv_floats(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated numbers, got {text!r}")
    return values


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_argument_group("common options")
    group.add_argument("--seed", type=int, default=0,
                       help="master RNG seed; all randomness derives from it (default 0)")
    group.add_argument("--threads", type=_positive_int, default=None,
                       help="worker cap, default MSD_THREADS or 1; results never depend on it")
    group.add_argument("--format", choices=("json", "csv"), default=None,
                       help="output format (default: csv for moments, json elsewhere)")
    group.add_argument("--output", metavar="PATH", default=None,
                       help="write results to PATH instead of stdout")
    return common


def _add_system_flag(parser, required: bool = True) -> None:
    parser.add_argument("--system", required=required, metavar="NAME_OR_FILE",
                        help="gallery name (see `msd example list`) or path to a "
                             "system JSON file with keys dim/params/A/G")


def build_parser() -> _Parser:
    parser = _Parser(prog="msd",
                     description="Mean-square dichotomy analysis for linear "
                                 "stochastic differential equations.")
    common = _common_parser()
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", required=True)

    p = sub.add_parser("example", parents=[common],
                       help="list the built-in systems or show one as JSON")
    p.add_argument("action", choices=("list", "show"))
    p.add_argument("--system", metavar="NAME", help="gallery name (for show)")

    p = sub.add_parser("moments", parents=[common],
                       help="second-moment curve E||Phi(t)||_F^2 of the fundamental matrix")
    _add_system_flag(p)
    p.add_argument("--t0", type=float, default=0.0, help="start time (default 0)")
    p.add_argument("--t1", type=float, required=True, help="end time")
    p.add_argument("--dt", type=float, default=1e-3, help="step size (default 1e-3)")
    p.add_argument("--method", choices=("ode", "mc"), default="ode",
                   help="exact moment ODE or Monte Carlo with stderr column (default ode)")
    p.add_argument("--paths", type=int, default=10_000,
                   help="Monte Carlo sample paths (default 10000)")

    p = sub.add_parser("lyapunov", parents=[common],
                       help="mean-square Lyapunov spectrum, optionally one vector's exponent")
    _add_system_flag(p)
    p.add_argument("--horizon", type=float, default=50.0,
                   help="estimation horizon (default 50)")
    p.add_argument("--method", choices=("ode", "mc"), default="ode")
    p.add_argument("--dt", type=float, default=1e-2, help="step size (default 1e-2)")
    p.add_argument("--paths", type=int, default=10_000)
    p.add_argument("--trials", type=int, default=None,
                   help="probe vectors for the spectrum (default: system dimension)")
    p.add_argument("--tolerance", type=float, default=0.05,
                   help="clustering tolerance for distinct exponents (default 0.05)")
    p.add_argument("--t-start", type=float, default=0.0, help="start time (default 0)")
    p.add_argument("--vector", type=_csv_floats, default=None, metavar="X1,X2,...",
                   help="also report this initial vector's exponent")
    p.add_argument("--epsilon", type=float, default=None,
                   help="also forecast the envelope rate chi +- epsilon")

    p = sub.add_parser("regularity", parents=[common],
                       help="regularity coefficient estimate plus integral exponent bounds")
    _add_system_flag(p)
    p.add_argument("--horizon", type=float, default=50.0,
                   help="exponent estimation horizon (default 50)")
    p.add_argument("--method", choices=("ode", "mc"), default="ode")
    p.add_argument("--dt", type=float, default=1e-2)
    p.add_argument("--paths", type=int, default=10_000)
    p.add_argument("--t-start", type=float, default=0.0)
    p.add_argument("--bound-horizon", type=float, default=1e4,
                   help="averaging horizon for the coefficient bounds (default 1e4)")

    p = sub.add_parser("fit", parents=[common],
                       help="sample a dichotomy surface and fit K e^{-alpha(t-s)+beta s}")
    _add_system_flag(p)
    p.add_argument("--s-values", type=_csv_floats, required=True, metavar="S1,S2,...",
                   help="starting times of the surface rows")
    p.add_argument("--deltas", type=_csv_floats, required=True, metavar="D1,D2,...",
                   help="gaps t-s sampled from each starting time")
    p.add_argument("--sense", choices=("stable", "unstable"), default="stable")
    p.add_argument("--rank", type=int, default=None,
                   help="leading-block projector rank (default: no projector)")
    p.add_argument("--method", choices=("auto", "ode", "mc"), default="auto")
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--alpha-max", type=float, default=None,
                   help="cap of the decay-rate lattice (default: data-driven)")
    p.add_argument("--beta-max", type=float, default=None,
                   help="cap of the nonuniformity lattice (default: data-driven)")
    p.add_argument("--lattice", type=int, default=200,
                   help="lattice points per parameter axis (default 200)")

    p = sub.add_parser("triangularize", parents=[common],
                       help="QR-triangularize a simulated flow and check norm invariance")
    _add_system_flag(p)
    p.add_argument("--t0", type=float, default=0.0)
    p.add_argument("--t1", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-2)
    p.add_argument("--paths", type=int, default=4)

    p = sub.add_parser("perturb", parents=[common],
                       help="falsify the smallness condition or run a stability experiment")
    _add_system_flag(p)
    p.add_argument("--mode", choices=("condition", "stability"), required=True)
    p.add_argument("--perturbation", choices=("power-clipped", "zero", "expr"),
                   default="power-clipped",
                   help="drift perturbation shape (default power-clipped); ignored when "
                        "--system is already a perturbed gallery entry")
    p.add_argument("--coef", type=float, default=1.0,
                   help="power-clipped coefficient (default 1)")
    p.add_argument("--power", type=float, default=3.0,
                   help="power-clipped growth degree (default 3)")
    p.add_argument("--clip", type=float, default=1.0,
                   help="power-clipped saturation radius (default 1)")
    p.add_argument("--f-entries", metavar="E1,E2,...",
                   help="drift expressions in t and u1..un (for --perturbation expr)")
    p.add_argument("--h-entries", metavar="E1,E2,...",
                   help="diffusion perturbation expressions (default: zero map)")
    p.add_argument("--c", type=float, default=9.0,
                   help="declared smallness constant (default 9)")
    p.add_argument("--q", type=float, default=2.0,
                   help="declared smallness exponent (default 2)")
    p.add_argument("--scale", type=float, default=None,
                   help="sampler scale (condition mode, required)")
    p.add_argument("--trials", type=int, default=1000,
                   help="falsifier trials (default 1000)")
    p.add_argument("--samples", type=int, default=8192,
                   help="Monte Carlo samples per falsifier trial (default 8192)")
    p.add_argument("--delta", type=float, default=0.01,
                   help="initial condition size (stability mode, default 0.01)")
    p.add_argument("--horizon", type=float, default=10.0,
                   help="stability simulation horizon (default 10)")
    p.add_argument("--paths", type=int, default=2000,
                   help="stability sample paths (default 2000)")
    p.add_argument("--dt", type=float, default=1e-3)

    p = sub.add_parser("perron", parents=[common],
                       help="instability pipeline for the oscillating two-block example")
    p.add_argument("--a", type=float, required=True)
    p.add_argument("--b", type=float, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--delta-window", type=float, default=0.01,
                   help="margin inside the parameter window (default 0.01)")
    p.add_argument("--horizon", type=float, default=10.0,
                   help="Monte Carlo horizon (default 10)")
    p.add_argument("--paths", type=int, default=400)
    p.add_argument("--dt", type=float, default=5e-3)

    sub.add_parser("selftest", parents=[common],
                   help="run the built-in acceptance battery (exit 2 if any check fails)")

    return parser


# ---------------------------------------------------------------------------
# System loading and serialization

def _load_system(spec: str):
    if spec in GALLERY_NAMES:
        return gallery(spec)
    if os.path.exists(spec):
        with open(spec, encoding="utf-8") as handle:
            return from_dict(json.load(handle))
    raise ModelError(f"unknown system '{spec}': not a gallery name "
                     f"({', '.join(GALLERY_NAMES)}) and not a readable file")


def _base_of(system) -> LinearSde:
    return system.base if isinstance(system, PerturbedSde) else system


def _spec_to_dict(spec: PerturbationSpec) -> dict:
    if spec.kind == "power_clipped":
        return {"kind": spec.kind, "coef": spec.coef, "power": spec.power,
                "clip": spec.clip}
    if spec.kind == "expr":
        return {"kind": spec.kind, "entries": [ex.serialize(e) for e in spec.entries]}
    return {"kind": spec.kind}


def _system_to_dict(system) -> dict:
    if isinstance(system, PerturbedSde):
        return {"base": to_dict(system.base), "c": system.c, "q": system.q,
                "f": _spec_to_dict(system.f), "h": _spec_to_dict(system.h)}
    return to_dict(system)


# ---------------------------------------------------------------------------
# Subcommand handlers; each returns (payload, format) where format is
# "json" for a dict payload or "csv" for pre-rendered text.

def _cmd_example(args):
    if args.action == "list":
        return {"systems": list(GALLERY_NAMES)}, "json"
    if not args.system:
        raise CliError("`example show` needs --system")
    return _system_to_dict(_load_system(args.system)), "json"


def _cmd_moments(args):
    _require(args.dt > 0.0, "--dt must be positive")
    _require(args.t1 > args.t0, "--t1 must exceed --t0")
    _require(args.paths >= 1, "--paths must be at least 1")
    system = _base_of(_load_system(args.system))
    if args.method == "ode":
        curve, _ = moment_ode(system, np.eye(system.dim), args.t0, args.t1, args.dt)
    else:
        grid = TimeGrid.spanning(args.t0, args.t1, args.dt)
        ens = simulate_fundamental(system, grid, args.paths, args.seed)
        sq = np.sum(ens.phi ** 2, axis=(2, 3))
        stderrs = (np.std(sq, axis=1, ddof=1) / math.sqrt(args.paths)
                   if args.paths > 1 else np.zeros(grid.count))
        curve = MomentCurve(ts=grid.times(), values=np.mean(sq, axis=1),
                            stderrs=stderrs)
    if (args.format or "csv") == "csv":
        return curve_to_csv(curve), "csv"
    return {"system": args.system, "method": args.method,
            "points": curve_to_records(curve)}, "json"


def _cmd_lyapunov(args):
    _require(args.dt > 0.0, "--dt must be positive")
    _require(args.paths >= 1, "--paths must be at least 1")
    system = _base_of(_load_system(args.system))
    trials = args.trials if args.trials is not None else system.dim
    est = spectrum(system, args.horizon, trials, method=args.method, dt=args.dt,
                   paths=args.paths, seed=args.seed, t_start=args.t_start,
                   tolerance=args.tolerance)
    payload = {
        "system": args.system,
        "horizon": args.horizon,
        "method": args.method,
        "spectrum": {
            "values": [float(v) for v in est.values],
            "multiplicities": [int(m) for m in est.multiplicities],
            "split_index": est.split_index,
            "tolerance": est.tolerance,
            "per_vector": [float(v) for v in est.per_vector],
        },
    }
    if args.vector is not None:
        chi = chi_estimate(system, np.asarray(args.vector), args.horizon,
                           method=args.method, dt=args.dt, paths=args.paths,
                           seed=args.seed, t_start=args.t_start)
        payload["chi"] = {
            "vector": [float(x) for x in args.vector],
            "chi": chi.chi,
            "stderr": chi.stderr,
            "window": [float(chi.window[0]), float(chi.window[1])],
        }
    if args.epsilon is not None:
        mode = "contraction" if est.split_index == len(est.values) else "dichotomy"
        pred = predicted_exponent(est, args.epsilon, mode=mode)
        payload["predicted"] = {
            "alpha": pred.alpha,
            "stable_rate": pred.stable_rate,
            "unstable_rate": pred.unstable_rate,
            "beta": pred.beta,
            "mode": pred.mode,
            "epsilon": pred.epsilon,
        }
    return payload, "json"


def _cmd_regularity(args):
    _require(args.dt > 0.0, "--dt must be positive")
    _require(args.paths >= 1, "--paths must be at least 1")
    system = _base_of(_load_system(args.system))
    eye = np.eye(system.dim)
    reg = regularity_estimate(system, [(eye, eye)], args.horizon,
                              method=args.method, dt=args.dt, paths=args.paths,
                              seed=args.seed, t_start=args.t_start)
    return {
        "system": args.system,
        "horizon": args.horizon,
        "method": args.method,
        "regularity": {
            "gamma_upper_estimate": reg.gamma_upper_estimate,
            "kind": reg.kind,
            "per_pair_max": [float(v) for v in reg.per_pair_max],
        },
        "bounds": bounds_report(system, args.bound_horizon),
    }, "json"


def _cmd_fit(args):
    _require(args.dt > 0.0, "--dt must be positive")
    _require(args.paths >= 1, "--paths must be at least 1")
    _require(args.lattice >= 2, "--lattice needs at least 2 points")
    system = _base_of(_load_system(args.system))
    pairs = pair_grid(args.s_values, args.deltas, args.sense)
    projector = make_projector(system.dim, args.rank) if args.rank is not None else None
    surface = dichotomy_surface(system, projector, pairs, method=args.method,
                                dt=args.dt, paths=args.paths, seed=args.seed)
    if args.format == "csv":
        return surface_to_csv(surface), "csv"
    fit = fit_envelope(surface, rank=args.rank, alpha_max=args.alpha_max,
                       beta_max=args.beta_max, lattice=args.lattice)
    witness = None
    if np.unique(np.asarray(surface.ss)).size >= 2:
        wit = uniform_witness(surface, fit)
        witness = {
            "s_values": [float(s) for s in wit.s_values],
            "k_u": [float(k) for k in wit.k_u],
            "ratio": wit.ratio,
            "flag": wit.flag,
            "alpha": wit.alpha,
        }
    return {
        "system": args.system,
        "sense": args.sense,
        "pairs": len(pairs),
        "fit": fit_to_dict(fit),
        "witness": witness,
    }, "json"


def _cmd_triangularize(args):
    system = _base_of(_load_system(args.system))
    grid = TimeGrid.spanning(args.t0, args.t1, args.dt)
    ens = simulate_fundamental(system, grid, args.paths, args.seed)
    result = triangularize_paths(ens)
    invariance = unitary_invariance_check(ens, result)
    return {
        "system": args.system,
        "nodes": invariance.nodes,
        "paths": ens.paths,
        "max_orthogonality_defect": result.max_orthogonality_defect,
        "max_lower_magnitude": result.max_lower_magnitude,
        "max_reconstruction_error": result.max_reconstruction_error,
        "invariance": {
            "max_column_norm_gap": invariance.max_column_norm_gap,
            "max_rotated_norm_gap": invariance.max_rotated_norm_gap,
            "max_trace_gap": invariance.max_trace_gap,
        },
    }, "json"


def _perturbation_from_flags(args) -> PerturbationSpec:
    kind = args.perturbation.replace("-", "_")
    if kind == "zero":
        return PerturbationSpec.zero()
    if kind == "power_clipped":
        return PerturbationSpec.power_clipped(args.coef, args.power, args.clip)
    if not args.f_entries:
        raise CliError("--perturbation expr needs --f-entries")
    return PerturbationSpec.exprs(args.f_entries.split(","))


def _cmd_perturb(args):
    _require(args.dt > 0.0, "--dt must be positive")
    _require(args.samples >= 2, "--samples must be at least 2")
    loaded = _load_system(args.system)
    if isinstance(loaded, PerturbedSde):
        psys = loaded
    else:
        h = (PerturbationSpec.exprs(args.h_entries.split(","))
             if args.h_entries else PerturbationSpec.zero())
        psys = PerturbedSde(loaded, _perturbation_from_flags(args), h,
                            c=args.c, q=args.q)
    if args.mode == "condition":
        if args.scale is None:
            raise CliError("condition mode needs --scale")
        report = check_condition_42(psys, args.scale, args.trials,
                                    seed=args.seed, samples=args.samples)
        payload = {"mode": "condition", "system": args.system}
        payload.update(condition_to_dict(report))
        return payload, "json"
    report = stability_experiment(psys, args.delta, args.horizon, args.paths,
                                  args.seed, dt=args.dt)
    payload = {"mode": "stability", "system": args.system}
    payload.update(stability_to_dict(report))
    return payload, "json"


def _cmd_perron(args):
    report = perron_instability(args.a, args.b, args.lam,
                                delta_window=args.delta_window,
                                horizon=args.horizon, paths=args.paths,
                                seed=args.seed, dt=args.dt)
    return perron_to_dict(report), "json"


# ---------------------------------------------------------------------------
# Selftest battery

def _selftest_checks(seed: int) -> list[dict]:
    checks = []

    def record(name: str, value: float, bound: float) -> None:
        checks.append({"name": name, "value": float(value), "bound": float(bound),
                       "pass": bool(value <= bound)})

    gbm = gallery("gbm")
    curve, _ = moment_ode(gbm, np.eye(1), 0.0, 1.0, 1e-3)
    record("moment-oracle", abs(curve.values[-1] / math.exp(-1.75) - 1.0), 1e-6)

    chi = chi_estimate(gbm, [1.0], 50.0)
    record("chi-scalar", abs(chi.chi + 1.75), 0.01)

    est = spectrum(gallery("diag-2x2"), 50.0, 2)
    record("spectrum-pair",
           max(abs(est.values[0] + 3.91), abs(est.values[1] + 1.96)), 0.05)

    dual = duality_defect(gbm, np.eye(1), np.eye(1), 50.0)
    record("duality-scalar", abs(float(dual.sums[0]) - 1.0), 0.02)

    ss, ts, values = [], [], []
    for s in (0.5, 1.0, 2.0):
        for gap in (0.0, 1.0, 2.0, 4.0):
            ss.append(s)
            ts.append(s + gap)
            values.append(math.exp(-2.0 * gap))
    surface = MomentSurface(ss=np.array(ss), ts=np.array(ts),
                            values=np.array(values), stderrs=None, sense="stable")
    fit = fit_envelope(surface)
    record("envelope-lattice",
           max(abs(fit.k - 1.0), abs(fit.alpha - 2.0), fit.beta), 0.05)

    ens = simulate_fundamental(gallery("triangular-2x2"),
                               TimeGrid.spanning(0.0, 0.25, 1e-2), 4, seed)
    tri = triangularize_paths(ens)
    record("triangular-residuals",
           max(tri.max_orthogonality_defect, tri.max_lower_magnitude), 1e-7)
    record("triangular-reconstruction", tri.max_reconstruction_error, 1e-6)

    oscillating = LinearSde.from_strings(
        1, [["-1 - (sin(log(t)) + cos(log(t)))"]], [["0"]])
    record("bound-oscillating", abs(lower_bound(oscillating, 1e5) - 4.0), 0.3)

    psys = PerturbedSde(gbm, PerturbationSpec.power_clipped(1.0, 3.0, 1.0),
                        PerturbationSpec.zero(), c=9.0, q=2.0)
    falsifier = check_condition_42(psys, 0.3, 100, seed=seed)
    record("falsifier-consistent", falsifier.max_ratio, 1.0)

    # The zero perturbation must reproduce the linear flow bitwise.
    zero = PerturbedSde(gbm, PerturbationSpec.zero(), PerturbationSpec.zero(),
                        c=9.0, q=2.0)
    ens = simulate_fundamental(gbm, TimeGrid.spanning(0.0, 0.5, 1e-3), 2, seed)
    sol = voc_solve(zero, [1.0], ens, 0)
    reference = np.einsum("kij,j->ki", ens.phi[:, 0], np.array([1.0]))
    record("voc-zero-perturbation", float(np.max(np.abs(sol.values - reference))), 0.0)

    return checks


def _cmd_selftest(args):
    checks = _selftest_checks(args.seed)
    status = "ok" if all(c["pass"] for c in checks) else "fail"
    return {"seed": args.seed, "status": status, "checks": checks}, "json"


_HANDLERS = {
    "example": _cmd_example,
    "moments": _cmd_moments,
    "lyapunov": _cmd_lyapunov,
    "regularity": _cmd_regularity,
    "fit": _cmd_fit,
    "triangularize": _cmd_triangularize,
    "perturb": _cmd_perturb,
    "perron": _cmd_perron,
    "selftest": _cmd_selftest,
}

# Subcommands whose only output shape is JSON.
_JSON_ONLY = frozenset(_HANDLERS) - {"moments", "fit"}


def _resolve_threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    raw = os.environ.get("MSD_THREADS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise CliError(f"MSD_THREADS must be an integer, got {raw!r}")
    if value < 1:
        raise CliError(f"MSD_THREADS must be positive, got {value}")
    return value


def _emit(text: str, output: str | None) -> None:
    if output is None:
        sys.stdout.write(text)
        return
    with open(output, "w", encoding="utf-8", newline="") as handle:
        handle.write(text)


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        sys.stderr.write(err.usage)
        sys.stderr.write(f"error: validation: {err}\n")
        return 1
    try:
        _resolve_threads(args)
        if args.format == "csv" and args.command in _JSON_ONLY:
            raise CliError(f"`{args.command}` emits JSON only")
        payload, kind = _HANDLERS[args.command](args)
    except _NUMERIC_ERRORS as err:
        sys.stderr.write(f"error: numeric: {err}\n")
        return 2
    except CliError as err:
        sys.stderr.write(f"error: validation: {err}\n")
        return 1
    except _VALIDATION_ERRORS as err:
        sys.stderr.write(f"error: validation: {err}\n")
        return 1
    if kind == "csv":
        _emit(payload, args.output)
    else:
        _emit(json.dumps(payload, sort_keys=True, indent=2) + "\n", args.output)
    if args.command == "selftest" and payload["status"] != "ok":
        sys.stderr.write("error: numeric: selftest found failing checks\n")
        return 2
    return 0


def main(argv=None) -> int:
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
