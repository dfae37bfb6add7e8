"""Batch harness: run simulations and studies described by a JSON config file.

Four subcommands share a common shape::

    nonholo simulate --config run.json [--out DIR]
    nonholo converge --config run.json [--out DIR] [--eps-list a,b,c] [--jobs K]
    nonholo embed    --config run.json [--out DIR]
    nonholo interp   --config run.json [--out DIR]

Exit codes: 0 on success, 2 on configuration problems, 3 on numerical
failure at runtime (whatever rows were computed are still written).
Output data files are deterministic: identical configs produce
byte-identical CSVs, and timing lives only in the JSON summaries.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys as _sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import exprdiff
from .discrete import (
    ADMISSIBLE_TOL,
    NewtonError,
    NodePolicy,
    deformed_admissible_velocity,
    run_integrator,
)
from .embed import (
    exact_step_map,
    interpolate_in_D,
    reduced_problem,
    reduced_step_map,
    verify_embedding,
)
from .flow import BlowUpError, integrate, reference_flow
from .reduction import (
    DeformedConstraint,
    deformed_field,
    deformed_lambda,
    deformed_residual,
    lambda_continuous,
    reduce_state,
)
from .system import (
    MechanicalSystem,
    StatePoint,
    SystemError,
    constraint_residual,
    derive_connection,
    project_velocity,
)

INTEGRATORS = ("reference", "vni10", "vni20", "original_node", "dla")

_BUILTIN_FIELDS = {
    "nonholonomic_particle": {
        "names": ["x", "y", "z"],
        "M": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        "V": "0",
        "mu": [["-y", "0", "1"]],
    },
}


class ConfigError(Exception):
    """The config file cannot be turned into a valid run."""


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


def build_system(desc) -> MechanicalSystem:
    """Construct the mechanical system named or described by the config.

    A bare string picks a builtin.  An object either describes a system in
    full ({names, M, V, mu}) or starts from {"builtin": name} and overrides
    individual fields.
    """
    if isinstance(desc, str):
        desc = {"builtin": desc}
    if not isinstance(desc, dict):
        raise ConfigError("'system' must be a builtin name or an object")
    fields = {}
    if "builtin" in desc:
        name = desc["builtin"]
        if name not in _BUILTIN_FIELDS:
            raise ConfigError(
                f"unknown builtin system {name!r}; available: {sorted(_BUILTIN_FIELDS)}"
            )
        fields.update(_BUILTIN_FIELDS[name])
    for key in ("names", "M", "V", "mu"):
        if key in desc:
            fields[key] = desc[key]
    unknown = set(desc) - {"builtin", "names", "M", "V", "mu", "n"}
    if unknown:
        raise ConfigError(f"unknown system fields: {sorted(unknown)}")
    missing = {"names", "M", "V", "mu"} - set(fields)
    if missing:
        raise ConfigError(f"system description is missing {sorted(missing)}")
    if "n" in desc and desc["n"] != len(fields["names"]):
        raise ConfigError(
            f"system.n = {desc['n']} does not match {len(fields['names'])} names"
        )
    try:
        return MechanicalSystem(
            names=fields["names"],
            M=np.asarray(fields["M"], dtype=float),
            V=fields["V"],
            mu=fields["mu"],
        )
    except (SystemError, exprdiff.ExprSyntaxError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid system: {exc}") from None


def _vector(cfg: dict, key: str, n: int) -> np.ndarray:
    if key not in cfg:
        raise ConfigError(f"config is missing {key!r}")
    arr = np.asarray(cfg[key], dtype=float)
    if arr.shape != (n,):
        raise ConfigError(f"{key!r} must have {n} components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{key!r} contains non-finite values")
    return arr


def _initial_state(cfg: dict, sys: MechanicalSystem, residual=None) -> StatePoint:
    q = _vector(cfg, "q", sys.n)
    v = _vector(cfg, "v", sys.n)
    x = StatePoint(q, v)
    if cfg.get("project_initial", False):
        return StatePoint(q, project_velocity(sys, q, v))
    res = (residual or constraint_residual)(sys, x)
    if sys.m and np.max(np.abs(res)) > ADMISSIBLE_TOL:
        raise ConfigError(
            "initial velocity is not admissible "
            f"(residual {np.max(np.abs(res)):.6g}); set project_initial to repair it"
        )
    return x


def _steps_and_eps(cfg: dict) -> tuple[float, int]:
    if "eps" not in cfg:
        raise ConfigError("config is missing 'eps'")
    eps = float(cfg["eps"])
    if not (eps > 0.0 and np.isfinite(eps)):
        raise ConfigError(f"eps must be positive and finite, got {cfg['eps']!r}")
    has_n, has_t = "N" in cfg, "T" in cfg
    if has_n == has_t:
        raise ConfigError("give exactly one of 'N' (step count) or 'T' (end time)")
    if has_n:
        N = int(cfg["N"])
        if N < 0 or N != cfg["N"]:
            raise ConfigError(f"N must be a non-negative integer, got {cfg['N']!r}")
    else:
        T = float(cfg["T"])
        if not (T > 0.0 and np.isfinite(T)):
            raise ConfigError(f"T must be positive and finite, got {cfg['T']!r}")
        N = max(1, round(T / eps))
    return eps, N


def _nodes_policy(cfg: dict) -> NodePolicy:
    raw = str(cfg.get("nodes", "redefined")).upper()
    if raw not in NodePolicy.__members__:
        raise ConfigError("'nodes' must be 'redefined' or 'original'")
    return NodePolicy[raw]


def _check_beta(cfg: dict, integ: str) -> None:
    if integ == "dla" and cfg.get("beta") is None:
        raise ConfigError("the two-point scheme needs 'beta' in the config")
    if integ != "dla" and cfg.get("beta") is not None:
        raise ConfigError(f"'beta' only applies to the two-point scheme, not {integ!r}")


def _deformation(cfg: dict, sys: MechanicalSystem) -> DeformedConstraint | None:
    if "deformation" not in cfg:
        return None
    desc = cfg["deformation"]
    if not isinstance(desc, dict) or set(desc) - {"g", "delta"}:
        raise ConfigError("'deformation' must be an object with keys 'g' and 'delta'")
    g = desc.get("g")
    if not isinstance(g, list) or len(g) != sys.m:
        raise ConfigError(f"deformation.g must list {sys.m} expressions")
    try:
        return DeformedConstraint(
            g=[exprdiff.parse(text) for text in g], delta=float(desc.get("delta", 0.0))
        )
    except exprdiff.ExprSyntaxError as exc:
        raise ConfigError(f"bad deformation expression: {exc}") from None


# --- simulate -------------------------------------------------------------------


def cmd_simulate(cfg: dict, out_dir: str) -> int:
    sys = build_system(cfg.get("system", "nonholonomic_particle"))
    integ = cfg.get("integrator", "reference")
    if integ not in INTEGRATORS:
        raise ConfigError(f"unknown integrator {integ!r}; pick one of {INTEGRATORS}")
    eps, N = _steps_and_eps(cfg)
    policy = _nodes_policy(cfg)
    _check_beta(cfg, integ)
    dc = _deformation(cfg, sys)
    if dc is not None and integ != "reference":
        raise ConfigError("deformed constraints only apply to the reference integrator")
    x0 = _initial_state(
        cfg, sys, residual=(lambda s, x: deformed_residual(s, dc, x)) if dc else None
    )
    if integ == "original_node" and cfg.get("project_initial", False):
        # this scheme preserves the deformed set, so repair onto that instead
        x0 = StatePoint(x0.q, deformed_admissible_velocity(sys, x0.q, x0.v, eps))

    csv_path = os.path.join(out_dir, cfg.get("output", "trajectory.csv"))
    started = time.perf_counter()
    try:
        if integ == "reference":
            kwargs = {"project_each_step": bool(cfg.get("project_each_step", False))}
            if dc is not None:
                kwargs["field"] = lambda x: deformed_field(sys, dc, x)
                kwargs["lambda_fn"] = lambda s, x: deformed_lambda(s, dc, x)
                kwargs["residual_fn"] = lambda s, x: deformed_residual(s, dc, x)
            traj = integrate(sys, x0, eps * N, eps, **kwargs)
        else:
            traj = run_integrator(
                sys, integ, x0, eps, N, beta=cfg.get("beta"), policy=policy
            )
    except (BlowUpError, NewtonError, SystemError) as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None:
            partial.to_csv(csv_path)
        print(f"error: {exc}", file=_sys.stderr)
        return 3

    traj.to_csv(csv_path)
    summary = {
        "rows": len(traj),
        "eps": eps,
        "steps": N,
        "integrator": integ,
        "energy_min": float(np.min(traj.energies)),
        "energy_max": float(np.max(traj.energies)),
        "energy_drift": float(np.max(np.abs(traj.energies - traj.energies[0]))),
        "max_abs_residual": float(np.max(np.abs(traj.residuals))) if sys.m else 0.0,
        "max_abs_lambda": float(np.max(np.abs(traj.lambdas))) if sys.m else 0.0,
        "csv": os.path.basename(csv_path),
        "runtime_seconds": time.perf_counter() - started,
    }
    _write_json(os.path.join(out_dir, cfg.get("summary", "summary.json")), summary)
    return 0


# --- converge -------------------------------------------------------------------


@dataclass
class StudyResult:
    """Per-step-size endpoint errors and the fitted consistency orders."""

    eps: list[float]
    state_error: list[float]
    lambda_error: list[float]
    state_slope: float | None
    lambda_slope: float | None
    failures: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "eps": self.eps,
            "state_error": self.state_error,
            "lambda_error": self.lambda_error,
            "state_slope": self.state_slope,
            "lambda_slope": self.lambda_slope,
            "failures": self.failures,
        }


def _endpoint_errors(args) -> tuple[float, float, float]:
    """Worker: run one step size and return (eps, state error, lambda error)."""
    cfg, eps, T, oracle_concat, oracle_lam = args
    sys = build_system(cfg.get("system", "nonholonomic_particle"))
    x0 = _initial_state(cfg, sys)
    integ = cfg.get("integrator", "vni10")
    N = max(1, round(T / eps))
    if integ == "reference":
        traj = integrate(sys, x0, T, eps)
        end = traj.states[-1]
        lam_end = traj.lambdas[-1]
    else:
        dtraj = run_integrator(
            sys, integ, x0, eps, N, beta=cfg.get("beta"), policy=_nodes_policy(cfg)
        )
        end = dtraj.states[-1]
        lam_end = dtraj.lambdas[-1]
    state_err = float(np.max(np.abs(end - oracle_concat)))
    lam_err = float(np.max(np.abs(lam_end - oracle_lam))) if len(oracle_lam) else 0.0
    return eps, state_err, lam_err


def convergence_study(cfg: dict, eps_list: list[float], jobs: int = 1) -> StudyResult:
    """Endpoint errors against one high-resolution oracle, across step sizes."""
    if len(eps_list) < 4:
        raise ConfigError("a convergence study needs at least 4 step sizes")
    if any(not (e > 0.0 and np.isfinite(e)) for e in eps_list):
        raise ConfigError("step sizes must be positive and finite")
    sys = build_system(cfg.get("system", "nonholonomic_particle"))
    integ = cfg.get("integrator", "vni10")
    if integ not in INTEGRATORS:
        raise ConfigError(f"unknown integrator {integ!r}; pick one of {INTEGRATORS}")
    _check_beta(cfg, integ)  # surface pairing errors before forking workers
    _nodes_policy(cfg)
    x0 = _initial_state(cfg, sys)
    if "T" not in cfg:
        raise ConfigError("a convergence study needs 'T'")
    T = float(cfg["T"])
    if not (T > 0.0 and np.isfinite(T)):
        raise ConfigError(f"T must be positive and finite, got {cfg['T']!r}")

    oracle = reference_flow(sys, x0, T)
    oracle_concat = oracle.concat()
    oracle_lam = lambda_continuous(sys, oracle, check=False)

    ordered = sorted(eps_list, reverse=True)
    tasks = [(cfg, e, T, oracle_concat, oracle_lam) for e in ordered]
    rows: list[tuple[float, float, float]] = []
    failures: list[dict] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_try_endpoint, tasks))
    else:
        outcomes = [_try_endpoint(t) for t in tasks]
    for eps, result in zip(ordered, outcomes):
        if isinstance(result, str):
            failures.append({"eps": eps, "error": result})
        else:
            rows.append(result)

    eps_ok = [r[0] for r in rows]
    state = [r[1] for r in rows]
    lam = [r[2] for r in rows]
    state_slope = lambda_slope = None
    if len(rows) >= 4:
        logs = np.log(eps_ok)
        if min(state) > 0.0:
            state_slope = float(np.polyfit(logs, np.log(state), 1)[0])
        if sys.m and min(lam) > 0.0:
            lambda_slope = float(np.polyfit(logs, np.log(lam), 1)[0])
    return StudyResult(eps_ok, state, lam, state_slope, lambda_slope, failures)


def _try_endpoint(args):
    try:
        return _endpoint_errors(args)
    except (BlowUpError, NewtonError, SystemError) as exc:
        return f"{type(exc).__name__}: {exc}"


def cmd_converge(cfg: dict, out_dir: str, eps_list: list[float] | None, jobs: int) -> int:
    if eps_list is None:
        eps_list = cfg.get("eps_list")
    if eps_list is None:
        raise ConfigError("give step sizes via 'eps_list' in the config or --eps-list")
    eps_list = [float(e) for e in eps_list]
    started = time.perf_counter()
    study = convergence_study(cfg, eps_list, jobs=jobs)

    csv_path = os.path.join(out_dir, cfg.get("output", "convergence.csv"))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["eps", "state_error", "lambda_error"])
        for row in zip(study.eps, study.state_error, study.lambda_error):
            writer.writerow([format(val, ".17g") for val in row])

    payload = study.as_dict()
    payload["runtime_seconds"] = time.perf_counter() - started
    _write_json(os.path.join(out_dir, cfg.get("summary", "study.json")), payload)
    if not study.eps:
        print("error: every step size failed", file=_sys.stderr)
        return 3
    return 0


# --- embed ----------------------------------------------------------------------


def cmd_embed(cfg: dict, out_dir: str) -> int:
    sys = build_system(cfg.get("system", "nonholonomic_particle"))
    if sys.m == 0:
        raise ConfigError("the embedding report needs a constrained system")
    q0 = _vector(cfg, "q0", sys.n) if "q0" in cfg else _vector(cfg, "q", sys.n)
    try:
        split = derive_connection(sys, q0=q0)
    except SystemError as exc:
        raise ConfigError(f"cannot split coordinates at q0: {exc}") from None
    scheme = cfg.get("scheme", "vni10")
    problem = reduced_problem(sys, split, base_step=float(cfg.get("base_step", 2e-3)))
    if scheme == "exact":
        phi = exact_step_map(problem, p=int(cfg.get("p", 1)))
    else:
        try:
            phi = reduced_step_map(sys, split, scheme)
        except SystemError as exc:
            raise ConfigError(str(exc)) from None
    if "eps" not in cfg:
        raise ConfigError("config is missing 'eps'")
    eps = float(cfg["eps"])
    if not (eps > 0.0 and np.isfinite(eps)):
        raise ConfigError(f"eps must be positive and finite, got {cfg['eps']!r}")

    pts_cfg = cfg.get("points")
    if not isinstance(pts_cfg, list) or not pts_cfg:
        raise ConfigError("'points' must be a non-empty list of {q, v} states")
    points = []
    for i, entry in enumerate(pts_cfg):
        if not isinstance(entry, dict):
            raise ConfigError(f"points[{i}] must be an object with 'q' and 'v'")
        x = _initial_state({**entry, "project_initial": cfg.get("project_initial", False)}, sys)
        try:
            points.append(reduce_state(sys, split, x).concat())
        except SystemError as exc:
            raise ConfigError(f"points[{i}]: {exc}") from None

    started = time.perf_counter()
    try:
        report = verify_embedding(
            problem,
            phi,
            eps,
            np.asarray(points),
            t_frac=float(cfg.get("t_frac", 0.37)),
            order_levels=int(cfg.get("order_levels", 5)),
        )
    except (NewtonError, SystemError, BlowUpError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 3
    report["scheme"] = scheme
    report["eps"] = eps
    report["runtime_seconds"] = time.perf_counter() - started
    _write_json(os.path.join(out_dir, cfg.get("summary", "embedding.json")), report)
    return 0


# --- interp ---------------------------------------------------------------------


def cmd_interp(cfg: dict, out_dir: str) -> int:
    sys = build_system(cfg.get("system", "nonholonomic_particle"))
    if sys.m == 0:
        raise ConfigError("interpolation needs a constrained system")
    for key in ("x0", "x1"):
        if not isinstance(cfg.get(key), dict):
            raise ConfigError(f"config needs {key!r} as an object with 'q' and 'v'")
    a = _initial_state(cfg["x0"], sys)
    b = _initial_state(cfg["x1"], sys)
    if "eps" not in cfg:
        raise ConfigError("config is missing 'eps'")
    eps = float(cfg["eps"])
    if not (eps > 0.0 and np.isfinite(eps)):
        raise ConfigError(f"eps must be positive and finite, got {cfg['eps']!r}")
    samples = int(cfg.get("samples", 101))
    if samples < 2:
        raise ConfigError("'samples' must be at least 2")
    q0 = _vector(cfg, "q0", sys.n) if "q0" in cfg else a.q
    try:
        split = derive_connection(sys, q0=q0)
        curve = interpolate_in_D(sys, split, a, b, eps)
    except SystemError as exc:
        raise ConfigError(str(exc)) from None

    csv_path = os.path.join(out_dir, cfg.get("output", "interpolation.csv"))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = (
            ["t"]
            + [f"q_{i + 1}" for i in range(sys.n)]
            + [f"v_{i + 1}" for i in range(sys.n)]
            + [f"residual_{a_ + 1}" for a_ in range(sys.m)]
        )
        writer.writerow(header)
        for t in np.linspace(0.0, eps, samples):
            x = curve(float(t))
            res = constraint_residual(sys, x)
            writer.writerow(
                [format(float(t), ".17g")]
                + [format(val, ".17g") for val in x.q]
                + [format(val, ".17g") for val in x.v]
                + [format(val, ".17g") for val in res]
            )
    return 0


# --- entry point ----------------------------------------------------------------


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_eps_list(text: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"--eps-list must be comma-separated numbers, got {text!r}") from None
    if not values:
        raise ConfigError("--eps-list is empty")
    return values


def _default_jobs() -> int:
    raw = os.environ.get("NONHOLO_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nonholo",
        description="Simulate nonholonomic mechanical systems from a JSON config.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("simulate", "integrate one trajectory and write it as CSV"),
        ("converge", "measure endpoint error across step sizes"),
        ("embed", "report how closely a discrete map embeds into a flow"),
        ("interp", "sample the constrained interpolant between two states"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="path to the JSON run description")
        p.add_argument("--out", default=".", help="directory for CSV/JSON artifacts")
        if name == "converge":
            p.add_argument(
                "--eps-list",
                default=None,
                help="comma-separated step sizes, overriding the config",
            )
            p.add_argument(
                "--jobs",
                type=int,
                default=_default_jobs(),
                help="worker processes for per-step-size runs (env NONHOLO_JOBS)",
            )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if not isinstance(cfg, dict):
            raise ConfigError("config top level must be a JSON object")
        out_dir = args.out
        os.makedirs(out_dir, exist_ok=True)
        if args.command == "simulate":
            return cmd_simulate(cfg, out_dir)
        if args.command == "converge":
            eps_list = _parse_eps_list(args.eps_list) if args.eps_list else None
            return cmd_converge(cfg, out_dir, eps_list, max(1, args.jobs))
        if args.command == "embed":
            return cmd_embed(cfg, out_dir)
        return cmd_interp(cfg, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
