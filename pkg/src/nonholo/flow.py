"""Fixed-step time integration of the continuous dynamics.

Everything here is classic RK4 on a first-order field over the concatenated
state (q, v).  `integrate` drives a mechanical system and records multiplier,
residual and energy alongside the states; `flow_field` is the bare-bones
variant for an arbitrary autonomous field on R^d.  Reference solutions use a
step short enough that their own error sits far below anything the package
measures against them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .reduction import _lambda_raw, h_field
from .system import (
    MechanicalSystem,
    StatePoint,
    _state_view,
    constraint_residual,
    energy,
    project_velocity,
)

__all__ = [
    "BlowUpError",
    "Trajectory",
    "rk4_step",
    "integrate",
    "reference_flow",
    "flow_field",
    "REFERENCE_STEP",
]

BLOWUP_NORM = 1e8
REFERENCE_STEP = 1e-4


def rk4_step(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class Trajectory:
    """Sampled solution: row k holds the state after k steps of size h."""

    times: np.ndarray
    states: np.ndarray  # (K+1, 2n)
    lambdas: np.ndarray  # (K+1, m)
    residuals: np.ndarray  # (K+1, m)
    energies: np.ndarray  # (K+1,)
    n: int

    def state(self, k: int) -> StatePoint:
        return StatePoint(self.states[k, : self.n], self.states[k, self.n :])

    def __len__(self) -> int:
        return self.states.shape[0]

    def csv_rows(self):
        m = self.lambdas.shape[1]
        header = (
            ["t"]
            + [f"q_{i + 1}" for i in range(self.n)]
            + [f"v_{i + 1}" for i in range(self.n)]
            + [f"lambda_{a + 1}" for a in range(m)]
            + [f"residual_{a + 1}" for a in range(m)]
            + ["energy"]
        )
        yield header
        for k in range(len(self)):
            row = [
                self.times[k],
                *self.states[k],
                *self.lambdas[k],
                *self.residuals[k],
                self.energies[k],
            ]
            yield [format(val, ".17g") for val in row]

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerows(self.csv_rows())


class BlowUpError(RuntimeError):
    """Solution norm passed the blow-up threshold; carries the partial run."""

    def __init__(self, message: str, partial: Trajectory):
        super().__init__(message)
        self.partial = partial


def _truncate(traj: Trajectory, upto: int) -> Trajectory:
    return Trajectory(
        times=traj.times[:upto],
        states=traj.states[:upto],
        lambdas=traj.lambdas[:upto],
        residuals=traj.residuals[:upto],
        energies=traj.energies[:upto],
        n=traj.n,
    )


def integrate(
    sys: MechanicalSystem,
    x0: StatePoint,
    T: float,
    eps_ref: float,
    field: Callable[[StatePoint], np.ndarray] | None = None,
    project_each_step: bool = False,
    lambda_fn: Callable[[MechanicalSystem, StatePoint], np.ndarray] | None = None,
    residual_fn: Callable[[MechanicalSystem, StatePoint], np.ndarray] | None = None,
) -> Trajectory:
    """March the constrained dynamics from x0 to time T with RK4 steps ~eps_ref.

    The step count is K = max(1, round(T / eps_ref)) so the requested final
    time is hit exactly.  `field`, `lambda_fn` and `residual_fn` default to
    the plain constrained dynamics and can be swapped for the perturbed or
    deformed variants; they all receive `StatePoint`s.
    """
    if field is None:
        field = lambda x: h_field(sys, x)
    if lambda_fn is None:
        lambda_fn = _lambda_raw
    if residual_fn is None:
        residual_fn = constraint_residual

    K = max(1, abs(round(T / eps_ref))) if T else 0
    h = T / K if K else 0.0
    n = sys.n

    times = np.empty(K + 1)
    states = np.empty((K + 1, 2 * n))
    lambdas = np.empty((K + 1, sys.m))
    residuals = np.empty((K + 1, sys.m))
    energies = np.empty(K + 1)

    def record(k, t, x: StatePoint):
        times[k] = t
        states[k] = x.concat()
        lambdas[k] = lambda_fn(sys, x)
        residuals[k] = residual_fn(sys, x)
        energies[k] = energy(sys, x)

    f_concat = lambda arr: field(_state_view(arr[:n], arr[n:]))
    x = x0
    record(0, 0.0, x)
    for k in range(1, K + 1):
        nxt = rk4_step(f_concat, x.concat(), h)
        if not np.all(np.isfinite(nxt)) or np.linalg.norm(nxt) > BLOWUP_NORM:
            raise BlowUpError(
                f"solution blew up at t = {k * h:.6g}",
                _truncate(
                    Trajectory(times, states, lambdas, residuals, energies, n), k
                ),
            )
        q, v = nxt[:n], nxt[n:]
        if project_each_step:
            v = project_velocity(sys, q, v)
        x = StatePoint(q, v)
        record(k, k * h, x)
    return Trajectory(times, states, lambdas, residuals, energies, n)


def reference_flow(
    sys: MechanicalSystem,
    x0: StatePoint,
    t: float,
    field: Callable[[StatePoint], np.ndarray] | None = None,
) -> StatePoint:
    """Endpoint of the flow after time t (either sign), at reference accuracy."""
    if t == 0.0:
        return x0
    K = max(1, math.ceil(abs(t) / REFERENCE_STEP))
    traj = integrate(sys, x0, t, t / K, field=field)
    return traj.state(len(traj) - 1)


def flow_field(
    f: Callable[[np.ndarray], np.ndarray],
    z0: np.ndarray,
    t: float,
    base_step: float = REFERENCE_STEP,
) -> np.ndarray:
    """RK4 endpoint for an arbitrary autonomous field on R^d, any sign of t."""
    z = np.asarray(z0, dtype=float).copy()
    if t == 0.0:
        return z
    K = max(1, math.ceil(abs(t) / base_step))
    h = t / K
    for _ in range(K):
        z = rk4_step(f, z, h)
        if not np.all(np.isfinite(z)) or np.linalg.norm(z) > BLOWUP_NORM:
            raise BlowUpError("flow blew up", None)
    return z
