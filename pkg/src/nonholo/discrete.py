"""Variational-style one-step schemes that keep velocities admissible.

Three families live here, all built from the same ingredients:

* ``vni10_step`` / ``vni20_step`` advance a node (q~, v) while enforcing
  mu(q~_{k+1}) v_{k+1} = 0 at the new node -- explicitly at first order,
  through a small Newton solve at second order.
* ``original_node_step`` enforces the constraint at a midpoint
  configuration instead; the scheme then conserves the *deformed* residual
  mu(q - eps/2 v) v, and its admissible set is an O(eps) deformation of D.
* ``dla_step`` is the two-point form: given consecutive configurations
  (q_{k-1}, q_k) it produces q_{k+1} from the discrete Euler-Lagrange
  equations of L_d = eps L(rho(x, y)), with the constraint evaluated at the
  node image of the finite-difference map rho.

A ``FiniteDifferenceMap`` with parameter beta in [0, 1] fixes how a pair of
configurations is read as a point of TQ.  Redefining the nodes through the
map makes beta = 0 reproduce the first-order scheme and beta = 1/2 the
second-order one, step for step; keeping the original endpoint nodes
instead reproduces the midpoint-constraint scheme's behaviour.

Multipliers are always reported in the O(1) normalization of the
continuous reaction force, so they can be compared directly against
`lambda_continuous` along a reference solution.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .reduction import _lambda_raw
from .system import MechanicalSystem, StatePoint, SystemError, energy

__all__ = [
    "FiniteDifferenceMap",
    "NodePolicy",
    "NewtonError",
    "newton_solve",
    "DiscreteNonholonomicSystem",
    "StepResult",
    "DlaResult",
    "vni10_step",
    "vni20_step",
    "original_node_step",
    "deformed_admissible_velocity",
    "dla_step",
    "DiscreteTrajectory",
    "run_integrator",
]

NEWTON_TOL = 1e-12
ADMISSIBLE_TOL = 1e-10
REGULARITY_COND_LIMIT = 1e12


class NewtonError(RuntimeError):
    """The nonlinear step equations did not converge."""


def newton_solve(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    u0: np.ndarray,
    tol: float = NEWTON_TOL,
    max_iter: int = 30,
) -> tuple[np.ndarray, int]:
    """Plain Newton iteration with an exact Jacobian; returns (root, iterations)."""
    u = np.asarray(u0, dtype=float).copy()
    for it in range(max_iter):
        r = residual(u)
        if np.max(np.abs(r)) <= tol:
            return u, it
        try:
            du = np.linalg.solve(jacobian(u), -r)
        except np.linalg.LinAlgError:
            raise NewtonError("singular Jacobian in step equations") from None
        u = u + du
        if not np.all(np.isfinite(u)):
            raise NewtonError("step equations diverged to non-finite values")
    raise NewtonError(f"no convergence after {max_iter} Newton iterations")


@dataclass(frozen=True)
class FiniteDifferenceMap:
    """rho(x, y) = ((1 - beta) x + beta y, (y - x) / eps), a map Q x Q -> TQ."""

    beta: float
    eps: float

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise SystemError("beta must lie in [0, 1]")
        if self.eps <= 0.0:
            raise SystemError("eps must be positive")

    def forward(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (1.0 - self.beta) * x + self.beta * y, (y - x) / self.eps

    def point(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (1.0 - self.beta) * x + self.beta * y

    def inverse(self, q: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        step = self.eps * v
        return q - self.beta * step, q + (1.0 - self.beta) * step


class NodePolicy(Enum):
    """How a configuration pair is reported as a node of TQ."""

    REDEFINED = "redefined"  # node = rho(q_{k-1}, q_k)
    ORIGINAL = "original"  # node = (q_k, (q_k - q_{k-1}) / eps)


@dataclass(frozen=True)
class DiscreteNonholonomicSystem:
    """A mechanical system discretized through a finite-difference map."""

    sys: MechanicalSystem
    rho: FiniteDifferenceMap

    def lagrangian_d(self, x: np.ndarray, y: np.ndarray) -> float:
        q, v = self.rho.forward(x, y)
        return self.rho.eps * (0.5 * v @ self.sys.M @ v - self.sys.v_at(q))

    def phi_d(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Discrete constraint, scaled so that its y-derivative is O(1)."""
        q = self.rho.point(x, y)
        return -(self.sys.mu_at(q) @ (y - x))

    def phi_d_jac_y(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        q = self.rho.point(x, y)
        dmu = self.sys.mu_jac_at(q)
        return -self.rho.beta * np.einsum("aij,i->aj", dmu, y - x) - self.sys.mu_at(q)

    def regularity_matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Block matrix whose invertibility makes the implicit step well posed."""
        sys, eps, beta = self.sys, self.rho.eps, self.rho.beta
        n, m = sys.n, sys.m
        q = self.rho.point(x, y)
        out = np.zeros((n + m, n + m))
        out[:n, :n] = -(1.0 / eps) * sys.M - eps * beta * (1.0 - beta) * sys.hess_v_at(q)
        out[:n, n:] = sys.mu_at(x).T
        out[n:, :n] = self.phi_d_jac_y(x, y)
        return out

    def check_regularity(self, x: np.ndarray, y: np.ndarray) -> float:
        cond = float(np.linalg.cond(self.regularity_matrix(x, y)))
        if not np.isfinite(cond) or cond > REGULARITY_COND_LIMIT:
            raise SystemError(
                f"discrete step not well posed (regularity condition number {cond:.3e})"
            )
        return cond


@dataclass(frozen=True)
class StepResult:
    """One advance of a node scheme: the new node, its multiplier, Newton work."""

    state: StatePoint
    lam: np.ndarray
    iters: int


@dataclass(frozen=True)
class DlaResult:
    """One advance of the two-point scheme."""

    q_next: np.ndarray
    v_next: np.ndarray
    lam: np.ndarray
    iters: int


def vni10_step(sys: MechanicalSystem, x: StatePoint, eps: float) -> StepResult:
    """First-order scheme: drift the node, then solve the multiplier exactly.

    The new velocity is admissible at the new configuration by construction,
    and no iteration is needed: the multiplier system is linear.
    """
    q1 = x.q + eps * x.v
    mu1 = sys.mu_at(q1)
    w = x.v - eps * (sys.M_inv @ sys.grad_v_at(q1))
    if sys.m:
        C1 = mu1 @ sys.M_inv @ mu1.T
        try:
            lam = -np.linalg.solve(C1, mu1 @ w) / eps
        except np.linalg.LinAlgError:
            raise SystemError(f"constraint Gram matrix singular at q={q1!r}") from None
        v1 = w + eps * (sys.M_inv @ (mu1.T @ lam))
    else:
        lam = np.zeros(0)
        v1 = w
    return StepResult(StatePoint(q1, v1), lam, 0)


def vni20_step(sys: MechanicalSystem, x: StatePoint, eps: float) -> StepResult:
    """Second-order scheme: trapezoidal forces, reaction at the half point,
    constraint enforced at the new node.

    The intermediate configuration q~_{k+1} = q_half + eps/2 v_{k+1} is
    eliminated, leaving a Newton solve in (v_{k+1}, lambda).
    """
    n, m = sys.n, sys.m
    q_half = x.q + 0.5 * eps * x.v
    grad0 = sys.grad_v_at(x.q)
    mu_half = sys.mu_at(q_half) if m else np.zeros((0, n))

    def unpack(u):
        return u[:n], u[n:]

    def q1_of(v1):
        return q_half + 0.5 * eps * v1

    def residual(u):
        v1, lam = unpack(u)
        q1 = q1_of(v1)
        r1 = v1 - x.v + 0.5 * eps * (sys.M_inv @ (sys.grad_v_at(q1) + grad0))
        if m:
            r1 = r1 - eps * (sys.M_inv @ (mu_half.T @ lam))
            r2 = sys.mu_at(q1) @ v1
            return np.concatenate([r1, r2])
        return r1

    def jacobian(u):
        v1, _ = unpack(u)
        q1 = q1_of(v1)
        J = np.zeros((n + m, n + m))
        J[:n, :n] = np.eye(n) + 0.25 * eps * eps * (sys.M_inv @ sys.hess_v_at(q1))
        if m:
            J[:n, n:] = -eps * (sys.M_inv @ mu_half.T)
            dmu = sys.mu_jac_at(q1)
            J[n:, :n] = sys.mu_at(q1) + 0.5 * eps * np.einsum("aij,i->aj", dmu, v1)
        return J

    u0 = np.concatenate([x.v, np.zeros(m)])
    u, iters = newton_solve(residual, jacobian, u0)
    v1, lam = unpack(u)
    return StepResult(StatePoint(q1_of(v1), v1), lam, iters)


def original_node_step(sys: MechanicalSystem, x: StatePoint, eps: float) -> StepResult:
    """Midpoint-constraint scheme on the original nodes (q_k, v_k).

    Admissibility here means the *deformed* residual mu(q - eps/2 v) v
    vanishes; the step requires it of its input and then conserves it.  The
    new configuration is q + eps v_{k+1}.
    """
    res0 = deformed_node_residual(sys, x, eps)
    if sys.m and np.max(np.abs(res0)) > ADMISSIBLE_TOL:
        raise SystemError(
            "input node violates the deformed constraint "
            f"(residual {np.max(np.abs(res0)):.6g}); repair it with deformed_admissible_velocity"
        )
    n, m = sys.n, sys.m
    mu0 = sys.mu_at(x.q) if m else np.zeros((0, n))
    grad_back = sys.grad_v_at(x.q - 0.5 * eps * x.v)

    def unpack(u):
        return u[:n], u[n:]

    def residual(u):
        v1, lam = unpack(u)
        q_mid = x.q + 0.5 * eps * v1
        r1 = sys.M @ (v1 - x.v) + 0.5 * eps * (sys.grad_v_at(q_mid) + grad_back)
        if m:
            r1 = r1 - eps * (mu0.T @ lam)
            r2 = sys.mu_at(q_mid) @ v1
            return np.concatenate([r1, r2])
        return r1

    def jacobian(u):
        v1, _ = unpack(u)
        q_mid = x.q + 0.5 * eps * v1
        J = np.zeros((n + m, n + m))
        J[:n, :n] = sys.M + 0.25 * eps * eps * sys.hess_v_at(q_mid)
        if m:
            J[:n, n:] = -eps * mu0.T
            dmu = sys.mu_jac_at(q_mid)
            J[n:, :n] = sys.mu_at(q_mid) + 0.5 * eps * np.einsum("aij,i->aj", dmu, v1)
        return J

    u0 = np.concatenate([x.v, np.zeros(m)])
    u, iters = newton_solve(residual, jacobian, u0)
    v1, lam = unpack(u)
    return StepResult(StatePoint(x.q + eps * v1, v1), lam, iters)


def deformed_node_residual(sys: MechanicalSystem, x: StatePoint, eps: float) -> np.ndarray:
    """mu(q - eps/2 v) v: the quantity the midpoint-constraint scheme conserves."""
    return sys.mu_at(x.q - 0.5 * eps * x.v) @ x.v


def deformed_admissible_velocity(
    sys: MechanicalSystem, q: np.ndarray, v: np.ndarray, eps: float
) -> np.ndarray:
    """Smallest M-reaction correction of v onto the deformed admissible set.

    Solves mu(q - eps/2 w) w = 0 for w = v + M^-1 mu(q)' c by Newton in the
    m coefficients c; the correction is O(eps) when v is admissible in the
    plain sense.
    """
    if sys.m == 0:
        return np.asarray(v, dtype=float).copy()
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    lift = sys.M_inv @ sys.mu_at(q).T  # (n, m)

    def w_of(c):
        return v + lift @ c

    def residual(c):
        w = w_of(c)
        return sys.mu_at(q - 0.5 * eps * w) @ w

    def jacobian(c):
        w = w_of(c)
        q_back = q - 0.5 * eps * w
        dmu = sys.mu_jac_at(q_back)
        term = -0.5 * eps * np.einsum("aij,jb,i->ab", dmu, lift, w)
        return term + sys.mu_at(q_back) @ lift

    c, _ = newton_solve(residual, jacobian, np.zeros(sys.m))
    return w_of(c)


def dla_step(dsys: DiscreteNonholonomicSystem, q_prev: np.ndarray, q_cur: np.ndarray) -> DlaResult:
    """Advance the two-point scheme: (q_{k-1}, q_k) -> q_{k+1}.

    The unknowns are the scaled difference u_v = (q_{k+1} - q_k) / eps and
    the multiplier; the discrete Euler-Lagrange residual is kept in the O(1)
    velocity scale so the Newton tolerance is meaningful uniformly in eps.
    """
    sys, rho = dsys.sys, dsys.rho
    eps, beta = rho.eps, rho.beta
    n, m = sys.n, sys.m
    v_k = (q_cur - q_prev) / eps
    dsys.check_regularity(q_cur, q_cur + eps * v_k)
    grad_back = sys.grad_v_at(rho.point(q_prev, q_cur))
    mu_k = sys.mu_at(q_cur) if m else np.zeros((0, n))

    def unpack(u):
        return u[:n], u[n:]

    def residual(u):
        u_v, lam = unpack(u)
        q_fwd = q_cur + beta * eps * u_v
        r1 = sys.M @ (u_v - v_k) + eps * (
            (1.0 - beta) * sys.grad_v_at(q_fwd) + beta * grad_back
        )
        if m:
            r1 = r1 - eps * (mu_k.T @ lam)
            r2 = sys.mu_at(q_fwd) @ u_v
            return np.concatenate([r1, r2])
        return r1

    def jacobian(u):
        u_v, _ = unpack(u)
        q_fwd = q_cur + beta * eps * u_v
        J = np.zeros((n + m, n + m))
        J[:n, :n] = sys.M + eps * eps * beta * (1.0 - beta) * sys.hess_v_at(q_fwd)
        if m:
            J[:n, n:] = -eps * mu_k.T
            dmu = sys.mu_jac_at(q_fwd)
            J[n:, :n] = sys.mu_at(q_fwd) + beta * eps * np.einsum("aij,i->aj", dmu, u_v)
        return J

    u0 = np.concatenate([v_k, np.zeros(m)])
    u, iters = newton_solve(residual, jacobian, u0)
    u_v, lam = unpack(u)
    return DlaResult(q_cur + eps * u_v, u_v, lam, iters)


@dataclass
class DiscreteTrajectory:
    """Node sequence of a discrete scheme plus per-node diagnostics."""

    times: np.ndarray
    states: np.ndarray  # (N+1, 2n)
    lambdas: np.ndarray  # (N+1, m)
    residuals: np.ndarray  # (N+1, m), mu(q) v at the node
    deformed_residuals: np.ndarray  # (N+1, m), mu(q - eps/2 v) v
    energies: np.ndarray
    newton_iters: np.ndarray  # (N+1,), 0 for the initial node
    n: int
    eps: float
    raw_configurations: np.ndarray | None = None  # (N+2, n) for two-point runs

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
            + ["energy", "newton_iters"]
            + [f"deformed_residual_{a + 1}" for a in range(m)]
        )
        yield header
        for k in range(len(self)):
            row = [
                format(self.times[k], ".17g"),
                *(format(val, ".17g") for val in self.states[k]),
                *(format(val, ".17g") for val in self.lambdas[k]),
                *(format(val, ".17g") for val in self.residuals[k]),
                format(self.energies[k], ".17g"),
                str(int(self.newton_iters[k])),
                *(format(val, ".17g") for val in self.deformed_residuals[k]),
            ]
            yield row

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerows(self.csv_rows())


SCHEMES = ("vni10", "vni20", "original_node", "dla")


def run_integrator(
    sys: MechanicalSystem,
    scheme: str,
    x0: StatePoint,
    eps: float,
    steps: int,
    beta: float | None = None,
    policy: NodePolicy = NodePolicy.REDEFINED,
) -> DiscreteTrajectory:
    """Drive one of the discrete schemes for a fixed number of steps.

    The initial node must be admissible in the sense the scheme preserves:
    on D for the node schemes and the redefined two-point scheme, on the
    deformed set for the midpoint-constraint scheme and the original-node
    two-point scheme.  The multiplier reported at the initial node is the
    continuous reaction multiplier, which the discrete ones approximate.
    """
    if scheme not in SCHEMES:
        raise SystemError(f"unknown scheme {scheme!r}; pick one of {SCHEMES}")
    if eps <= 0.0:
        raise SystemError("eps must be positive")
    if scheme == "dla":
        if beta is None:
            raise SystemError("the two-point scheme needs beta")
        rho = FiniteDifferenceMap(beta=beta, eps=eps)
        dsys = DiscreteNonholonomicSystem(sys, rho)
    elif beta is not None:
        raise SystemError(f"beta only applies to the two-point scheme, not {scheme!r}")

    plain0 = sys.mu_at(x0.q) @ x0.v if sys.m else np.zeros(0)
    if scheme in ("vni10", "vni20") or (scheme == "dla" and policy is NodePolicy.REDEFINED):
        if sys.m and np.max(np.abs(plain0)) > ADMISSIBLE_TOL:
            raise SystemError(f"initial node is off D (residual {np.max(np.abs(plain0)):.6g})")
    elif scheme == "original_node":
        pass  # original_node_step validates its own deformed precondition
    elif scheme == "dla" and policy is NodePolicy.ORIGINAL:
        q_shift = x0.q - (1.0 - beta) * eps * x0.v
        res = sys.mu_at(q_shift) @ x0.v if sys.m else np.zeros(0)
        if sys.m and np.max(np.abs(res)) > ADMISSIBLE_TOL:
            raise SystemError(
                f"initial node violates the discrete constraint (residual {np.max(np.abs(res)):.6g})"
            )

    N = int(steps)
    n, m = sys.n, sys.m
    times = eps * np.arange(N + 1)
    states = np.empty((N + 1, 2 * n))
    lambdas = np.empty((N + 1, m))
    residuals = np.empty((N + 1, m))
    deformed = np.empty((N + 1, m))
    energies = np.empty(N + 1)
    iters = np.zeros(N + 1, dtype=int)
    raw = None

    def record(k, x: StatePoint, lam, it):
        states[k] = x.concat()
        lambdas[k] = lam
        residuals[k] = sys.mu_at(x.q) @ x.v if m else np.zeros(0)
        deformed[k] = deformed_node_residual(sys, x, eps) if m else np.zeros(0)
        energies[k] = energy(sys, x)
        iters[k] = it

    record(0, x0, _lambda_raw(sys, x0), 0)

    def truncated(upto: int, raw_rows: int = 0) -> DiscreteTrajectory:
        # Rows recorded before a failed step, attached to the exception so
        # callers can salvage them.
        return DiscreteTrajectory(
            times=times[:upto].copy(),
            states=states[:upto].copy(),
            lambdas=lambdas[:upto].copy(),
            residuals=residuals[:upto].copy(),
            deformed_residuals=deformed[:upto].copy(),
            energies=energies[:upto].copy(),
            newton_iters=iters[:upto].copy(),
            n=n,
            eps=eps,
            raw_configurations=raw[:raw_rows].copy() if raw is not None else None,
        )

    if scheme in ("vni10", "vni20", "original_node"):
        step_fn = {
            "vni10": vni10_step,
            "vni20": vni20_step,
            "original_node": original_node_step,
        }[scheme]
        x = x0
        for k in range(1, N + 1):
            try:
                out = step_fn(sys, x, eps)
            except (NewtonError, SystemError) as exc:
                exc.partial = truncated(k)
                raise
            x = out.state
            record(k, x, out.lam, out.iters)
    else:
        if policy is NodePolicy.REDEFINED:
            q_prev, q_cur = dsys.rho.inverse(x0.q, x0.v)
        else:
            q_prev, q_cur = x0.q - eps * x0.v, x0.q
        raw = np.empty((N + 2, n))
        raw[0], raw[1] = q_prev, q_cur
        for k in range(1, N + 1):
            try:
                out = dla_step(dsys, q_prev, q_cur)
            except (NewtonError, SystemError) as exc:
                exc.partial = truncated(k, raw_rows=k + 1)
                raise
            q_prev, q_cur = q_cur, out.q_next
            raw[k + 1] = q_cur
            if policy is NodePolicy.REDEFINED:
                node_q, node_v = dsys.rho.forward(q_prev, q_cur)
            else:
                node_q, node_v = q_cur, out.v_next
            record(k, StatePoint(node_q, node_v), out.lam, out.iters)

    return DiscreteTrajectory(
        times=times,
        states=states,
        lambdas=lambdas,
        residuals=residuals,
        deformed_residuals=deformed,
        energies=energies,
        newton_iters=iters,
        n=n,
        eps=eps,
        raw_configurations=raw,
    )
