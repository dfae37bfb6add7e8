"""Mechanical systems with linear velocity constraints on flat configuration space.

A system is the triple (R^n, L, D): a simple mechanical Lagrangian
L(q, v) = 1/2 v'Mv - V(q) together with the admissible-velocity set
D = {(q, v) : mu(q) v = 0} cut out by m constraint one-forms.  The mass
matrix is constant; V and the entries of mu are expressions in the
configuration names.  Velocity names are derived as ``v_<name>`` and are
reserved for deformation functions g(q, v).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import exprdiff
from .exprdiff import Expression

__all__ = [
    "StatePoint",
    "MechanicalSystem",
    "CMatrix",
    "ConnectionSplit",
    "SystemError",
    "constraint_residual",
    "c_matrix",
    "project_velocity",
    "derive_connection",
    "energy",
    "nonholonomic_particle",
]

MAX_DIM = 12
COND_LIMIT = 1e12


class SystemError(ValueError):
    """Invalid system data or a rank/conditioning failure at an evaluation point."""


@dataclass(frozen=True)
class StatePoint:
    """A point (q, v) of the velocity phase space, not necessarily on D."""

    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        if self.q.shape != self.v.shape or self.q.ndim != 1:
            raise SystemError("q and v must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.v))):
            raise SystemError("state entries must be finite")

    def concat(self) -> np.ndarray:
        return np.concatenate([self.q, self.v])

    @staticmethod
    def from_concat(arr: np.ndarray) -> "StatePoint":
        arr = np.asarray(arr, dtype=float)
        n = arr.size // 2
        return StatePoint(arr[:n], arr[n:])


def _state_view(q: np.ndarray, v: np.ndarray) -> StatePoint:
    """StatePoint without validation, for hot loops over already-checked arrays."""
    x = object.__new__(StatePoint)
    object.__setattr__(x, "q", q)
    object.__setattr__(x, "v", v)
    return x


def _as_expr(obj) -> Expression:
    return exprdiff.parse(obj) if isinstance(obj, str) else obj


class MechanicalSystem:
    """Constant mass matrix M (SPD), potential V(q), constraint rows mu(q).

    Parameters
    ----------
    names : configuration coordinate names, fixing the index <-> name order.
    M     : n x n symmetric positive definite matrix.
    V     : potential, an expression (or string) over the configuration names.
    mu    : m rows of n expressions each; row alpha is the coefficient vector
            of the alpha-th velocity constraint mu^alpha(q) . v = 0.
    """

    def __init__(self, names, M, V, mu):
        self.names = [str(s) for s in names]
        self.n = len(self.names)
        if self.n == 0 or self.n > MAX_DIM:
            raise SystemError(f"dimension must be between 1 and {MAX_DIM}")
        if len(set(self.names)) != self.n:
            raise SystemError("coordinate names must be distinct")
        for nm in self.names:
            if not nm.isidentifier():
                raise SystemError(f"coordinate name {nm!r} is not an identifier")
            if nm.startswith("v_"):
                raise SystemError(f"coordinate name {nm!r} collides with the velocity prefix")
        self.vnames = [f"v_{nm}" for nm in self.names]

        self.M = np.asarray(M, dtype=float)
        if self.M.shape != (self.n, self.n):
            raise SystemError(f"M must be {self.n}x{self.n}")
        if not np.array_equal(self.M, self.M.T):
            raise SystemError("M must be symmetric exactly as stored")
        if float(np.linalg.eigvalsh(self.M)[0]) <= 0.0:
            raise SystemError("M must be positive definite")
        self.M_inv = np.linalg.inv(self.M)

        self.V = _as_expr(V)
        self.mu = [[_as_expr(e) for e in row] for row in mu]
        self.m = len(self.mu)
        if self.m > self.n:
            raise SystemError("more constraints than coordinates")
        for row in self.mu:
            if len(row) != self.n:
                raise SystemError(f"each constraint row must have {self.n} entries")
        allowed = set(self.names)
        for e in [self.V, *itertools.chain.from_iterable(self.mu)]:
            extra = exprdiff.free_variables(e) - allowed
            if extra:
                raise SystemError(f"unknown variables in system data: {sorted(extra)}")

        # Constraint entries and potentials are evaluated inside integrator
        # loops, so constant entries are folded once here and derivative
        # work is restricted to the variables an entry actually mentions.
        self._mu_const = np.zeros((self.m, self.n))
        self._mu_var_entries = []
        for a, row in enumerate(self.mu):
            for i, e in enumerate(row):
                free = sorted(exprdiff.free_variables(e))
                if free:
                    idx = np.array([self.names.index(nm) for nm in free])
                    self._mu_var_entries.append((a, i, e, free, idx))
                else:
                    self._mu_const[a, i] = exprdiff.evaluate(e, {})
        self._v_free = sorted(exprdiff.free_variables(self.V))
        self._v_free_idx = np.array([self.names.index(nm) for nm in self._v_free], dtype=int)
        self._v_const = exprdiff.evaluate(self.V, {}) if not self._v_free else None

    def q_ctx(self, q: np.ndarray) -> dict:
        return {nm: float(val) for nm, val in zip(self.names, q)}

    def qv_ctx(self, q: np.ndarray, v: np.ndarray) -> dict:
        ctx = self.q_ctx(q)
        ctx.update(zip(self.vnames, np.asarray(v, dtype=float)))
        return ctx

    def mu_at(self, q: np.ndarray) -> np.ndarray:
        out = self._mu_const.copy()
        if self._mu_var_entries:
            ctx = self.q_ctx(q)
            for a, i, e, _, _ in self._mu_var_entries:
                out[a, i] = exprdiff.evaluate(e, ctx)
        return out

    def mu_jac_at(self, q: np.ndarray) -> np.ndarray:
        """d mu[a, i] / d q[j], shape (m, n, n)."""
        out = np.zeros((self.m, self.n, self.n))
        if self._mu_var_entries:
            ctx = self.q_ctx(q)
            for a, i, e, free, idx in self._mu_var_entries:
                out[a, i, idx] = exprdiff.gradient(e, free, ctx)
        return out

    def v_at(self, q: np.ndarray) -> float:
        if self._v_const is not None:
            return self._v_const
        return exprdiff.evaluate(self.V, self.q_ctx(q))

    def grad_v_at(self, q: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n)
        if self._v_free:
            out[self._v_free_idx] = exprdiff.gradient(self.V, self._v_free, self.q_ctx(q))
        return out

    def hess_v_at(self, q: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        if self._v_free:
            block = exprdiff.hessian(self.V, self._v_free, self.q_ctx(q))
            out[np.ix_(self._v_free_idx, self._v_free_idx)] = block
        return out

    def rank_check(self, q: np.ndarray) -> None:
        if self.m and np.linalg.matrix_rank(self.mu_at(q)) != self.m:
            raise SystemError(f"constraint matrix loses rank at q={np.asarray(q)!r}")


def constraint_residual(sys: MechanicalSystem, x: StatePoint) -> np.ndarray:
    """phi(q, v) = mu(q) . v, one entry per constraint."""
    return sys.mu_at(x.q) @ x.v


@dataclass(frozen=True)
class CMatrix:
    C: np.ndarray
    inv: np.ndarray
    cond: float


def c_matrix(sys: MechanicalSystem, q: np.ndarray) -> CMatrix:
    """C = mu M^-1 mu', SPD whenever mu(q) has full rank; inverse via Cholesky."""
    mu = sys.mu_at(q)
    C = mu @ sys.M_inv @ mu.T
    C = 0.5 * (C + C.T)
    if sys.m == 0:
        return CMatrix(C, C.copy(), 1.0)
    try:
        np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise SystemError(f"constraint Gram matrix not positive definite at q={q!r}") from None
    C_inv = np.linalg.inv(C)
    cond = float(np.linalg.cond(C))
    if cond > COND_LIMIT:
        raise SystemError(f"constraint Gram matrix ill-conditioned (cond={cond:.3e}) at q={q!r}")
    return CMatrix(C, C_inv, cond)


def project_velocity(sys: MechanicalSystem, q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """M-orthogonal projection of v onto the admissible set at q."""
    if sys.m == 0:
        return np.asarray(v, dtype=float).copy()
    mu = sys.mu_at(q)
    cm = c_matrix(sys, q)
    return v - sys.M_inv @ mu.T @ (cm.inv @ (mu @ v))


@dataclass(frozen=True)
class ConnectionSplit:
    """Split of the coordinates into base (a) and fiber (alpha) indices.

    The fiber block B(q) = mu[:, fiber] must stay invertible wherever the
    split is used; then A(q) = B(q)^-1 mu[:, base] normalizes the constraint
    rows to (A, I) and admissible velocities satisfy v_fiber = -A(q) v_base.
    """

    base: tuple[int, ...]
    fiber: tuple[int, ...]

    def __post_init__(self):
        if set(self.base) & set(self.fiber):
            raise SystemError("base and fiber indices overlap")

    def b_at(self, sys: MechanicalSystem, q: np.ndarray) -> np.ndarray:
        return sys.mu_at(q)[:, list(self.fiber)]

    def a_at(self, sys: MechanicalSystem, q: np.ndarray) -> np.ndarray:
        """A(q) = B(q)^-1 mu[:, base], shape (m, n-m)."""
        mu = sys.mu_at(q)
        B = mu[:, list(self.fiber)]
        if abs(np.linalg.det(B)) < 1e-12:
            raise SystemError(f"fiber block of mu singular at q={q!r}")
        return np.linalg.solve(B, mu[:, list(self.base)])

    def a_jac_at(self, sys: MechanicalSystem, q: np.ndarray) -> np.ndarray:
        """dA[al, a]/dq[j], shape (m, n-m, n), from A = B^-1 N."""
        mu = sys.mu_at(q)
        dmu = sys.mu_jac_at(q)
        B = mu[:, list(self.fiber)]
        A = np.linalg.solve(B, mu[:, list(self.base)])
        out = np.empty((sys.m, sys.n - sys.m, sys.n))
        for j in range(sys.n):
            dB = dmu[:, list(self.fiber), j]
            dN = dmu[:, list(self.base), j]
            out[:, :, j] = np.linalg.solve(B, dN - dB @ A)
        return out

    def mu_tilde_at(self, sys: MechanicalSystem, q: np.ndarray) -> np.ndarray:
        """Row-normalized constraints: A in the base columns, identity in the fiber."""
        out = np.zeros((sys.m, sys.n))
        A = self.a_at(sys, q)
        for k, idx in enumerate(self.base):
            out[:, idx] = A[:, k]
        for k, idx in enumerate(self.fiber):
            out[k, idx] = 1.0
        return out

    def b_condition(self, sys: MechanicalSystem, q: np.ndarray) -> float:
        return float(np.linalg.cond(self.b_at(sys, q)))


def derive_connection(sys: MechanicalSystem, fiber_indices=None, q0=None) -> ConnectionSplit:
    """Pick fiber coordinates whose mu-block is invertible and build the split.

    Without `fiber_indices`, every m-subset of columns is scanned at q0 and
    the one with the largest |det| wins; exact ties go to the
    lexicographically last index set.
    """
    if fiber_indices is None:
        if q0 is None:
            raise SystemError("automatic fiber selection needs the initial configuration q0")
        mu = sys.mu_at(q0)
        best = None
        best_det = 0.0
        for subset in itertools.combinations(range(sys.n), sys.m):
            d = abs(np.linalg.det(mu[:, list(subset)]))
            if d >= best_det and d > 1e-8:
                best, best_det = subset, d
        if best is None:
            raise SystemError(f"no invertible {sys.m}-column block of mu at q0={q0!r}")
        fiber = tuple(best)
    else:
        fiber = tuple(int(i) for i in fiber_indices)
        if len(fiber) != sys.m or not all(0 <= i < sys.n for i in fiber):
            raise SystemError("fiber_indices must be m distinct coordinate indices")
        if q0 is not None and abs(np.linalg.det(sys.mu_at(q0)[:, list(fiber)])) < 1e-8:
            raise SystemError(f"requested fiber block singular at q0={q0!r}")
    base = tuple(i for i in range(sys.n) if i not in fiber)
    return ConnectionSplit(base=base, fiber=fiber)


def energy(sys: MechanicalSystem, x: StatePoint) -> float:
    """E = 1/2 v'Mv + V(q)."""
    return float(0.5 * x.v @ sys.M @ x.v + sys.v_at(x.q))


def nonholonomic_particle() -> MechanicalSystem:
    """Free particle in R^3 whose vertical velocity is slaved to y: v_z = y v_x."""
    return MechanicalSystem(
        names=["x", "y", "z"],
        M=np.eye(3),
        V="0",
        mu=[["-y", "0", "1"]],
    )
