"""A one-step map realized as a time-periodic perturbation of its flow.

Given a field f with flow F and a one-step map Phi of consistency order p,
the interpolant

    G~(tau, y) = chi0(tau) F(eps tau, y) + chi1(tau) F(eps (tau - 1), Phi(eps, y))

glues the flow started at y to the flow arriving at Phi(eps, y).  The cutoff
chi0 is 1 near tau = 0 and 0 near tau = 1 with all derivatives vanishing at
both ends, so G(k eps, y) visits exactly the iterates of Phi while solving

    dz/dt = f(z) + eps^p g(t/eps, z)

for a bounded, eps-periodic g.  `g_eval` recovers that perturbation field
pointwise by inverting G(t, .) with a Newton iteration; `verify_embedding`
packages the checks that make the construction trustworthy numerically.

Everything operates on plain R^d vectors through an `EmbeddingProblem`
(field plus flow), so the machinery applies equally to the reduced
constrained dynamics and to scalar toy problems.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .discrete import NewtonError, original_node_step, vni10_step, vni20_step
from .flow import flow_field
from .reduction import ReducedState, psi_embed, reduce_state, reduced_field
from .system import ConnectionSplit, MechanicalSystem, SystemError

__all__ = [
    "chi0",
    "chi1",
    "chi0_prime",
    "interpolate_in_D",
    "OneStepMap",
    "EmbeddingProblem",
    "reduced_problem",
    "reduced_step_map",
    "exact_step_map",
    "EvolutionInterpolant",
    "build_G",
    "verify_embedding",
]

# tanh is indistinguishable from +-1 in double precision long before this,
# and past it sech^2 underflow would otherwise meet (1 + u^2) overflow
_SATURATED = 350.0


def chi0(tau: float) -> float:
    """Smooth step from 1 at tau = 0 down to 0 at tau = 1, flat at both ends."""
    if tau <= 0.0:
        return 1.0
    if tau >= 1.0:
        return 0.0
    u = 1.0 / math.tan(math.pi * tau)
    return 0.5 * (1.0 + math.tanh(u))


def chi1(tau: float) -> float:
    """The complementary cutoff; defined as 1 - chi0 so the pair sums to one
    bitwise."""
    return 1.0 - chi0(tau)


def chi0_prime(tau: float) -> float:
    """d chi0 / d tau; identically zero outside (0, 1) and saturated tails."""
    if tau <= 0.0 or tau >= 1.0:
        return 0.0
    u = 1.0 / math.tan(math.pi * tau)
    if not math.isfinite(u) or abs(u) >= _SATURATED:
        return 0.0
    sech = 1.0 / math.cosh(u)
    return -0.5 * math.pi * (1.0 + u * u) * sech * sech


def interpolate_in_D(
    sys: MechanicalSystem,
    split: ConnectionSplit,
    x0,
    x1,
    eps: float,
):
    """Curve c : [0, eps] -> D joining two admissible states.

    Blending happens in the reduced coordinates and the result is lifted
    through psi, so every sample of the curve satisfies the constraints to
    the accuracy of the lift itself.  The cutoff's flat ends make the curve
    bitwise constant near t = 0 and t = eps.
    """
    xi0 = reduce_state(sys, split, x0).concat()
    xi1 = reduce_state(sys, split, x1).concat()
    n = sys.n

    def c(t: float):
        w0 = chi0(t / eps)
        w1 = chi1(t / eps)
        blend = w0 * xi0 + w1 * xi1
        return psi_embed(sys, split, ReducedState(blend[:n], blend[n:]))

    return c


@dataclass(frozen=True)
class OneStepMap:
    """A numerical one-step map y -> fn(eps, y) of consistency order p."""

    fn: Callable[[float, np.ndarray], np.ndarray]
    p: int

    def __post_init__(self):
        if self.p < 1:
            raise SystemError("consistency order p must be a positive integer")

    def iterate(self, eps: float, y: np.ndarray, k: int) -> np.ndarray:
        out = np.asarray(y, dtype=float)
        for _ in range(k):
            out = self.fn(eps, out)
        return out


@dataclass(frozen=True)
class EmbeddingProblem:
    """The continuous side of the construction: a field and its flow on R^d."""

    dim: int
    field: Callable[[np.ndarray], np.ndarray]
    flow: Callable[[float, np.ndarray], np.ndarray]


def reduced_problem(
    sys: MechanicalSystem, split: ConnectionSplit, base_step: float = 2e-3
) -> EmbeddingProblem:
    """The reduced constrained dynamics as an embedding problem on R^{2n-m}."""
    n = sys.n

    def field(xi: np.ndarray) -> np.ndarray:
        return reduced_field(sys, split, ReducedState(xi[:n], xi[n:]))

    def flow(t: float, y: np.ndarray) -> np.ndarray:
        return flow_field(field, y, t, base_step)

    return EmbeddingProblem(dim=2 * n - sys.m, field=field, flow=flow)


_NODE_STEPS = {"vni10": (vni10_step, 1), "vni20": (vni20_step, 2), "original_node": (original_node_step, 1)}


def reduced_step_map(sys: MechanicalSystem, split: ConnectionSplit, scheme: str) -> OneStepMap:
    """A discrete node scheme viewed as a map on the reduced coordinates."""
    if scheme not in _NODE_STEPS:
        raise SystemError(f"no node scheme named {scheme!r}; pick from {sorted(_NODE_STEPS)}")
    step_fn, p = _NODE_STEPS[scheme]
    n = sys.n

    def fn(eps: float, xi: np.ndarray) -> np.ndarray:
        x = psi_embed(sys, split, ReducedState(xi[:n], xi[n:]))
        out = step_fn(sys, x, eps)
        return reduce_state(sys, split, out.state, check=False).concat()

    return OneStepMap(fn, p)


def exact_step_map(problem: EmbeddingProblem, p: int = 1) -> OneStepMap:
    """The problem's own flow packaged as a one-step map (zero perturbation)."""
    return OneStepMap(lambda eps, y: problem.flow(eps, y), p)


class EvolutionInterpolant:
    """G(t, y): the flow-glued curve through the iterates of a one-step map."""

    def __init__(self, problem: EmbeddingProblem, phi: OneStepMap, eps: float):
        if eps <= 0.0:
            raise SystemError("eps must be positive")
        self.problem = problem
        self.phi = phi
        self.eps = eps

    # -- the single-interval interpolant and its tau-derivative ---------------

    def g_tilde(self, tau: float, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        w0 = chi0(tau)
        w1 = chi1(tau)
        # skipping zero-weight legs keeps the endpoints bitwise exact
        if w1 == 0.0:
            return w0 * self.problem.flow(self.eps * tau, y)
        if w0 == 0.0:
            return w1 * self.problem.flow(self.eps * (tau - 1.0), self.phi.fn(self.eps, y))
        a = self.problem.flow(self.eps * tau, y)
        b = self.problem.flow(self.eps * (tau - 1.0), self.phi.fn(self.eps, y))
        return w0 * a + w1 * b

    def g_tilde_dtau(self, tau: float, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        w0 = chi0(tau)
        w1 = chi1(tau)
        d0 = chi0_prime(tau)
        out = np.zeros(self.problem.dim)
        if w0 != 0.0 or d0 != 0.0:
            a = self.problem.flow(self.eps * tau, y)
            out += d0 * a + self.eps * w0 * self.problem.field(a)
        if w1 != 0.0 or d0 != 0.0:
            b = self.problem.flow(self.eps * (tau - 1.0), self.phi.fn(self.eps, y))
            out += -d0 * b + self.eps * w1 * self.problem.field(b)
        return out

    # -- extension to all t >= 0 ----------------------------------------------

    def _split_time(self, t: float) -> tuple[int, float]:
        s = t / self.eps
        k = int(math.floor(s))
        return k, s - k

    def G(self, t: float, y: np.ndarray) -> np.ndarray:
        """Interpolant position at time t for the trajectory started at y."""
        if t < 0.0:
            raise SystemError("the interpolant is defined for t >= 0")
        k, tau = self._split_time(t)
        return self.g_tilde(tau, self.phi.iterate(self.eps, y, k))

    # -- the recovered perturbation field --------------------------------------

    def g_eval(
        self,
        t: float,
        z: np.ndarray,
        tol: float = 1e-11,
        max_iter: int = 40,
        fd_step: float = 1e-6,
    ) -> np.ndarray:
        """The perturbation g(t, z) with d/dt G = f + eps^p g along interpolants.

        Only t mod eps matters: the anchor state w with G~(tau, w) = z is
        found by a Newton iteration on a finite-difference Jacobian, seeded
        at z itself (the interpolant stays eps-close to the identity).
        """
        z = np.asarray(z, dtype=float)
        _, tau = self._split_time(t)
        w = z.copy()
        J = None
        for it in range(max_iter):
            r = self.g_tilde(tau, w) - z
            if np.max(np.abs(r)) <= tol:
                break
            if J is None or it % 8 == 7:
                J = self._fd_jacobian(tau, w, fd_step)
            try:
                w = w - np.linalg.solve(J, r)
            except np.linalg.LinAlgError:
                raise NewtonError("singular Jacobian while inverting the interpolant") from None
        else:
            raise NewtonError(f"interpolant inversion did not reach {tol:g}")
        dG_dt = self.g_tilde_dtau(tau, w) / self.eps
        return (dG_dt - self.problem.field(z)) / self.eps**self.phi.p

    def _fd_jacobian(self, tau: float, w: np.ndarray, h: float) -> np.ndarray:
        d = self.problem.dim
        J = np.empty((d, d))
        for j in range(d):
            bump = np.zeros(d)
            bump[j] = h
            J[:, j] = (self.g_tilde(tau, w + bump) - self.g_tilde(tau, w - bump)) / (2.0 * h)
        return J


def build_G(problem: EmbeddingProblem, phi: OneStepMap, eps: float) -> EvolutionInterpolant:
    return EvolutionInterpolant(problem, phi, eps)


def verify_embedding(
    problem: EmbeddingProblem,
    phi: OneStepMap,
    eps: float,
    points: np.ndarray,
    t_frac: float = 0.37,
    order_levels: int = 5,
    order_floor: float = 1e-10,
) -> dict:
    """Numerical certificate for the embedding at the given base points.

    Returns a dict with the worst endpoint mismatch ||G(eps, y) - Phi(y)||,
    the worst periodicity defect ||g(t + eps, z) - g(t, z)||, the measured
    consistency order of the map against the flow (None when the two are
    indistinguishable), and the number of sample points used.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    interp = build_G(problem, phi, eps)

    endpoint = 0.0
    for y in points:
        gap = interp.G(eps, y) - phi.fn(eps, y)
        endpoint = max(endpoint, float(np.max(np.abs(gap))))

    t0 = t_frac * eps
    periodicity = 0.0
    for y in points:
        g_a = interp.g_eval(t0, y)
        g_b = interp.g_eval(t0 + eps, y)
        periodicity = max(periodicity, float(np.max(np.abs(g_a - g_b))))

    diffs = []
    for j in range(order_levels):
        eps_j = eps * 0.5**j
        worst = 0.0
        for y in points:
            gap = phi.fn(eps_j, y) - problem.flow(eps_j, y)
            worst = max(worst, float(np.max(np.abs(gap))))
        diffs.append(worst)
    if max(diffs) <= order_floor:
        measured_p = None
    else:
        eps_list = eps * 0.5 ** np.arange(order_levels)
        slope = np.polyfit(np.log(eps_list), np.log(diffs), 1)[0]
        measured_p = float(slope) - 1.0

    return {
        "endpoint_mismatch": endpoint,
        "periodicity_defect": periodicity,
        "measured_p": measured_p,
        "samples": points.shape[0],
    }
