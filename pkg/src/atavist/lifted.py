"""The memory operator truncated to lookback < ell, acting on prefixes of fixed length.

Prefixes p = (p0, ..., p_{k-1}) are indexed lexicographically with p0 most
significant, in the canonical type order.  The child prefix of p with type t
is (t, p0, ..., p_{k-2}), so the operator never needs more than ``depth``
coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import MemoryLaw
from .spectral import DEFAULT_TOL, MAX_ITER, collatz_wielandt, harnack_enclosure, perron_frobenius

MAX_STATES = 2**27


class BudgetError(MemoryError):
    def __init__(self, depth: int, n_types: int, max_states: int):
        reachable = max(0, int(math.floor(math.log(max_states) / math.log(n_types)))) if n_types > 1 else depth
        super().__init__(
            f"depth {depth} needs {n_types}**{depth} states, over the budget of {max_states}; "
            f"deepest reachable depth is {reachable}"
        )
        self.depth = depth
        self.reachable_depth = reachable


class LiftedOperator:
    """f -> sum_{j < truncation} tau(j) sum_t m(p_j, t) f(t p) on functions of ``depth`` coordinates.

    ``truncation`` defaults to ``depth``.  A larger depth is allowed and leaves
    the spectral radius unchanged.  The matrix is never materialised: each
    application costs O(|S|**depth * |S|) using the activated-type weights
    W(q, s) = sum_{j} tau(j) [q_j = s] over the first depth-1 coordinates.
    """

    def __init__(self, m, tau: MemoryLaw, depth: int, truncation: int | None = None,
                 max_states: int = MAX_STATES):
        if depth < 1:
            raise ValueError("depth must be at least 1")
        truncation = depth if truncation is None else truncation
        if not 1 <= truncation <= depth:
            raise ValueError("truncation must lie in 1..depth")
        m = np.asarray(m, dtype=float)
        n = m.shape[0]
        if n ** depth > max_states:
            raise BudgetError(depth, n, max_states)
        self.m = m
        self.tau = tau
        self.depth = depth
        self.truncation = truncation
        self.n_types = n
        self.size = n ** depth
        self._tail_shape = n ** (depth - 1)
        tw = tau.weights(truncation)
        self.tau_weights = np.concatenate([tw, np.zeros(depth - truncation)])
        q = np.arange(self._tail_shape)
        w = np.zeros((self._tail_shape, n))
        for j in range(depth - 1):
            if self.tau_weights[j] == 0:
                continue
            digit = (q // n ** (depth - 2 - j)) % n
            w[q, digit] += self.tau_weights[j]
        self._activated = w
        self._last = self.tau_weights[depth - 1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.size, self.size

    def max_row_sum(self) -> float:
        return float(self.m.sum(axis=1).max())

    def matvec(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != (self.size,):
            raise ValueError(f"expected a vector of length {self.size}, got shape {f.shape}")
        n = self.n_types
        # h[q, s] = sum_t m(s, t) f(t q)
        h = (self.m @ f.reshape(n, self._tail_shape)).T
        out = (self._activated * h).sum(axis=1)[:, None] + self._last * h
        return out.ravel()

    def rmatvec(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.size,):
            raise ValueError(f"expected a vector of length {self.size}, got shape {mu.shape}")
        mu2 = mu.reshape(self._tail_shape, self.n_types)
        a = mu2.sum(axis=1)[:, None] * self._activated + self._last * mu2
        return (a @ self.m).T.ravel()

    def dense(self) -> np.ndarray:
        """Materialise the matrix column by column (small operators only)."""
        eye = np.eye(self.size)
        return np.column_stack([self.matvec(eye[:, i]) for i in range(self.size)])

    def index(self, prefix) -> int:
        if len(prefix) != self.depth:
            raise ValueError(f"prefix must have length {self.depth}")
        i = 0
        for s in prefix:
            i = i * self.n_types + int(s)
        return i

    def prefix(self, i: int) -> tuple[int, ...]:
        out = []
        for _ in range(self.depth):
            i, d = divmod(i, self.n_types)
            out.append(d)
        return tuple(reversed(out))


def lift(m, tau: MemoryLaw, depth: int, truncation: int | None = None,
         max_states: int = MAX_STATES) -> LiftedOperator:
    return LiftedOperator(m, tau, depth, truncation, max_states)


def apply(op: LiftedOperator, f) -> np.ndarray:
    return op.matvec(f)


def _shift(op: LiftedOperator) -> float:
    return 1e-3 * max(op.max_row_sum(), 1e-300)


@dataclass(frozen=True)
class RadiusResult:
    value: float
    lower: float
    upper: float
    vector: np.ndarray

    @property
    def enclosure(self) -> tuple[float, float]:
        return self.lower, self.upper


def radius(op: LiftedOperator, tol: float = DEFAULT_TOL, v0=None,
           max_iter: int = MAX_ITER) -> RadiusResult:
    """Spectral radius with a certified bracket, via power iteration on op + eps I."""
    v0 = np.ones(op.size) if v0 is None else v0
    res = collatz_wielandt(op.matvec, v0, tol, max_iter, shift=_shift(op))
    return RadiusResult(res.value, res.lower, res.upper, res.vector)


@dataclass(frozen=True)
class EigenLaw:
    law: np.ndarray
    r: float
    residual: float


def eigen_law(op: LiftedOperator, tol: float = DEFAULT_TOL, max_iter: int = MAX_ITER) -> EigenLaw:
    """Probability vector rho with rho m_ell = r_ell rho, residual measured in l1."""
    inner = min(tol, 1e-12)
    res = collatz_wielandt(op.rmatvec, np.ones(op.size), inner, max_iter, shift=_shift(op))
    law = res.vector / res.vector.sum()
    law[law < 1e-200] = 0.0
    law /= law.sum()
    resid = float(np.abs(op.rmatvec(law) - res.value * law).sum())
    return EigenLaw(law, res.value, resid)


def project(law, n_types: int) -> np.ndarray:
    """Image of a law on S^(k+1) under dropping the last coordinate."""
    law = np.asarray(law)
    return law.reshape(-1, n_types).sum(axis=1)


@dataclass(frozen=True)
class RadiusEnclosure:
    lower: float
    upper: float
    trace: list[tuple[int, float]] = field(default_factory=list)
    exact: bool = False
    converged: bool = False
    heuristic_upper: float | None = None

    @property
    def depth(self) -> int:
        return self.trace[-1][0]

    @property
    def estimate(self) -> float:
        return self.trace[-1][1]


def converge_radius(m, tau: MemoryLaw, tol: float = 1e-8, max_depth: int = 20,
                    max_states: int = MAX_STATES, inner_tol: float | None = None) -> RadiusEnclosure:
    """Radii r_ell for ell = 1, 2, ... until two successive values differ by < tol.

    For bounded tau the computation stops at ell = max Supp(tau) + 1 where the
    truncation is exact.  Otherwise the certified upper bound is the smaller of
    the Harnack bound and the maximal row sum; ``heuristic_upper`` adds
    a_ell * max row sum to the last radius and carries no guarantee.
    """
    m = np.asarray(m, dtype=float)
    n = m.shape[0]
    inner_tol = min(tol, 1e-10) if inner_tol is None else inner_tol
    pf = perron_frobenius(m)
    _, h_upper = harnack_enclosure(pf)
    row_max = float(m.sum(axis=1).max())
    exact_depth = tau.max_support + 1 if tau.bounded else None
    trace: list[tuple[int, float]] = []
    v = None
    last = None
    converged = False
    for depth in range(1, max_depth + 1):
        if n ** depth > max_states:
            raise BudgetError(depth, n, max_states)
        op = lift(m, tau, depth, max_states=max_states)
        res = radius(op, inner_tol, v0=v)
        trace.append((depth, res.value))
        last = res
        v = np.repeat(res.vector, n)
        if exact_depth is not None and depth >= exact_depth:
            return RadiusEnclosure(res.lower, res.upper, trace, exact=True, converged=True)
        if len(trace) > 1 and abs(trace[-1][1] - trace[-2][1]) < tol:
            converged = True
            break
    upper = min(h_upper, row_max)
    heuristic = min(upper, last.value + tau.tail(trace[-1][0]) * row_max)
    return RadiusEnclosure(last.lower, upper, trace, exact=False, converged=converged,
                           heuristic_upper=heuristic)
