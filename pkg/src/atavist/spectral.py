"""Perron-Frobenius analysis of the memoryless mean matrix."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import ModelError, is_primitive

DEFAULT_TOL = 1e-10
MAX_ITER = 10**6


class ConvergenceError(RuntimeError):
    """Power iteration hit its cap; ``bracket`` holds the last certified enclosure."""

    def __init__(self, msg, bracket):
        super().__init__(f"{msg} (last bracket [{bracket[0]!r}, {bracket[1]!r}])")
        self.bracket = bracket


@dataclass(frozen=True)
class CWResult:
    value: float
    lower: float
    upper: float
    vector: np.ndarray
    iterations: int


def collatz_wielandt(
    matvec: Callable[[np.ndarray], np.ndarray],
    v0: np.ndarray,
    tol: float,
    max_iter: int = MAX_ITER,
    shift: float = 0.0,
) -> CWResult:
    """Power iteration on A + shift*I with Collatz-Wielandt brackets.

    For any positive v, min (Av)/v <= rho(A) <= max (Av)/v.  The lower bound is
    also taken on the principal submatrix where v is non-negligible, which is
    still a valid bound and lets the bracket close on reducible operators whose
    Perron vector vanishes on part of the space.  Stops once
    upper - lower <= tol * upper.
    """
    v = np.array(v0, dtype=float)
    v /= v.max()
    lower, upper = 0.0, np.inf
    floor = 1e-250
    for it in range(1, max_iter + 1):
        np.maximum(v, floor, out=v)
        w = matvec(v)
        if shift:
            w = w + shift * v
        ratio = w / v
        upper = min(upper, float(ratio.max()))
        lo = float(ratio.min())
        if upper - max(lower, lo) > tol * upper:
            keep = v > 1e-9
            if not keep.all():
                vk = np.where(keep, v, 0.0)
                wk = matvec(vk) + shift * vk
                lo = max(lo, float((wk[keep] / v[keep]).min()))
        lower = max(lower, lo)
        v = w / w.max()
        if upper - lower <= tol * upper:
            break
    else:
        raise ConvergenceError(
            f"power iteration did not converge in {max_iter} iterations",
            (lower - shift, upper - shift),
        )
    lower -= shift
    upper -= shift
    return CWResult(0.5 * (lower + upper), lower, upper, v, it)


@dataclass(frozen=True)
class PFTriple:
    """Spectral radius r, left eigen-law rho (sums to 1) and right eigenvector h with rho.h = 1."""

    r: float
    rho: np.ndarray
    h: np.ndarray
    bracket: tuple[float, float]


def perron_frobenius(m, tol: float = DEFAULT_TOL, max_iter: int = MAX_ITER) -> PFTriple:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ModelError("mean matrix must be square")
    if np.any(m < 0) or not is_primitive(m):
        raise ModelError("Perron-Frobenius triple needs a nonnegative primitive matrix")
    n = m.shape[0]
    ones = np.ones(n)
    right = collatz_wielandt(lambda v: m @ v, ones, tol, max_iter)
    left = collatz_wielandt(lambda v: v @ m, ones, tol, max_iter)
    lower = max(right.lower, left.lower)
    upper = min(right.upper, left.upper)
    r = 0.5 * (lower + upper)
    rho = left.vector / left.vector.sum()
    rows = m.sum(axis=1)
    if rows.max() - rows.min() <= 64 * np.finfo(float).eps * rows.max():
        # equal row sums: the constant function is an exact eigenvector
        h = np.ones(n)
    else:
        h = right.vector / (rho @ right.vector)
    rho.setflags(write=False)
    h.setflags(write=False)
    return PFTriple(r, rho, h, (lower, upper))


def normalized(m, pf: PFTriple) -> np.ndarray:
    """Row-stochastic matrix m(s,t) h(t) / (r h(s))."""
    m = np.asarray(m, dtype=float)
    out = m * pf.h[None, :] / (pf.r * pf.h[:, None])
    # rows sum to 1 up to the eigen residual; remove that drift
    out /= out.sum(axis=1, keepdims=True)
    return out


def harnack_enclosure(pf: PFTriple) -> tuple[float, float]:
    """(r min h / max h, r max h / min h), which brackets the memory growth rate."""
    q = float(pf.h.max() / pf.h.min())
    return pf.r / q, pf.r * q
