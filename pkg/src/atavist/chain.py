"""The biased (spine) chain on symbols (Y, memory) and its asymptotic coupling.

At each step a depth j ~ tau is drawn, the type s_j is read from the memory,
the new type t is drawn from the normalised matrix row mbar(s_j, .), and the
new symbol is (s_j, t s).  Single trajectories run in a plain Python loop;
batches of trajectories (many-to-one estimates, couplings) are vectorised
across replicates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import InitialMemory, MemoryLaw, ModelSpec
from .sampling import AliasTable, RowAlias
from .spectral import PFTriple, normalized, perron_frobenius

LCP_HORIZON = 10**4
INFINITE_PREFIX = 2**62


class _InitCache:
    """Materialised head of an initial memory, grown by doubling on demand."""

    def __init__(self, init: InitialMemory, n: int = 64):
        self.init = init
        self.values = np.asarray(init.materialize(n), dtype=np.int64)

    def get(self, pos: np.ndarray) -> np.ndarray:
        need = int(pos.max()) + 1 if pos.size else 0
        if need > len(self.values):
            n = len(self.values)
            while n < need:
                n *= 2
            self.values = np.asarray(self.init.materialize(n), dtype=np.int64)
        return self.values[pos]


@dataclass
class ChainState:
    """Symbol (Y, memory) after ``k`` steps.

    The memory is X_k, ..., X_1 followed by the initial memory.  ``history``
    holds X_1, X_2, ... and may be shared between successive states; a state
    only ever reads its first ``k`` entries.
    """

    y: int
    init: InitialMemory
    history: list = field(default_factory=list)
    k: int = 0

    def lookup(self, j: int) -> int:
        if j < self.k:
            return self.history[self.k - 1 - j]
        return self.init.lookup(j - self.k)

    @property
    def x(self) -> int:
        return self.lookup(0)

    def prefix(self, n: int) -> tuple[int, ...]:
        return tuple(self.lookup(j) for j in range(n))


def _draw_row(mbar: np.ndarray, s: int, u: float) -> int:
    cdf = np.cumsum(mbar[s])
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(cdf) - 1))


def step(state: ChainState, mbar: np.ndarray, tau: MemoryLaw, rng: np.random.Generator) -> ChainState:
    """One transition of the biased chain."""
    j = int(tau.sample(rng, 1)[0])
    s = state.lookup(j)
    t = _draw_row(mbar, s, rng.random())
    hist = state.history
    if len(hist) != state.k:
        hist = hist[: state.k]
    hist.append(t)
    return ChainState(s, state.init, hist, state.k + 1)


@dataclass(frozen=True)
class TrajectoryStats:
    """Summary of one trajectory (Y_j, X_j), j = 1..k."""

    k: int
    birkhoff_sum: float
    y_counts: np.ndarray
    pair_counts: np.ndarray
    log_weight: float

    @property
    def birkhoff_gap(self) -> float:
        return self.birkhoff_sum / self.k

    @property
    def weight(self) -> float:
        """prod h(Y_j)/h(X_j); may overflow for long runs, use ``log_weight``."""
        return math.exp(self.log_weight)


@dataclass(frozen=True)
class Marginals:
    y_law: np.ndarray
    pair_law: np.ndarray
    y_predicted: np.ndarray
    pair_predicted: np.ndarray

    @property
    def y_error(self) -> float:
        return float(np.abs(self.y_law - self.y_predicted).max())

    @property
    def pair_error(self) -> float:
        return float(np.abs(self.pair_law - self.pair_predicted).max())


class BiasedChain:
    """Precomputed samplers for the biased chain of a model."""

    def __init__(self, model: ModelSpec, pf: PFTriple | None = None):
        self.model = model
        self.m = model.mean
        self.tau = model.tau
        self.pf = perron_frobenius(self.m) if pf is None else pf
        self.mbar = normalized(self.m, self.pf)
        self.n_types = model.n_types
        self.rows = RowAlias(self.mbar)
        self.log_h = np.log(self.pf.h)
        self._tau_alias = AliasTable(self.tau.probs) if self.tau.bounded else None

    def sample_depths(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self._tau_alias is not None:
            return self._tau_alias.sample(rng, size)
        return self.tau.sample(rng, size)

    def step(self, state: ChainState, rng: np.random.Generator) -> ChainState:
        return step(state, self.mbar, self.tau, rng)

    # -- single trajectories -------------------------------------------------------

    def trajectory(self, init: InitialMemory, k: int, rng: np.random.Generator):
        """Arrays (Y_1..Y_k, X_1..X_k) of one trajectory started from ``init``."""
        depths = self.sample_depths(rng, k)
        us = (rng.random(k) * self.n_types).tolist()
        head = init.materialize(int(depths.max()) + 1 if k else 1)
        accept = self.rows.accept.tolist()
        alias = self.rows.alias.tolist()
        top = self.n_types - 1
        hist: list[int] = []
        ys = [0] * k
        append = hist.append
        for i, j in enumerate(depths.tolist()):
            s = hist[i - 1 - j] if j < i else head[j - i]
            x = us[i]
            c = int(x)
            if c > top:
                c = top
            append(c if x - c < accept[s][c] else alias[s][c])
            ys[i] = s
        return np.asarray(ys, dtype=np.int64), np.asarray(hist, dtype=np.int64)

    def stats(self, ys: np.ndarray, xs: np.ndarray) -> TrajectoryStats:
        n = self.n_types
        diff = self.log_h[ys] - self.log_h[xs]
        total = float(math.fsum(diff))
        y_counts = np.bincount(ys, minlength=n)
        pair_counts = np.bincount(ys * n + xs, minlength=n * n).reshape(n, n)
        return TrajectoryStats(len(ys), total, y_counts, pair_counts, total)

    def birkhoff_gap(self, init: InitialMemory, k: int, rng: np.random.Generator) -> float:
        """(1/k) sum_{j<=k} (log h(Y_j) - log h(X_j)) along one trajectory."""
        if k < 1:
            raise ValueError("k must be at least 1")
        ys, xs = self.trajectory(init, k, rng)
        return self.stats(ys, xs).birkhoff_gap

    def predicted_marginals(self) -> tuple[np.ndarray, np.ndarray]:
        rho, h, r = self.pf.rho, self.pf.h, self.pf.r
        return rho * h, rho[:, None] * self.m * h[None, :] / r

    def marginals_from(self, ys: np.ndarray, xs: np.ndarray) -> Marginals:
        st = self.stats(ys, xs)
        y_pred, pair_pred = self.predicted_marginals()
        return Marginals(st.y_counts / st.k, st.pair_counts / st.k, y_pred, pair_pred)

    def empirical_marginals(self, init: InitialMemory, k: int, rng: np.random.Generator) -> Marginals:
        """Empirical law of Y and of (Y, s0) along one trajectory, with their predicted values."""
        return self.marginals_from(*self.trajectory(init, k, rng))

    # -- batches ----------------------------------------------------------------

    def _lookup(self, mem: np.ndarray, cache: _InitCache, j: np.ndarray, i: int) -> np.ndarray:
        inside = j < i
        rows = np.arange(mem.shape[0])
        col = np.where(inside, i - 1 - j, 0)
        head = cache.get(np.where(inside, 0, j - i))
        return np.where(inside, mem[rows, col], head)

    def batch(self, init: InitialMemory, k: int, n: int, rng: np.random.Generator):
        """n independent trajectories of length k.

        Returns (memory, log_weight) where memory[:, i] = X_{i+1} and
        log_weight = sum_j log h(Y_j) - log h(X_j).
        """
        mem = np.zeros((n, k), dtype=np.int64)
        logw = np.zeros(n)
        cache = _InitCache(init)
        for i in range(k):
            j = self.sample_depths(rng, n)
            s = self._lookup(mem, cache, j, i)
            t = self.rows.draw(s, rng.random(n))
            mem[:, i] = t
            logw += self.log_h[s] - self.log_h[t]
        return mem, logw

    def one_step(self, init: InitialMemory, n: int, rng: np.random.Generator):
        """n independent draws of (Y_1, X_1) from the same initial memory."""
        j = self.sample_depths(rng, n)
        s = _InitCache(init).get(j)
        return s, self.rows.draw(s, rng.random(n))


def prefixes_at(mem: np.ndarray, init: InitialMemory, length: int) -> np.ndarray:
    """First ``length`` memory entries after the last recorded step of each row."""
    n, k = mem.shape
    out = np.empty((n, length), dtype=np.int64)
    for j in range(length):
        if j < k:
            out[:, j] = mem[:, k - 1 - j]
        else:
            out[:, j] = init.lookup(j - k)
    return out


@dataclass(frozen=True)
class MonteCarloEstimate:
    estimate: float
    std_error: float
    n: int


def many_to_one(chain: BiasedChain, s0: InitialMemory, k: int, n: int, rng: np.random.Generator,
                f=None, f_depth: int = 1) -> MonteCarloEstimate:
    """Estimate (m^k f)(s0) as r^k E[f(X_k) prod h(Y_j)/h(X_j)] over n trajectories.

    ``f`` maps an (n, f_depth) array of memory prefixes to values; None means f = 1.
    """
    if k < 0 or n < 1:
        raise ValueError("need k >= 0 and n >= 1")
    mem, logw = chain.batch(s0, k, n, rng)
    if f is None:
        fx = np.ones(n)
    else:
        fx = np.asarray(f(prefixes_at(mem, s0, f_depth)), dtype=float)
    vals = chain.pf.r ** k * fx * np.exp(logw)
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return MonteCarloEstimate(float(vals.mean()), se, n)


# -- coupling ----------------------------------------------------------------------


def initial_common_prefix(a: InitialMemory, b: InitialMemory, horizon: int = LCP_HORIZON) -> int:
    """Common prefix length of two initial memories; INFINITE_PREFIX if they agree up to ``horizon``."""
    if a == b:
        return INFINITE_PREFIX
    xa = np.asarray(a.materialize(horizon))
    xb = np.asarray(b.materialize(horizon))
    diff = np.nonzero(xa != xb)[0]
    return int(diff[0]) if diff.size else INFINITE_PREFIX


@dataclass(frozen=True)
class CouplingStats:
    """Per-run statistics of coupled trajectories.

    ``last_failure`` is the last failed step (0 if none), ``gamma`` the first
    k >= 0 with X_k = X'_k (-1 if never), ``success`` the per-step record when
    requested.
    """

    steps: int
    failures: np.ndarray
    last_failure: np.ndarray
    gamma: np.ndarray
    final_prefix: np.ndarray
    success: np.ndarray | None = None
    y1: np.ndarray | None = None
    x1: np.ndarray | None = None
    y2: np.ndarray | None = None
    x2: np.ndarray | None = None

    def failure_free_fraction(self, start: int) -> float:
        """Fraction of runs with no failed step in [start, steps]."""
        return float(np.mean(self.last_failure < start))


def coupled_run(chain: BiasedChain, init1: InitialMemory, init2: InitialMemory, steps: int,
                rng: np.random.Generator, runs: int = 1, record: bool = False,
                horizon: int = LCP_HORIZON) -> CouplingStats:
    """Run ``runs`` independent copies of the bivariate chain for ``steps`` steps.

    One depth j ~ tau is shared per step.  When j is below the current common
    prefix length both chains activate the same type and take the same new
    type; otherwise each draws its new type independently from its own
    activated type.  The common prefix length after a step is 1 + the old one
    when the new types agree and 0 otherwise, so it is tracked exactly without
    rescanning.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    n = runs
    mem1 = np.zeros((n, steps), dtype=np.int64)
    mem2 = np.zeros((n, steps), dtype=np.int64)
    c1, c2 = _InitCache(init1), _InitCache(init2)
    lcp = np.full(n, initial_common_prefix(init1, init2, horizon), dtype=np.int64)
    failures = np.zeros(n, dtype=np.int64)
    last_failure = np.zeros(n, dtype=np.int64)
    gamma = np.full(n, 0 if init1.lookup(0) == init2.lookup(0) else -1, dtype=np.int64)
    success = np.zeros((n, steps), dtype=bool) if record else None
    keep = record and steps == 1
    for i in range(steps):
        j = chain.sample_depths(rng, n)
        shared = j < lcp
        a1 = chain._lookup(mem1, c1, j, i)
        a2 = chain._lookup(mem2, c2, j, i)
        u1 = rng.random(n)
        u2 = rng.random(n)
        t1 = chain.rows.draw(a1, u1)
        t2 = np.where(shared, t1, chain.rows.draw(a2, u2))
        mem1[:, i] = t1
        mem2[:, i] = t2
        same = t1 == t2
        lcp = np.where(same, np.minimum(lcp, INFINITE_PREFIX - 1) + 1, 0)
        ok = same & (a1 == a2)
        failures += ~ok
        last_failure = np.where(ok, last_failure, i + 1)
        gamma = np.where((gamma < 0) & same, i + 1, gamma)
        if record:
            success[:, i] = ok
    extra = {}
    if keep:
        extra = dict(y1=a1, x1=t1, y2=a2, x2=t2)
    return CouplingStats(steps, failures, last_failure, gamma, lcp, success, **extra)


@dataclass(frozen=True)
class ConsolidationBound:
    """prod_{k=1}^{kmax} (1 - a_k) and a multiplicative estimate of the omitted factors."""

    product: float
    tail_factor: float
    kmax: int

    @property
    def lower(self) -> float:
        return self.product * self.tail_factor


def consolidation_bound(tau: MemoryLaw, kmax: int = 200) -> ConsolidationBound:
    if tau.pmf(0) <= 0:
        return ConsolidationBound(0.0, 0.0, kmax)
    log_prod = 0.0
    for k in range(1, kmax + 1):
        a = tau.tail(k)
        if a >= 1.0:
            return ConsolidationBound(0.0, 0.0, kmax)
        if a == 0.0:
            return ConsolidationBound(math.exp(log_prod), 1.0, kmax)
        log_prod += math.log1p(-a)
    if tau.kind == "geometric":
        q = 1.0 - tau.p
        rest = q ** (kmax + 1) / tau.p
    else:
        rest = math.fsum(tau.tail(k) for k in range(kmax + 1, len(tau.probs)))
    tail_factor = math.exp(-rest / (1.0 - tau.tail(kmax)))
    return ConsolidationBound(math.exp(log_prod), tail_factor, kmax)
