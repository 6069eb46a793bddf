"""Branching process with memory, simulated on a shared genealogy.

Two representations of the same tree:

* :class:`GenealogyNode` -- one object per individual holding its type and a
  reference to its parent.  Ancestors stay alive exactly as long as some
  descendant refers to them.  Handy for small trees and for inspection.
* :class:`Generation` -- columnar arrays (type, parent index, run id) per
  generation, used by :func:`simulate` for Monte Carlo at scale.  Ancestors no
  longer referenced by the living generation are pruned after every step.

Lookups past the founders fall back to the founders' initial memories.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .lifted import lift
from .model import InitialMemory, ModelSpec, OffspringKernel
from .sampling import AliasTable, stream

DEFAULT_CAP = 10**6


@dataclass(frozen=True, eq=False)
class GenealogyNode:
    type: int
    parent: "GenealogyNode | None" = None
    depth: int = 0
    memory: InitialMemory | None = None  # roots only

    @classmethod
    def root(cls, memory: InitialMemory) -> "GenealogyNode":
        return cls(memory.lookup(0), None, 0, memory)

    def ancestor_type(self, j: int) -> int:
        """Type of the forebear j generations back (j = 0 is the node itself)."""
        node = self
        while j > 0 and node.parent is not None:
            node = node.parent
            j -= 1
        if j == 0:
            return node.type
        return node.memory.lookup(j)

    def memory_prefix(self, n: int) -> tuple[int, ...]:
        return tuple(self.ancestor_type(j) for j in range(n))


class OffspringSampler:
    """Vectorised draws of offspring vectors given activated types."""

    def __init__(self, kernel: OffspringKernel):
        self.kernel = kernel
        if kernel.family == "finite":
            self._tables = [AliasTable(p) for _, p in kernel.atoms]

    def counts(self, activated: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """(N, |S|) array of children counts per type."""
        k = self.kernel
        activated = np.asarray(activated, dtype=np.int64)
        if k.family == "poisson":
            return rng.poisson(k.means[activated])
        if k.family == "deterministic":
            return k.children[activated].copy()
        out = np.zeros((len(activated), k.n_types), dtype=np.int64)
        for s, (vecs, _) in enumerate(k.atoms):
            sel = np.nonzero(activated == s)[0]
            if sel.size:
                out[sel] = vecs[self._tables[s].sample(rng, sel.size)]
        return out

    def children(self, activated: np.ndarray, rng: np.random.Generator):
        """(parent index, child type) arrays for one generation of parents."""
        k = self.kernel
        n_types = k.n_types
        if k.family == "poisson":
            # Given the number of parents per activated type, independent Poisson
            # counts per parent equal a Poisson total split uniformly among them.
            parents, types = [], []
            for s in range(n_types):
                sel = np.nonzero(activated == s)[0]
                if not sel.size:
                    continue
                for t in range(n_types):
                    lam = k.means[s, t]
                    if lam <= 0:
                        continue
                    total = rng.poisson(lam * sel.size)
                    parents.append(sel[rng.integers(0, sel.size, size=total)])
                    types.append(np.full(total, t, dtype=np.int8))
            if not parents:
                return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int8)
            return np.concatenate(parents), np.concatenate(types)
        counts = self.counts(activated, rng)
        idx = np.arange(len(activated))
        parents = [np.repeat(idx, counts[:, t]) for t in range(n_types)]
        types = [np.full(len(p), t, dtype=np.int8) for t, p in enumerate(parents)]
        return np.concatenate(parents), np.concatenate(types)


def sample_offspring(node: GenealogyNode, model: ModelSpec, rng: np.random.Generator,
                     sampler: OffspringSampler | None = None) -> list[GenealogyNode]:
    """Children of one individual: activate the type T ~ tau generations back, then reproduce."""
    sampler = sampler or OffspringSampler(model.kernel)
    j = int(model.tau.sample(rng, 1)[0])
    activated = node.ancestor_type(j)
    counts = sampler.counts(np.array([activated]), rng)[0]
    return [GenealogyNode(t, node, node.depth + 1)
            for t in range(model.n_types) for _ in range(int(counts[t]))]


def grow_tree(model: ModelSpec, founders: list[InitialMemory], k_max: int,
              rng: np.random.Generator, cap: int = 10**5) -> list[list[GenealogyNode]]:
    """Node-based simulation; returns the list of generations (small populations only)."""
    sampler = OffspringSampler(model.kernel)
    gens = [[GenealogyNode.root(f) for f in founders]]
    for _ in range(k_max):
        nxt = [c for node in gens[-1] for c in sample_offspring(node, model, rng, sampler)]
        gens.append(nxt)
        if not nxt or len(nxt) > cap:
            break
    return gens


@dataclass
class Generation:
    """Living individuals at generation k, as parallel arrays.

    ``parent`` indexes the previous stored generation; founders carry
    ``founder`` (index into the founding memories) instead.
    """

    k: int
    types: np.ndarray
    parent: np.ndarray
    run: np.ndarray
    founder: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.types)


def founding_generation(founders: list[InitialMemory], runs: int) -> Generation:
    nf = len(founders)
    types = np.array([f.lookup(0) for f in founders] * runs, dtype=np.int8)
    return Generation(
        0,
        types,
        np.full(nf * runs, -1, dtype=np.int64),
        np.repeat(np.arange(runs, dtype=np.int64), nf),
        np.tile(np.arange(nf, dtype=np.int64), runs),
    )


class Genealogy:
    """Stored generations of a batch of runs, oldest first."""

    def __init__(self, founders: list[InitialMemory], runs: int, lookback: int | None):
        self.founders = founders
        self.lookback = lookback
        self.gens = [founding_generation(founders, runs)]

    @property
    def current(self) -> Generation:
        return self.gens[-1]

    def ancestor_types(self, depth: np.ndarray) -> np.ndarray:
        """Type ``depth[i]`` generations above individual i of the current generation."""
        cur = self.current
        out = cur.types.astype(np.int64)
        idx = np.nonzero(depth > 0)[0]
        pos = idx.copy()
        rem = depth[idx].astype(np.int64)
        level = len(self.gens) - 1
        while idx.size:
            g = self.gens[level]
            if g.k == 0:
                f = g.founder[pos]
                for fi in np.unique(f):
                    sel = f == fi
                    out[idx[sel]] = self.founders[fi].lookup_many(rem[sel])
                break
            if level == 0:
                raise ValueError("lookback reaches past the stored generations")
            pos = g.parent[pos]
            level -= 1
            rem -= 1
            done = rem == 0
            out[idx[done]] = self.gens[level].types[pos[done]]
            keep = ~done
            idx, pos, rem = idx[keep], pos[keep], rem[keep]
        return out

    def prefixes(self, n: int) -> np.ndarray:
        """Materialised memory prefixes of length n for the current generation."""
        m = len(self.current)
        return np.column_stack([self.ancestor_types(np.full(m, j)) for j in range(n)]) \
            if m else np.empty((0, n), dtype=np.int64)

    def push(self, gen: Generation):
        self.gens.append(gen)
        if self.lookback is not None:
            # never need more than lookback generations above the living one
            excess = len(self.gens) - (self.lookback + 1)
            if excess > 0 and self.gens[excess].k > 0:
                del self.gens[:excess]
        self._prune()

    def keep_only(self, mask: np.ndarray):
        cur = self.current
        self.gens[-1] = Generation(cur.k, cur.types[mask], cur.parent[mask], cur.run[mask],
                                   None if cur.founder is None else cur.founder[mask])
        self._prune()

    def _prune(self):
        # drop ancestors with no living descendant, re-indexing parent links
        for level in range(len(self.gens) - 1, 0, -1):
            child, par = self.gens[level], self.gens[level - 1]
            live = np.bincount(child.parent, minlength=len(par)) > 0
            if live.all():
                continue
            used = np.flatnonzero(live)
            child.parent = (np.cumsum(live) - 1)[child.parent]
            self.gens[level - 1] = Generation(
                par.k, par.types[used], par.parent[used], par.run[used],
                None if par.founder is None else par.founder[used])

    def stored(self) -> int:
        return sum(len(g) for g in self.gens)


def reproduce(genealogy: Genealogy, model: ModelSpec, sampler: OffspringSampler,
              rng: np.random.Generator) -> Generation:
    cur = genealogy.current
    depth = model.tau.sample(rng, len(cur)) if len(cur) else np.empty(0, dtype=np.int64)
    activated = genealogy.ancestor_types(depth)
    parents, types = sampler.children(activated, rng)
    return Generation(cur.k + 1, types, parents, cur.run[parents])


@dataclass
class RunStats:
    """Per-run generation sizes and type histograms.

    ``valid[r, k]`` is False once run r was truncated at the population cap.
    """

    sizes: np.ndarray
    histograms: np.ndarray
    valid: np.ndarray
    truncated_at: np.ndarray
    extinct_at: np.ndarray
    seed: int | None = None
    chunk: np.ndarray | None = None

    @property
    def runs(self) -> int:
        return self.sizes.shape[0]

    @staticmethod
    def concat(parts: list["RunStats"]) -> "RunStats":
        return RunStats(
            np.concatenate([p.sizes for p in parts]),
            np.concatenate([p.histograms for p in parts]),
            np.concatenate([p.valid for p in parts]),
            np.concatenate([p.truncated_at for p in parts]),
            np.concatenate([p.extinct_at for p in parts]),
            parts[0].seed if parts else None,
            np.concatenate([p.chunk for p in parts]) if parts and parts[0].chunk is not None else None,
        )


def simulate(model: ModelSpec, founders: list[InitialMemory], k_max: int, rng: np.random.Generator,
             runs: int = 1, cap: int = DEFAULT_CAP) -> RunStats:
    """Simulate ``runs`` independent populations for k_max generations.

    Each run starts from one individual per founding memory.  A run is stopped
    (and flagged) once it exceeds ``cap`` individuals or dies out.
    """
    if cap < 1:
        raise ValueError("cap must be at least 1")
    n = model.n_types
    lookback = model.tau.max_support
    genealogy = Genealogy(list(founders), runs, lookback)
    sampler = OffspringSampler(model.kernel)
    sizes = np.zeros((runs, k_max + 1), dtype=np.int64)
    hist = np.zeros((runs, k_max + 1, n), dtype=np.int64)
    valid = np.zeros((runs, k_max + 1), dtype=bool)
    truncated = np.full(runs, -1, dtype=np.int64)
    extinct = np.full(runs, -1, dtype=np.int64)
    alive = np.ones(runs, dtype=bool)

    def record(k: int, gen: Generation):
        cnt = np.bincount(gen.run * n + gen.types.astype(np.int64), minlength=runs * n).reshape(runs, n)
        hist[:, k] = cnt
        sizes[:, k] = cnt.sum(axis=1)
        # extinct runs stay valid with size 0; only truncated runs drop out
        valid[truncated < 0, k] = True

    record(0, genealogy.current)
    for k in range(1, k_max + 1):
        genealogy.push(reproduce(genealogy, model, sampler, rng))
        record(k, genealogy.current)
        died = alive & (sizes[:, k] == 0)
        extinct[died] = k
        over = alive & (sizes[:, k] > cap)
        if over.any():
            truncated[over] = k
            valid[over, k] = False
            genealogy.keep_only(~over[genealogy.current.run])
        alive &= ~(died | over)
        if not alive.any():
            valid[truncated < 0, k + 1:] = True
            break
    return RunStats(sizes, hist, valid, truncated, extinct)


def _simulate_chunk(args):
    model, founders, k_max, runs, cap, seed, chunk = args
    st = simulate(model, founders, k_max, stream(seed, "population", chunk), runs, cap)
    st.chunk = np.full(runs, chunk, dtype=np.int64)
    st.seed = seed
    return st


def simulate_runs(model: ModelSpec, founders: list[InitialMemory], k_max: int, runs: int, seed: int,
                  cap: int = DEFAULT_CAP, chunk_size: int = 250, workers: int = 1) -> RunStats:
    """Runs split into fixed-size chunks, each with its own stream (seed, chunk).

    Results depend only on (seed, chunk_size), not on ``workers``.
    """
    jobs = []
    for c, start in enumerate(range(0, runs, chunk_size)):
        jobs.append((model, founders, k_max, min(chunk_size, runs - start), cap, seed, c))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_simulate_chunk, jobs))
    else:
        parts = [_simulate_chunk(j) for j in jobs]
    return RunStats.concat(parts)


def prefix_law(model: ModelSpec, memory: InitialMemory, depth: int | None = None) -> np.ndarray:
    """Point mass on the length-``depth`` prefix of ``memory``, as a vector over S^depth."""
    depth = depth or model.tau.max_support + 1
    op_n = model.n_types
    idx = 0
    for s in memory.materialize(depth):
        idx = idx * op_n + s
    law = np.zeros(op_n ** depth)
    law[idx] = 1.0
    return law


def exact_mean(model: ModelSpec, mu, k: int) -> float:
    """E_mu |Z_k| = mu m^k 1 for bounded tau, using the exact lifted operator.

    ``mu`` is a law over S^ell with ell = max Supp(tau) + 1, or an InitialMemory.
    """
    if not model.tau.bounded:
        raise ValueError("exact means need a memory law with bounded support; use Monte Carlo")
    depth = model.tau.max_support + 1
    op = lift(model.mean, model.tau, depth)
    if isinstance(mu, InitialMemory):
        mu = prefix_law(model, mu, depth)
    mu = np.asarray(mu, dtype=float)
    v = np.ones(op.size)
    for _ in range(k):
        v = op.matvec(v)
    return float(mu @ v)


@dataclass(frozen=True)
class GrowthEstimate:
    mean_sizes: np.ndarray
    std_errors: np.ndarray
    root_rates: np.ndarray
    slope: float
    intercept: float

    @property
    def rate(self) -> float:
        return math.exp(self.slope)


def estimate_growth(stats: RunStats) -> GrowthEstimate:
    """Mean |Z_k| over runs (valid generations only), (mean)^(1/k), and a log-linear fit."""
    valid = stats.valid
    counts = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        sizes = np.where(valid, stats.sizes, 0).astype(float)
        mean = sizes.sum(axis=0) / counts
        var = (np.where(valid, stats.sizes, 0) ** 2).sum(axis=0) / counts - mean**2
        se = np.sqrt(np.maximum(var, 0) / np.maximum(counts - 1, 1))
        k = np.arange(len(mean))
        roots = np.where(k > 0, mean ** (1.0 / np.maximum(k, 1)), np.nan)
    ok = np.isfinite(mean) & (mean > 0)
    if ok.sum() < 2:
        return GrowthEstimate(mean, se, roots, float("nan"), float("nan"))
    slope, intercept = np.polyfit(k[ok], np.log(mean[ok]), 1)
    return GrowthEstimate(mean, se, roots, float(slope), float(intercept))
