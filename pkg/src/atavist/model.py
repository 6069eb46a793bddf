"""Model inputs: type space, reproduction kernel, memory law and initial memories.

Everything here is an immutable value.  Numpy arrays held by these objects are
flagged read-only on construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_ATOL = 1e-12
MEAN_RTOL = 1e-9


class ModelError(ValueError):
    """Raised when a model document or a model component is malformed."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TypeSpace:
    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        if not labels:
            raise ModelError("type space must not be empty")
        if len(set(labels)) != len(labels):
            raise ModelError(f"type labels must be unique, got {labels}")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        if isinstance(label, (int, np.integer)):
            if not 0 <= label < len(self.labels):
                raise ModelError(f"type index {label} out of range")
            return int(label)
        try:
            return self.labels.index(str(label))
        except ValueError:
            raise ModelError(f"unknown type {label!r}") from None

    def encode(self, seq) -> tuple[int, ...]:
        return tuple(self.index(x) for x in seq)

    def decode(self, seq) -> tuple[str, ...]:
        return tuple(self.labels[i] for i in seq)


@dataclass(frozen=True)
class MemoryLaw:
    """Law of the lookback depth T.

    Either a finite vector ``probs`` (``probs[j] = P(T = j)``) or a geometric
    law ``P(T = j) = p (1 - p)**j``.
    """

    kind: str
    probs: tuple[float, ...] = ()
    p: float = 0.0

    def __post_init__(self):
        if self.kind == "finite":
            probs = tuple(float(x) for x in self.probs)
            if not probs:
                raise ModelError("finite memory law needs at least one probability")
            if any(not math.isfinite(x) or x < 0 for x in probs):
                raise ModelError(f"memory law probabilities must be finite and >= 0: {probs}")
            if abs(math.fsum(probs) - 1.0) > PROB_ATOL:
                raise ModelError(f"memory law probabilities sum to {math.fsum(probs)!r}, not 1")
            # trailing zeros carry no information and would distort max_support
            while len(probs) > 1 and probs[-1] == 0.0:
                probs = probs[:-1]
            object.__setattr__(self, "probs", probs)
        elif self.kind == "geometric":
            if not 0.0 < self.p <= 1.0:
                raise ModelError(f"geometric parameter must lie in (0, 1], got {self.p}")
            if self.p == 1.0:
                # degenerate: no memory
                object.__setattr__(self, "kind", "finite")
                object.__setattr__(self, "probs", (1.0,))
        else:
            raise ModelError(f"unknown memory law kind {self.kind!r}")

    @classmethod
    def finite(cls, probs: Sequence[float]) -> "MemoryLaw":
        return cls("finite", probs=tuple(probs))

    @classmethod
    def geometric(cls, p: float) -> "MemoryLaw":
        return cls("geometric", p=float(p))

    @classmethod
    def dirac(cls, j: int = 0) -> "MemoryLaw":
        return cls.finite([0.0] * j + [1.0])

    @property
    def bounded(self) -> bool:
        return self.kind == "finite"

    @property
    def max_support(self) -> int | None:
        """Largest j with positive mass, or None when the support is unbounded."""
        if self.kind == "geometric":
            return None
        return max(j for j, x in enumerate(self.probs) if x > 0)

    @property
    def mean(self) -> float:
        if self.kind == "geometric":
            return (1.0 - self.p) / self.p
        return math.fsum(j * x for j, x in enumerate(self.probs))

    def pmf(self, j: int) -> float:
        if j < 0:
            return 0.0
        if self.kind == "geometric":
            return self.p * (1.0 - self.p) ** j
        return self.probs[j] if j < len(self.probs) else 0.0

    def tail(self, k: int) -> float:
        """P(T >= k)."""
        if k <= 0:
            return 1.0
        if self.kind == "geometric":
            return (1.0 - self.p) ** k
        return min(1.0, math.fsum(self.probs[k:]))

    def weights(self, n: int) -> np.ndarray:
        """(P(T=0), ..., P(T=n-1)) without renormalisation."""
        return np.array([self.pmf(j) for j in range(n)])

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "geometric":
            # inverse CDF; numpy's geometric counts trials, so subtract one
            return rng.geometric(self.p, size=size) - 1
        from .sampling import AliasTable

        return AliasTable(self.probs).sample(rng, size)

    def to_dict(self) -> dict:
        if self.kind == "geometric":
            return {"geometric": self.p}
        return {"finite": list(self.probs)}


@dataclass(frozen=True)
class InitialMemory:
    """An infinite memory (s0, s1, ...) given by an explicit prefix and a rule.

    Positions past the prefix follow ``rule``:
      - ``"constant"``: every entry is ``value`` (a type index),
      - ``"periodic"``: entries cycle through the word ``value``,
      - ``"iid"``: entries are i.i.d. with law ``value`` (probabilities per
        type), generated lazily but deterministically from ``seed``.
    """

    prefix: tuple[int, ...] = ()
    rule: str = "constant"
    value: tuple = (0,)
    seed: int = 0

    _BLOCK = 1024

    def __post_init__(self):
        object.__setattr__(self, "prefix", tuple(int(x) for x in self.prefix))
        val = self.value
        if isinstance(val, (int, np.integer)):
            val = (int(val),)
        val = tuple(val)
        if self.rule == "constant":
            if len(val) != 1:
                raise ModelError("constant rule takes a single type")
            val = (int(val[0]),)
        elif self.rule == "periodic":
            if not val:
                raise ModelError("periodic rule needs a non-empty word")
            val = tuple(int(x) for x in val)
        elif self.rule == "iid":
            val = tuple(float(x) for x in val)
            if any(x < 0 for x in val) or abs(math.fsum(val) - 1.0) > PROB_ATOL:
                raise ModelError("iid rule needs a probability vector over types")
        else:
            raise ModelError(f"unknown initial memory rule {self.rule!r}")
        object.__setattr__(self, "value", val)

    @classmethod
    def constant(cls, t: int, prefix: Sequence[int] = ()) -> "InitialMemory":
        return cls(tuple(prefix), "constant", (t,))

    @classmethod
    def periodic(cls, word: Sequence[int], prefix: Sequence[int] = ()) -> "InitialMemory":
        return cls(tuple(prefix), "periodic", tuple(word))

    @classmethod
    def iid(cls, law: Sequence[float], seed: int = 0, prefix: Sequence[int] = ()) -> "InitialMemory":
        return cls(tuple(prefix), "iid", tuple(law), seed)

    def max_type(self) -> int:
        vals = list(self.prefix)
        if self.rule == "iid":
            vals.append(len(self.value) - 1)
        else:
            vals.extend(self.value)
        return max(vals)

    def _iid_block(self, b: int) -> np.ndarray:
        from .sampling import stream

        rng = stream(self.seed, "initial-memory", b)
        cdf = np.cumsum(self.value)
        draws = np.searchsorted(cdf, rng.random(self._BLOCK) * cdf[-1], side="right")
        return np.minimum(draws, len(self.value) - 1)

    def lookup(self, i: int) -> int:
        """Type of the forebear ``i`` generations back."""
        return int(self.lookup_many(np.array([i]))[0])

    def lookup_many(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if np.any(idx < 0):
            raise IndexError("memory positions are nonnegative")
        out = np.empty(idx.shape, dtype=np.int64)
        n = len(self.prefix)
        inside = idx < n
        if n:
            out[inside] = np.asarray(self.prefix)[idx[inside]]
        rest = ~inside
        pos = idx[rest] - n
        if self.rule == "constant":
            out[rest] = self.value[0]
        elif self.rule == "periodic":
            out[rest] = np.asarray(self.value)[pos % len(self.value)]
        else:
            vals = np.empty(pos.shape, dtype=np.int64)
            blocks = pos // self._BLOCK
            for b in np.unique(blocks):
                sel = blocks == b
                vals[sel] = self._iid_block(int(b))[pos[sel] % self._BLOCK]
            out[rest] = vals
        return out

    def materialize(self, n: int) -> tuple[int, ...]:
        return tuple(int(x) for x in self.lookup_many(np.arange(n)))

    def to_dict(self, types: TypeSpace) -> dict:
        d: dict = {}
        if self.prefix:
            d["prefix"] = list(types.decode(self.prefix))
        if self.rule == "constant":
            d["constant"] = types.labels[self.value[0]]
        elif self.rule == "periodic":
            d["periodic"] = list(types.decode(self.value))
        else:
            d["iid"] = dict(zip(types.labels, self.value))
            d["seed"] = self.seed
        return d


@dataclass(frozen=True)
class OffspringKernel:
    """Reproduction law per activated type.

    family ``"poisson"``: independent Poisson counts with means ``means[s]``;
    ``"deterministic"``: exactly ``children[s]``;
    ``"finite"``: ``atoms[s] = (vectors, probs)`` with vectors of shape (n, |S|).
    """

    family: str
    means: np.ndarray | None = None
    children: np.ndarray | None = None
    atoms: tuple = ()

    def __post_init__(self):
        if self.family == "poisson":
            object.__setattr__(self, "means", _frozen(self.means))
        elif self.family == "deterministic":
            ch = np.asarray(self.children)
            if np.any(ch < 0) or np.any(ch != np.round(ch)):
                raise ModelError("deterministic offspring must be nonnegative integers")
            object.__setattr__(self, "children", _frozen(ch, dtype=np.int64))
        elif self.family == "finite":
            atoms = []
            for vecs, probs in self.atoms:
                vecs = np.asarray(vecs, dtype=np.int64)
                probs = np.asarray(probs, dtype=float)
                if vecs.ndim != 2 or len(vecs) != len(probs):
                    raise ModelError("each finite atom list needs matching vectors and probabilities")
                if np.any(vecs < 0):
                    raise ModelError("offspring vectors must be nonnegative")
                if np.any(probs < 0) or abs(math.fsum(probs) - 1.0) > PROB_ATOL:
                    raise ModelError(f"offspring probabilities must sum to 1, got {math.fsum(probs)!r}")
                vecs.setflags(write=False)
                probs.setflags(write=False)
                atoms.append((vecs, probs))
            object.__setattr__(self, "atoms", tuple(atoms))
        else:
            raise ModelError(f"unknown offspring family {self.family!r}")

    @classmethod
    def poisson(cls, means) -> "OffspringKernel":
        return cls("poisson", means=np.asarray(means, dtype=float))

    @classmethod
    def deterministic(cls, children) -> "OffspringKernel":
        return cls("deterministic", children=np.asarray(children))

    @classmethod
    def finite(cls, atoms) -> "OffspringKernel":
        return cls("finite", atoms=tuple(atoms))

    @property
    def n_types(self) -> int:
        if self.family == "poisson":
            return self.means.shape[0]
        if self.family == "deterministic":
            return self.children.shape[0]
        return len(self.atoms)


def mean_from_kernel(kernel: OffspringKernel) -> np.ndarray:
    """Mean reproduction matrix: entry (s, t) is the expected number of type-t children."""
    if kernel.family == "poisson":
        return np.array(kernel.means, dtype=float)
    if kernel.family == "deterministic":
        return kernel.children.astype(float)
    return np.array([probs @ vecs for vecs, probs in kernel.atoms], dtype=float)


def is_primitive(m) -> bool:
    """Positivity of the Wielandt power of the support pattern, in exact boolean arithmetic."""
    b = np.asarray(m) != 0
    n = b.shape[0]
    exponent = (n - 1) ** 2 + 1
    result = np.eye(n, dtype=bool)
    base = b.copy()
    while exponent:
        if exponent & 1:
            result = (result.astype(np.int64) @ base.astype(np.int64)) > 0
        base = (base.astype(np.int64) @ base.astype(np.int64)) > 0
        exponent >>= 1
    return bool(result.all())


@dataclass(frozen=True)
class ModelSpec:
    types: TypeSpace
    mean: np.ndarray
    tau: MemoryLaw
    kernel: OffspringKernel | None = None
    initial_memory: InitialMemory = field(default_factory=InitialMemory)

    def __post_init__(self):
        m = np.array(self.mean, dtype=float)
        n = len(self.types)
        if m.shape != (n, n):
            raise ModelError(f"mean matrix must be {n}x{n}, got shape {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "mean", m)
        if self.kernel is None:
            object.__setattr__(self, "kernel", OffspringKernel.poisson(m))

    @property
    def n_types(self) -> int:
        return len(self.types)

    def with_tau(self, tau: MemoryLaw) -> "ModelSpec":
        return ModelSpec(self.types, self.mean, tau, self.kernel, self.initial_memory)

    def to_dict(self) -> dict:
        d = {
            "types": list(self.types.labels),
            "mean": self.mean.tolist(),
            "tau": self.tau.to_dict(),
            "initial_memory": self.initial_memory.to_dict(self.types),
        }
        k = self.kernel
        if k.family == "poisson" and not np.array_equal(k.means, self.mean):
            d["kernel"] = {"family": "poisson", "means": k.means.tolist()}
        elif k.family == "deterministic":
            d["kernel"] = {"family": "deterministic",
                           "children": dict(zip(self.types.labels, k.children.tolist()))}
        elif k.family == "finite":
            d["kernel"] = {"finite": {
                lab: [[v.tolist(), float(p)] for v, p in zip(vecs, probs)]
                for lab, (vecs, probs) in zip(self.types.labels, k.atoms)}}
        return d


@dataclass
class ValidationReport:
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def __bool__(self) -> bool:
        return self.ok

    def raise_if_failed(self):
        if self.failures:
            raise ModelError("; ".join(self.failures))


def validate(spec: ModelSpec) -> ValidationReport:
    report = ValidationReport()
    m = spec.mean
    n = spec.n_types
    if not np.all(np.isfinite(m)) or np.any(m < 0):
        report.failures.append("mean matrix entries must be finite and nonnegative")
    elif not is_primitive(m):
        report.failures.append("mean matrix is not primitive (irreducible and aperiodic)")
    if spec.tau.pmf(0) <= 0:
        report.failures.append("memory law must charge 0 (tau(0) > 0)")
    # total mass of tau is enforced when the MemoryLaw is built
    k = spec.kernel
    if k.n_types != n:
        report.failures.append(f"offspring kernel covers {k.n_types} types, expected {n}")
    else:
        km = mean_from_kernel(k)
        if km.shape != (n, n):
            report.failures.append("offspring vectors have the wrong dimension")
        elif not np.allclose(km, m, rtol=MEAN_RTOL, atol=MEAN_RTOL):
            report.failures.append("offspring kernel mean does not match the declared mean matrix")
    if spec.initial_memory.max_type() >= n:
        report.failures.append("initial memory refers to an unknown type")
    return report


def tail(tau: MemoryLaw, k: int) -> float:
    """a_k = P(T >= k)."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    return tau.tail(k)


def common_prefix_length(p: Sequence[int], q: Sequence[int]) -> int:
    n = 0
    for a, b in zip(p, q):
        if a != b:
            break
        n += 1
    return n


def memory_distance(p: Sequence[int], q: Sequence[int], tau: MemoryLaw) -> float:
    """Pseudo-distance a_L with L the longest common prefix; identical prefixes are at distance 0."""
    if len(p) != len(q):
        raise ValueError("memory_distance compares prefixes of equal length")
    n = common_prefix_length(p, q)
    if n == len(p):
        return 0.0
    return tau.tail(n)


# -- JSON model documents -------------------------------------------------------------


def _parse_tau(d) -> MemoryLaw:
    if not isinstance(d, dict) or len(d) != 1:
        raise ModelError('tau must be {"finite": [...]} or {"geometric": p}')
    if "finite" in d:
        return MemoryLaw.finite(d["finite"])
    if "geometric" in d:
        return MemoryLaw.geometric(float(d["geometric"]))
    raise ModelError(f"unknown tau specification {d!r}")


def _parse_initial(d, types: TypeSpace) -> InitialMemory:
    if d is None:
        return InitialMemory.constant(0)
    if not isinstance(d, dict):
        raise ModelError("initial_memory must be an object")
    prefix = types.encode(d.get("prefix", ()))
    if "constant" in d:
        return InitialMemory.constant(types.index(d["constant"]), prefix)
    if "periodic" in d:
        return InitialMemory.periodic(types.encode(d["periodic"]), prefix)
    if "iid" in d:
        law = d["iid"]
        if isinstance(law, dict):
            law = [float(law.get(lab, 0.0)) for lab in types.labels]
        return InitialMemory.iid(law, int(d.get("seed", 0)), prefix)
    raise ModelError(f"unknown initial_memory rule {d!r}")


def _parse_kernel(d, types: TypeSpace, mean) -> OffspringKernel:
    n = len(types)
    if "finite" in d:
        per_type = d["finite"]
        atoms = []
        for lab in types.labels:
            if lab not in per_type:
                raise ModelError(f"finite kernel lacks type {lab!r}")
            pairs = per_type[lab]
            vecs = [v for v, _ in pairs]
            probs = [float(p) for _, p in pairs]
            atoms.append((vecs, probs))
        return OffspringKernel.finite(atoms)
    family = d.get("family")
    if family == "poisson":
        means = d.get("means", mean)
        if means is None:
            raise ModelError("poisson kernel needs means or a top-level mean matrix")
        return OffspringKernel.poisson(means)
    if family == "deterministic":
        ch = d["children"]
        if isinstance(ch, dict):
            ch = [ch[lab] for lab in types.labels]
        return OffspringKernel.deterministic(np.asarray(ch).reshape(n, n))
    raise ModelError(f"unknown kernel specification {d!r}")


def model_from_dict(d: dict) -> ModelSpec:
    try:
        types = TypeSpace(tuple(d["types"]))
        mean = d.get("mean")
        kernel = _parse_kernel(d["kernel"], types, mean) if "kernel" in d else None
        if mean is None:
            if kernel is None:
                raise ModelError("model needs a mean matrix or an offspring kernel")
            mean = mean_from_kernel(kernel)
        tau = _parse_tau(d["tau"])
        init = _parse_initial(d.get("initial_memory"), types)
        return ModelSpec(types, np.asarray(mean, dtype=float), tau, kernel, init)
    except KeyError as e:
        raise ModelError(f"missing field {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, ModelError):
            raise
        raise ModelError(str(e)) from None


def load_model(path) -> ModelSpec:
    """Read a JSON model document.  ``json.JSONDecodeError`` propagates for malformed files."""
    with open(Path(path), encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ModelError("model document must be a JSON object")
    return model_from_dict(doc)


def example_model(u: float = 0.5) -> ModelSpec:
    """Two types a, b with mean matrix [[1, 1], [1, 2]] and tau = (u, 1 - u)."""
    return ModelSpec(
        TypeSpace(("a", "b")),
        np.array([[1.0, 1.0], [1.0, 2.0]]),
        MemoryLaw.finite([u, 1.0 - u]),
    )
