"""Command-line front end.

    atavist spectral [--model M]
    atavist lift     [--model M] --depth L
    atavist radius   [--model M] [--depth L | --max-depth L] [--u U] [--tol T]
    atavist chain    [--model M] --seed S --steps K [--replicates R]
    atavist couple   [--model M] --seed S --steps K [--replicates R] [--init2 JSON]
    atavist simulate [--model M] --seed S --k K [--replicates R] [--cap C]
    atavist sweep    [--u-grid a:b:n] [--depth L]

Without ``--model`` the two-type example model is used.  Every command prints
a report to stdout; ``--out`` writes a CSV atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chain import BiasedChain, coupled_run
from .lifted import BudgetError, converge_radius, lift, radius
from .model import InitialMemory, MemoryLaw, ModelError, ModelSpec, _parse_initial, example_model, \
    load_model, validate
from .population import estimate_growth, exact_mean, simulate_runs
from .sampling import stream
from .spectral import ConvergenceError, harnack_enclosure, normalized, perron_frobenius

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_VALIDATION = 4
EXIT_BUDGET = 5
EXIT_IO = 6
EXIT_CONVERGENCE = 7

STOCHASTIC = {"chain", "couple", "simulate"}
COMMANDS = ("spectral", "lift", "radius", "chain", "couple", "simulate", "sweep")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    model: Path | None = None
    seed: int | None = None
    out: Path | None = None
    depth: int | None = None
    max_depth: int = 12
    steps: int = 10**5
    replicates: int = 1
    k: int = 10
    tol: float = 1e-10
    u: float | None = None
    u_grid: str = "0:1:500"
    cap: int = 10**6
    workers: int = 1
    init2: str | None = None
    per_run: Path | None = None
    extra: dict = field(default_factory=dict)

    def check(self):
        if self.command in STOCHASTIC and self.seed is None:
            raise UsageError(f"'{self.command}' is stochastic and needs --seed")
        if self.seed is not None and not 0 <= self.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        for name in ("steps", "replicates", "cap", "workers", "max_depth"):
            if getattr(self, name) < 1:
                raise UsageError(f"--{name.replace('_', '-')} must be at least 1")
        if self.depth is not None and self.depth < 1:
            raise UsageError("--depth must be at least 1")
        if self.k < 0:
            raise UsageError("--k must be nonnegative")
        if self.tol <= 0:
            raise UsageError("--tol must be positive")
        if self.u is not None and not 0.0 <= self.u <= 1.0:
            raise UsageError("--u must lie in [0, 1]")


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6g}"


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) if isinstance(x, (int, float, np.integer, np.floating)) else x for x in row])
    return buf.getvalue()


def write_atomic(path: Path, text: str):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_grid(spec: str) -> np.ndarray:
    try:
        a, b, n = spec.split(":")
        a, b, n = float(a), float(b), int(n)
    except ValueError:
        raise UsageError(f"--u-grid expects a:b:n, got {spec!r}") from None
    if n < 1 or not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
        raise UsageError("--u-grid needs n >= 1 and endpoints in [0, 1]")
    return np.linspace(a, b, n)


def example_tau(u: float) -> MemoryLaw:
    return MemoryLaw.finite([u, 1.0 - u])


def sweep_example(u_grid, depth: int = 2, tol: float = 1e-10) -> list[tuple[float, float]]:
    """Radius of the example model lifted at ``depth`` for tau = (u, 1 - u), u over the grid."""
    m = example_model().mean
    out = []
    for u in u_grid:
        out.append((float(u), radius(lift(m, example_tau(float(u)), depth), tol).value))
    return out


class Runner:
    def __init__(self, cfg: RunConfig, stdout=None):
        self.cfg = cfg
        self.out = stdout or sys.stdout
        self.lines: list[str] = []

    def say(self, line: str = ""):
        self.lines.append(line)

    def load(self) -> tuple[ModelSpec, str]:
        cfg = self.cfg
        if cfg.model is None:
            model = example_model(0.5)
            digest = hashlib.sha256(json.dumps(model.to_dict(), sort_keys=True).encode()).hexdigest()
            source = "built-in example"
        else:
            try:
                raw = Path(cfg.model).read_bytes()
            except OSError as e:
                raise OSError(f"cannot read model file: {e}") from None
            digest = hashlib.sha256(raw).hexdigest()
            model = load_model(cfg.model)
            source = str(cfg.model)
        if cfg.u is not None:
            model = model.with_tau(example_tau(cfg.u))
        report = validate(model)
        degenerate = cfg.command == "radius" and cfg.u is not None and model.tau.pmf(0) == 0
        if not report.ok:
            only_tau0 = report.failures == ["memory law must charge 0 (tau(0) > 0)"]
            if not (degenerate and only_tau0):
                report.raise_if_failed()
            self.say("flag: tau(0) = 0 violates the standing assumption; computed as a degenerate lift")
        self.say(f"model: {source}")
        self.say(f"model sha256: {digest}")
        self.say(f"types: {', '.join(model.types.labels)}")
        self.say(f"tau: {json.dumps(model.tau.to_dict())}")
        if cfg.seed is not None:
            self.say(f"seed: {cfg.seed}")
        return model, digest

    def emit(self, header, rows):
        if self.cfg.out is not None:
            write_atomic(self.cfg.out, csv_text(header, rows))
            self.say(f"wrote {self.cfg.out}")

    def run(self) -> int:
        getattr(self, f"cmd_{self.cfg.command}")()
        print("\n".join(self.lines), file=self.out)
        return EXIT_OK

    # -- commands -----------------------------------------------------------------

    def cmd_spectral(self):
        model, _ = self.load()
        pf = perron_frobenius(model.mean, self.cfg.tol)
        lo, hi = harnack_enclosure(pf)
        mbar = normalized(model.mean, pf)
        self.say(f"r = {pf.r:.10g}  (bracket [{pf.bracket[0]:.12g}, {pf.bracket[1]:.12g}])")
        self.say("rho = " + ", ".join(f"{lab}: {x:.8g}" for lab, x in zip(model.types.labels, pf.rho)))
        self.say("h = " + ", ".join(f"{lab}: {x:.8g}" for lab, x in zip(model.types.labels, pf.h)))
        self.say(f"Harnack enclosure of the memory growth rate: [{lo:.8g}, {hi:.8g}]")
        labels = model.types.labels
        rows = [[lab, pf.rho[i], pf.h[i], *mbar[i]] for i, lab in enumerate(labels)]
        self.emit(["type", "rho", "h", *[f"mbar_{t}" for t in labels]], rows)

    def cmd_lift(self):
        model, _ = self.load()
        depth = self.cfg.depth or (model.tau.max_support + 1 if model.tau.bounded else 2)
        op = lift(model.mean, model.tau, depth, max_states=4096)
        dense = op.dense()
        names = ["".join(model.types.decode(op.prefix(i))) if all(len(x) == 1 for x in model.types.labels)
                 else "|".join(model.types.decode(op.prefix(i))) for i in range(op.size)]
        self.say(f"lifted operator at depth {depth}: {op.size} x {op.size}")
        for name, row in zip(names, dense):
            self.say(f"  {name:>{max(len(n) for n in names)}}: " + " ".join(f"{x:8.4g}" for x in row))
        self.emit(["prefix", *names], [[n, *row] for n, row in zip(names, dense)])

    def cmd_radius(self):
        model, _ = self.load()
        cfg = self.cfg
        pf = perron_frobenius(model.mean)
        lo, hi = harnack_enclosure(pf)
        self.say(f"memoryless r = {pf.r:.10g}; Harnack enclosure [{lo:.8g}, {hi:.8g}]")
        if cfg.depth is not None:
            res = radius(lift(model.mean, model.tau, cfg.depth), cfg.tol)
            self.say(f"r_{cfg.depth} = {res.value:.10g}  (certified bracket [{res.lower:.12g}, {res.upper:.12g}])")
            self.emit(["depth", "radius", "lower", "upper"], [[cfg.depth, res.value, res.lower, res.upper]])
            return
        enc = converge_radius(model.mean, model.tau, tol=max(cfg.tol, 1e-12), max_depth=cfg.max_depth)
        for d, r in enc.trace:
            self.say(f"  depth {d}: {r:.10g}")
        kind = "exact truncation" if enc.exact else ("stopping rule met" if enc.converged else "depth cap reached")
        self.say(f"enclosure of the memory growth rate: [{enc.lower:.10g}, {enc.upper:.10g}] ({kind})")
        if enc.heuristic_upper is not None:
            self.say(f"heuristic upper (last radius + a_l * max row sum, not certified): {enc.heuristic_upper:.10g}")
        self.emit(["depth", "radius"], enc.trace)

    def cmd_sweep(self):
        cfg = self.cfg
        grid = parse_grid(cfg.u_grid)
        depth = cfg.depth or 2
        rows = sweep_example(grid, depth, cfg.tol)
        self.say(f"example model, tau = (u, 1 - u), depth {depth}, {len(rows)} grid points")
        flagged = [u for u, _ in rows if u == 0.0]
        if flagged:
            self.say("flag: u = 0 gives tau(0) = 0, outside the standing assumption; computed as a degenerate lift")
        best = max(rows, key=lambda x: x[1])
        self.say(f"max radius {best[1]:.6f} at u = {best[0]:.5f}")
        self.emit(["u", "radius"], rows)

    def cmd_chain(self):
        model, _ = self.load()
        cfg = self.cfg
        chain = BiasedChain(model)
        labels = model.types.labels
        rows = []
        for rep in range(cfg.replicates):
            ys, xs = chain.trajectory(model.initial_memory, cfg.steps, stream(cfg.seed, "chain", rep))
            st = chain.stats(ys, xs)
            mg = chain.marginals_from(ys, xs)
            rows.append([rep, cfg.steps, st.birkhoff_gap, mg.y_error, mg.pair_error, *mg.y_law])
        y_pred, _ = chain.predicted_marginals()
        self.say(f"biased chain, {cfg.replicates} replicate(s) of {cfg.steps} steps")
        self.say("predicted P(Y=t) = rho(t) h(t): " + ", ".join(f"{t}: {x:.6g}" for t, x in zip(labels, y_pred)))
        for row in rows:
            self.say(f"  replicate {row[0]}: Birkhoff gap {row[2]:+.3e}, "
                     f"max |P(Y) error| {row[3]:.3e}, max |pair error| {row[4]:.3e}")
        self.emit(["replicate", "steps", "birkhoff_gap", "y_error", "pair_error", *[f"y_{t}" for t in labels]],
                  rows)

    def _init2(self, model: ModelSpec) -> InitialMemory:
        if self.cfg.init2 is None:
            return InitialMemory.constant(model.n_types - 1)
        try:
            doc = json.loads(self.cfg.init2)
        except json.JSONDecodeError as e:
            raise UsageError(f"--init2 is not valid JSON: {e}") from None
        return _parse_initial(doc, model.types)

    def cmd_couple(self):
        model, _ = self.load()
        cfg = self.cfg
        chain = BiasedChain(model)
        init1, init2 = model.initial_memory, self._init2(model)
        stats = run_coupling(chain, init1, init2, cfg.steps, cfg.replicates, cfg.seed, cfg.workers)
        rows = [[i, int(stats["failures"][i]), int(stats["last_failure"][i]), int(stats["gamma"][i])]
                for i in range(cfg.replicates)]
        lf = stats["last_failure"]
        self.say(f"coupling, {cfg.replicates} run(s) of {cfg.steps} steps")
        self.say(f"  mean failures {np.mean(stats['failures']):.4g}; last failure: median {np.median(lf):g}, "
                 f"max {lf.max()}")
        half = cfg.steps // 2
        self.say(f"  fraction with no failure in [{half}, {cfg.steps}]: {np.mean(lf < half):.4g}")
        self.emit(["replicate", "failures", "last_failure", "gamma"], rows)

    def cmd_simulate(self):
        model, _ = self.load()
        cfg = self.cfg
        founders = [model.initial_memory]
        st = simulate_runs(model, founders, cfg.k, cfg.replicates, cfg.seed, cap=cfg.cap, workers=cfg.workers)
        g = estimate_growth(st)
        exact = None
        if model.tau.bounded and model.n_types ** (model.tau.max_support + 1) <= 2**20:
            exact = [exact_mean(model, founders[0], k) for k in range(cfg.k + 1)]
        self.say(f"population, {cfg.replicates} run(s) to generation {cfg.k}, cap {cfg.cap}")
        self.say("  initial memory is a modelling choice for the founders (see model file)")
        self.say(f"  truncated runs {int((st.truncated_at >= 0).sum())}, extinct runs {int((st.extinct_at >= 0).sum())}")
        if np.isfinite(g.slope):
            self.say(f"  fitted growth rate exp(slope) = {g.rate:.6g}")
        else:
            self.say("  fitted growth rate undefined (all runs extinct)")
        rows = []
        for k in range(cfg.k + 1):
            row = [k, g.mean_sizes[k], g.std_errors[k], g.root_rates[k] if k else float("nan")]
            if exact is not None:
                row.append(exact[k])
            rows.append(row)
        header = ["k", "mean_size", "std_error", "root_rate"] + (["exact_mean"] if exact is not None else [])
        self.emit(header, rows)
        if cfg.per_run is not None:
            labels = model.types.labels
            prow = []
            for r in range(st.runs):
                for k in range(cfg.k + 1):
                    if st.valid[r, k]:
                        prow.append([r, k, st.sizes[r, k], *st.histograms[r, k]])
            write_atomic(cfg.per_run, csv_text(["run", "k", "size", *[f"n_{t}" for t in labels]], prow))
            self.say(f"wrote {cfg.per_run}")


def _couple_chunk(args):
    chain, init1, init2, steps, runs, seed, chunk = args
    st = coupled_run(chain, init1, init2, steps, stream(seed, "couple", chunk), runs=runs)
    return st.failures, st.last_failure, st.gamma


def run_coupling(chain, init1, init2, steps, runs, seed, workers=1, chunk_size=250) -> dict:
    """Coupled runs in fixed chunks with per-chunk streams; independent of ``workers``."""
    jobs = [(chain, init1, init2, steps, min(chunk_size, runs - s), seed, c)
            for c, s in enumerate(range(0, runs, chunk_size))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_couple_chunk, jobs))
    else:
        parts = [_couple_chunk(j) for j in jobs]
    return {
        "failures": np.concatenate([p[0] for p in parts]),
        "last_failure": np.concatenate([p[1] for p in parts]),
        "gamma": np.concatenate([p[2] for p in parts]),
    }


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atavist", description="Branching processes with ancestral memory.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--model", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--depth", type=int)
    p.add_argument("--max-depth", type=int, default=12)
    p.add_argument("--steps", type=int, default=10**5)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--u", type=float)
    p.add_argument("--u-grid", default="0:1:500")
    p.add_argument("--cap", type=int, default=10**6)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--init2", help="second initial memory for 'couple', as JSON")
    p.add_argument("--per-run", type=Path, help="per-run CSV for 'simulate'")
    return p


def _fail(code: int, category: str, msg: str) -> int:
    print(f"error[{category}]: {msg}", file=sys.stderr)
    return code


def run(cfg: RunConfig, stdout=None) -> int:
    try:
        cfg.check()
        return Runner(cfg, stdout).run()
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", str(e))
    except json.JSONDecodeError as e:
        return _fail(EXIT_PARSE, "parse", f"model file is not valid JSON: {e}")
    except ModelError as e:
        return _fail(EXIT_VALIDATION, "validation", str(e))
    except BudgetError as e:
        return _fail(EXIT_BUDGET, "budget", str(e))
    except ConvergenceError as e:
        return _fail(EXIT_CONVERGENCE, "convergence", str(e))
    except OSError as e:
        return _fail(EXIT_IO, "io", str(e))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = RunConfig(**{k: v for k, v in vars(args).items()})
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
