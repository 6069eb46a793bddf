"""Shared oracles and random-model generators for the test suite."""

from __future__ import annotations

import itertools

import numpy as np

from atavist.model import MemoryLaw, is_primitive


def dense_eig(m):
    """(r, rho, h) from numpy's dense eigensolver, normalised as rho.1 = 1, rho.h = 1."""
    m = np.asarray(m, dtype=float)
    w, vr = np.linalg.eig(m)
    i = int(np.argmax(w.real))
    h = np.abs(vr[:, i].real)
    wl, vl = np.linalg.eig(m.T)
    rho = np.abs(vl[:, int(np.argmax(wl.real))].real)
    rho /= rho.sum()
    h /= rho @ h
    return float(w[i].real), rho, h


def brute_lift(m, tau_probs, depth):
    """Matrix of the truncated memory operator by enumerating every (prefix, j, t)."""
    m = np.asarray(m, dtype=float)
    n = m.shape[0]
    prefixes = list(itertools.product(range(n), repeat=depth))
    index = {p: i for i, p in enumerate(prefixes)}
    a = np.zeros((len(prefixes), len(prefixes)))
    for p in prefixes:
        for j in range(min(depth, len(tau_probs))):
            for t in range(n):
                child = (t,) + p[:-1]
                a[index[p], index[child]] += tau_probs[j] * m[p[j], t]
    return a


def dense_radius(a):
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(a, dtype=float)))))


def random_primitive(rng, n, high=3.0, density=0.7):
    while True:
        m = rng.uniform(0, high, size=(n, n)) * (rng.random((n, n)) < density)
        if is_primitive(m):
            return m


def random_finite_tau(rng, support):
    w = rng.random(support) + 0.05
    return MemoryLaw.finite(w / w.sum())


def random_balanced(rng, n, c=None):
    c = rng.uniform(0.5, 4.0) if c is None else c
    while True:
        w = rng.random((n, n)) * (rng.random((n, n)) < 0.8)
        rows = w.sum(axis=1)
        if np.all(rows > 0):
            m = c * w / rows[:, None]
            if is_primitive(m):
                return m, c


def multinomial_ok(counts, probs, n_sigma=3.0):
    """Each cell count within n_sigma binomial standard deviations of its expectation."""
    counts = np.asarray(counts, dtype=float).ravel()
    probs = np.asarray(probs, dtype=float).ravel()
    n = counts.sum()
    sd = np.sqrt(n * probs * (1 - probs))
    return bool(np.all(np.abs(counts - n * probs) <= n_sigma * np.maximum(sd, 1e-12) + 1e-9))


def two_sample_ok(c1, c2, n_sigma=3.0):
    """Cellwise test that two multinomial samples share one law."""
    c1 = np.asarray(c1, dtype=float).ravel()
    c2 = np.asarray(c2, dtype=float).ravel()
    n1, n2 = c1.sum(), c2.sum()
    p = (c1 + c2) / (n1 + n2)
    sd = np.sqrt(p * (1 - p) * (1 / n1 + 1 / n2))
    return bool(np.all(np.abs(c1 / n1 - c2 / n2) <= n_sigma * np.maximum(sd, 1e-12) + 1e-12))


# -- acceptance summary ---------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def report(number: int, ok: bool, detail: str):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
