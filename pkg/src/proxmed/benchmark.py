"""Timing comparison of the compiled and pure-Python kernel backends."""

from __future__ import annotations

import time

import numpy as np

from .kernels import available_backends, load_backend


def _problem(n, seed=0):
    from .sim import DgpCoefficients, generate

    d, _ = generate(DgpCoefficients(), n, seed)
    G = np.column_stack([np.ones(n), d.z, d.x])
    D = np.column_stack([np.ones(n), d.w, d.x])
    return d, G, D


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_benchmark(sizes=(1000, 10000), repeats: int = 5, seed: int = 0) -> list:
    """Best-of-``repeats`` wall time (seconds) per kernel, backend and sample size.

    Returns rows ``{"kernel", "backend", "n", "seconds", "max_abs_diff"}``; the
    last field compares each backend's output with the first backend's.
    """
    rows = []
    backends = {name: load_backend(name) for name in available_backends()}
    for n in sizes:
        d, G, D = _problem(n, seed)
        base = 1.0 - d.a
        anchors = G[: min(n, 200)]
        cases = {
            "exp_moment_newton": lambda k: k.exp_moment_newton(G, D, base, d.a, -1.0, np.zeros(G.shape[1]))[0],
            "logistic_newton": lambda k: k.logistic_newton(G, d.a, np.zeros(G.shape[1]))[0],
            "cross_moments": lambda k: k.cross_moments(D, G, d.y, base)[0],
            "gaussian_gram": lambda k: k.gaussian_gram(G, anchors, 1.0),
        }
        for kernel, call in cases.items():
            reference = None
            for name, mod in backends.items():
                out = np.asarray(call(mod))
                if reference is None:
                    reference = out
                seconds = _best_of(lambda: call(mod), repeats)
                rows.append({"kernel": kernel, "backend": name, "n": int(n), "seconds": seconds,
                             "max_abs_diff": float(np.max(np.abs(out - reference)))})
    return rows


def format_rows(rows) -> str:
    lines = [f"{'kernel':<20}{'backend':<10}{'n':>8}{'ms':>12}{'max|diff|':>12}"]
    for r in rows:
        lines.append(f"{r['kernel']:<20}{r['backend']:<10}{r['n']:>8}{r['seconds'] * 1e3:>12.3f}"
                     f"{r['max_abs_diff']:>12.2e}")
    return "\n".join(lines)
