"""Quick self-test suites behind ``dvps selfcheck``.

Each suite reports the largest error it observed against its oracle.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .datamodel import PanopticVideo, Track
from .matcher import hungarian
from .metrics import WINDOWS, stq, vpq_k
from .numerics import Tensor, check_gradients, layer_norm, log_softmax, matmul, sigmoid, softmax, softplus

SUITES = ("gradients", "hungarian", "metrics")


@dataclass
class SuiteResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error <= self.tolerance


def gradient_suite(rng: np.random.Generator) -> float:
    w = Tensor(rng.normal(size=(4, 3)))
    g, b = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    fns = [
        lambda x: (softmax(x, axis=-1) * w.T).sum(),
        lambda x: (log_softmax(x, axis=0) * w.T).sum(),
        lambda x: (layer_norm(x, g, b) ** 2).sum(),
        lambda x: (sigmoid(x) * softplus(x)).sum(),
        lambda x: (matmul(x, w) ** 2).sum(),
    ]
    worst = 0.0
    for fn in fns:
        worst = max(worst, check_gradients(fn, Tensor(rng.normal(size=(3, 4)))))
    return worst


def hungarian_suite(rng: np.random.Generator) -> float:
    worst = 0.0
    for n in range(2, 6):
        for _ in range(20):
            c = rng.normal(size=(n, n))
            best = min(sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
            worst = max(worst, abs(hungarian(c).cost - best))
    return worst


def metric_suite(rng: np.random.Generator) -> float:
    maps = rng.integers(0, 4, size=(6, 8, 8))
    video = PanopticVideo(maps, {1: Track(4, False), 2: Track(0, True), 3: Track(1, True)})
    worst = max(abs(vpq_k(video, video, k) - 100.0) for k in WINDOWS)
    return max(worst, abs(stq(video, video) - 1.0))


def run_suites(fault: str | None = None, seed: int = 0) -> list[SuiteResult]:
    """Run every suite. ``fault`` names a suite whose result is forced to fail (test hook)."""
    if fault is not None and fault not in SUITES:
        raise ValueError(f"unknown suite {fault!r}; expected one of {', '.join(SUITES)}")
    rng = np.random.default_rng(seed)
    results = [
        SuiteResult("gradients", gradient_suite(rng), 1e-4),
        SuiteResult("hungarian", hungarian_suite(rng), 1e-9),
        SuiteResult("metrics", metric_suite(rng), 1e-9),
    ]
    for r in results:
        if r.name == fault:
            r.max_error = r.max_error + 1.0
    return results
