"""Quick statistical and gradient checks run by ``picnn selftest``."""

from __future__ import annotations

import numpy as np

from .gradcheck import REL_TOL, run_suite
from .samplers import bernoulli_st_sample, categorical_st_sample

BERNOULLI_PS = (0.1, 0.25, 0.5, 0.75, 0.9)


def bernoulli_frequencies(n: int = 100_000, seed: int = 0) -> list[dict]:
    """Empirical firing rate per p, with its 3-sigma binomial half-width."""
    rng = np.random.default_rng(seed)
    out = []
    for p in BERNOULLI_PS:
        count = float(bernoulli_st_sample(np.full(n, p), rng).z.sum())
        out.append({"p": p, "count": count, "expected": n * p,
                    "bound": 3 * np.sqrt(n * p * (1 - p))})
    return out


def categorical_frequencies(vectors: int = 20, n: int = 100_000, max_k: int = 8,
                            seed: int = 0) -> list[dict]:
    """Per-class counts for random simplex vectors, one row per (vector, class)."""
    rng = np.random.default_rng(seed)
    out = []
    for v in range(vectors):
        k = int(rng.integers(2, max_k + 1))
        probs = rng.dirichlet(np.ones(k))
        idx = categorical_st_sample(np.tile(probs, (n, 1)), rng).index
        counts = np.bincount(idx, minlength=k)
        for c in range(k):
            out.append({"vector": v, "class": c, "count": float(counts[c]), "expected": n * probs[c],
                        "bound": 3 * np.sqrt(n * probs[c] * (1 - probs[c]))})
    return out


def within(rows: list[dict]) -> bool:
    return all(abs(r["count"] - r["expected"]) <= r["bound"] for r in rows)


def run_selftest(seed: int = 0, instances: int = 20) -> dict:
    bern = bernoulli_frequencies(seed=seed)
    cat = categorical_frequencies(seed=seed)
    grads = run_suite(instances, seed)
    return {
        "bernoulli_ok": within(bern),
        "categorical_ok": within(cat),
        "gradcheck_ok": all(v < REL_TOL for v in grads.values()),
        "gradcheck_worst": grads,
    }
