"""Central finite-difference checks for every autodiff op, in float64."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .samplers import gumbel_assignment

STEP = 1e-3
REL_TOL = 1e-3
# gradients smaller than this are compared absolutely (rel error against the floor)
DENOM_FLOOR = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
                    step: float = STEP) -> float:
    """Max relative error between backward() and central differences of sum(fn(*x) * R)."""
    inputs = [np.asarray(x, np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True, dtype=np.float64) for x in inputs]
    out = fn(*leaves)
    proj = rng.normal(size=out.shape)
    ad.backward(ad.sum(ad.mul(out, Tensor(proj, dtype=np.float64))))

    def f(arrays):
        return float(np.sum(fn(*[Tensor(a, dtype=np.float64) for a in arrays]).data * proj))

    worst = 0.0
    for j, x in enumerate(inputs):
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[j][idx] += step
            minus[j][idx] -= step
            numeric[idx] = (f(plus) - f(minus)) / (2 * step)
        worst = max(worst, relative_error(leaves[j].grad, numeric))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _gumbel_case(rng):
    seed = int(rng.integers(1 << 30))

    def fn(P, w):
        return gumbel_assignment(P, w, 1.0, np.random.default_rng(seed))

    return fn, [rng.uniform(0.2, 0.8, (3, 5)), rng.uniform(0.0, 1.0, (2, 3))]


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One random instance per op kind."""
    c = float(rng.normal())
    return {
        "add": (ad.add, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "add-bias": (ad.add, [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
        "mul": (ad.mul, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "matmul": (ad.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "conv2d": (ad.conv2d, [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)),
                               rng.normal(size=(3,))]),
        "relu": (ad.relu, [_away_from_zero(rng, (3, 4))]),
        "global-mean-pool": (ad.global_mean_pool, [rng.normal(size=(2, 3, 4, 4))]),
        "mean-pool": (ad.mean_pool2d, [rng.normal(size=(2, 2, 4, 4))]),
        "softmax": (ad.softmax, [rng.normal(size=(3, 5))]),
        "log": (ad.log, [rng.uniform(0.5, 2.0, (3, 4))]),
        "sum": (ad.sum, [rng.normal(size=(3, 4))]),
        "scale": (lambda a: ad.scale(a, c), [rng.normal(size=(3, 4))]),
        "hadamard-broadcast": (ad.hadamard_broadcast, [rng.normal(size=(2, 3, 4, 4)),
                                                       rng.normal(size=(2, 3))]),
        "sigmoid": (ad.sigmoid, [rng.normal(size=(3, 4))]),
        "gumbel-assignment": _gumbel_case(rng),
    }


def run_suite(instances: int = 20, seed: int = 0) -> dict[str, float]:
    """Worst relative error per op kind over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        for kind, (fn, inputs) in op_cases(rng).items():
            worst[kind] = max(worst.get(kind, 0.0), check_gradients(fn, inputs, rng))
    return worst
