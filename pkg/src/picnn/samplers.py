"""Straight-through samplers for the filter mask and the pseudo-label.

Both samplers rewrite a discrete draw as ``continuous parameter + detached
offset``: the forward value is the hard sample, the backward pass treats the
Jacobian with respect to the parameter as the identity.

Uniform draws live in (0, 1] (``1 - Generator.random()``) so that p = 0 never
fires and p = 1 always fires under the ``p >= eps`` rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, log, make_node, straight_through

GUMBEL_CLAMP = 1e-12


class DomainError(ValueError):
    """Sampler input outside its valid domain."""


def make_rng(seed: int, worker: int = 0) -> np.random.Generator:
    """One independent stream per worker: seed XOR worker index."""
    return np.random.default_rng(int(seed) ^ int(worker))


def _uniform_open0(rng: np.random.Generator, shape) -> np.ndarray:
    return 1.0 - rng.random(shape)


@dataclass
class AssignmentVector:
    z: np.ndarray        # hard 0/1 mask, float32
    eta: np.ndarray      # detached offsets, z = p + eta
    epsilon: np.ndarray  # uniform draws
    p: np.ndarray        # the probabilities that were sampled (float64 copy)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        return bernoulli_st_backward(upstream)


@dataclass
class PseudoLabel:
    y_tilde: np.ndarray  # one-hot, float32
    tau: np.ndarray      # detached offsets, y_tilde = y1 + tau
    xi: np.ndarray       # uniform draw(s), one per row
    index: np.ndarray    # selected class (0-based)
    y1: np.ndarray       # the distribution that was sampled (float64 copy)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        return categorical_st_backward(upstream)


def bernoulli_st_sample(p, rng: np.random.Generator) -> AssignmentVector:
    """Draw z_i ~ Ber(p_i) as z_i = p_i + eta_i with eta_i = 1 - p_i if p_i >= eps_i else -p_i."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise DomainError("bernoulli_st_sample: probabilities must lie in [0, 1]; squash upstream")
    eps = _uniform_open0(rng, p.shape)
    fire = p >= eps
    eta = np.where(fire, 1.0 - p, -p)
    z = fire.astype(np.float32)
    return AssignmentVector(z=z, eta=eta, epsilon=eps, p=p)


def bernoulli_st_backward(upstream):
    # z = p + eta with eta detached
    return upstream


def select_class(rows: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Index k per row with ``cum[k-1] < xi <= cum[k]`` on the renormalised cumulative sum."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    cum = np.cumsum(rows / rows.sum(axis=1, keepdims=True), axis=1)
    cum[:, -1] = 1.0
    return (cum < np.reshape(xi, (-1, 1))).sum(axis=1)


def categorical_st_sample(y1, rng: np.random.Generator, atol: float = 1e-5) -> PseudoLabel:
    """Draw a one-hot pseudo-label from Cat(y1) per row via a cumulative-sum scan.

    Class k is chosen when ``cum[k-1] < xi <= cum[k]`` with ``cum[-1] := 0``.
    """
    y1 = np.asarray(y1, dtype=np.float64)
    squeeze = y1.ndim == 1
    rows = np.atleast_2d(y1)
    if np.any(~np.isfinite(rows)) or np.any(rows < 0):
        raise DomainError("categorical_st_sample: negative or non-finite probabilities")
    totals = rows.sum(axis=1)
    if np.any(np.abs(totals - 1.0) > atol):
        raise DomainError(f"categorical_st_sample: rows must sum to 1 (got {totals.min()}..{totals.max()})")
    xi = _uniform_open0(rng, rows.shape[0])
    index = select_class(rows, xi)
    onehot = np.zeros_like(rows)
    onehot[np.arange(rows.shape[0]), index] = 1.0
    tau = onehot - rows
    y_tilde = onehot.astype(np.float32)
    if squeeze:
        return PseudoLabel(y_tilde[0], tau[0], xi[0], index[0], rows[0])
    return PseudoLabel(y_tilde, tau, xi, index, rows)


def categorical_st_backward(upstream):
    # y_tilde = y1 + tau with tau detached
    return upstream


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), GUMBEL_CLAMP, 1 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(logits, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """softmax((logits + Gumbel noise) / temperature) over the last axis."""
    if not temperature > 0:
        raise DomainError("gumbel_softmax_sample: temperature must be > 0")
    logits = np.asarray(logits, dtype=np.float64)
    y = (logits + gumbel_noise(rng, logits.shape)) / temperature
    y = y - y.max(axis=-1, keepdims=True)
    e = np.exp(y)
    return e / e.sum(axis=-1, keepdims=True)


# ------------------------------------------------------------ graph versions

def bernoulli_st(p: Tensor, rng: np.random.Generator) -> tuple[Tensor, AssignmentVector]:
    """Sample a hard mask from ``p`` inside the graph; gradients pass straight to ``p``."""
    p = as_tensor(p)
    av = bernoulli_st_sample(p.data, rng)
    return straight_through(p, av.z, op="bernoulli-st"), av


def categorical_st(y1: Tensor, rng: np.random.Generator) -> tuple[Tensor, PseudoLabel]:
    y1 = as_tensor(y1)
    pl = categorical_st_sample(y1.data, rng)
    return straight_through(y1, pl.y_tilde, op="categorical-st"), pl


def gumbel_assignment(P: Tensor, y_tilde: Tensor, temperature: float,
                      rng: np.random.Generator) -> Tensor:
    """Relaxed filter-to-class assignment for the Gumbel-Softmax ablation.

    For every example b and filter i, column ``log P[:, i]`` is relaxed into a
    one-hot over classes, Z[b] = softmax_k((log P + G[b]) / T); the mask is
    then z[b] = y_tilde[b] @ Z[b]. Gradients reach P and y_tilde.
    """
    if not temperature > 0:
        raise DomainError("gumbel_assignment: temperature must be > 0")
    P, y_tilde = as_tensor(P), as_tensor(y_tilde)
    K, N = P.shape
    if y_tilde.ndim != 2 or y_tilde.shape[1] != K:
        raise ShapeError("gumbel-assignment", P.shape, y_tilde.shape)
    B = y_tilde.shape[0]
    logits = log(P)
    dtype = P.data.dtype
    Y = (logits.data[None] + gumbel_noise(rng, (B, K, N))) / temperature
    Y -= Y.max(axis=1, keepdims=True)
    Z = np.exp(Y)
    Z /= Z.sum(axis=1, keepdims=True)
    Z = Z.astype(dtype)
    w = y_tilde.data
    value = np.einsum("bk,bkn->bn", w, Z)

    def backward_fn(g):
        gZ = w[:, :, None] * g[:, None, :]
        gY = Z * (gZ - (gZ * Z).sum(axis=1, keepdims=True))
        g_logits = gY.sum(axis=0) / dtype.type(temperature)
        g_w = np.einsum("bn,bkn->bk", g, Z)
        return g_logits, g_w

    return make_node("gumbel-assignment", value, (logits, y_tilde), backward_fn)
