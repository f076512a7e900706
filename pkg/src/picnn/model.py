"""The dual-pathway PICNN model, its joint loss, and the training epoch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NonFiniteError, Parameter, Tensor
from .backbone import Backbone, BackboneConfig, Classifier
from .samplers import AssignmentVector, PseudoLabel, bernoulli_st, categorical_st, gumbel_assignment

MODES = ("pseudo-label", "label-leak", "fixed-assignment", "gumbel")
LOG_CLAMP = 1e-12
EVAL_THRESHOLD = 0.5
GUMBEL_TEMPERATURE = 0.01


class TrainingDiverged(RuntimeError):
    pass


def block_assignment(num_classes: int, num_filters: int) -> np.ndarray:
    """Static (K, N) block-diagonal mask; class k owns a contiguous run of filters."""
    mask = np.zeros((num_classes, num_filters), np.float32)
    for k, idx in enumerate(np.array_split(np.arange(num_filters), num_classes)):
        mask[k, idx] = 1.0
    return mask


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes), np.float32)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class PathwayOutputs:
    y1: Tensor
    y2: Tensor
    H: Tensor
    H_tilde: Tensor
    z: Tensor
    p_row: Tensor | None = None
    y_tilde: Tensor | None = None
    assignment: AssignmentVector | None = None
    pseudo_label: PseudoLabel | None = None


@dataclass
class LossBreakdown:
    l_dis: Tensor
    l_int: Tensor
    total: Tensor
    lam: float

    def values(self) -> tuple[float, float, float]:
        return float(self.l_dis.data), float(self.l_int.data), float(self.total.data)


def cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of -sum(y * ln(max(p, 1e-12)))."""
    b = probs.shape[0]
    picked = ad.sum(ad.mul(ad.log(probs, clamp=LOG_CLAMP), Tensor(targets, dtype=probs.data.dtype)))
    return ad.scale(picked, -1.0 / b)


class PICNN:
    """Backbone + shared classifier + learnable filter-class correspondence matrix.

    ``P = sigmoid(p_logits)`` has shape (K, N); row k is the per-filter Bernoulli
    parameter of class k's cluster.
    """

    def __init__(self, config: BackboneConfig, seed: int = 0, mode: str = "pseudo-label",
                 p_init_scale: float = 0.1, p_init_center: float = 0.0, eval_rule: str | None = None,
                 fixed_mask: np.ndarray | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.config = config
        self.mode = mode
        self.eval_rule = eval_rule or ("argmax" if mode == "gumbel" else "threshold")
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(config, rng)
        self.classifier = Classifier(config.num_filters, config.classifier_hidden, config.num_classes, rng)
        K, N = config.num_classes, config.num_filters
        self.p_logits = Parameter((p_init_center + rng.uniform(-p_init_scale, p_init_scale, (K, N))).astype(np.float32),
                                  name="P.logits")
        if fixed_mask is None:
            fixed_mask = block_assignment(K, N)
        self.fixed_mask = np.asarray(fixed_mask, np.float32)
        if self.fixed_mask.shape != (K, N):
            raise ValueError(f"fixed mask must be {(K, N)}, got {self.fixed_mask.shape}")

    # -- parameters

    def parameters(self) -> list[Parameter]:
        return self.backbone.parameters() + self.classifier.parameters() + [self.p_logits]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]

    def correspondence(self) -> Tensor:
        return ad.sigmoid(self.p_logits)

    @property
    def P(self) -> np.ndarray:
        return self.correspondence().data

    def eval_assignment(self, rule: str | None = None) -> np.ndarray:
        """Deterministic (K, N) cluster mask used for evaluation and Grad-CAM."""
        if self.mode == "fixed-assignment":
            return self.fixed_mask.copy()
        rule = rule or self.eval_rule
        P = self.P
        if rule == "threshold":
            return (P >= EVAL_THRESHOLD).astype(np.float32)
        if rule == "argmax":
            out = np.zeros_like(P)
            out[P.argmax(axis=0), np.arange(P.shape[1])] = 1.0
            return out
        raise ValueError(f"unknown eval rule {rule!r}")

    # -- forward

    def features(self, x) -> Tensor:
        return self.backbone(x)

    def classify(self, features) -> Tensor:
        return self.classifier(features)

    def select_p_row(self, P: Tensor, y_tilde: Tensor) -> Tensor:
        """y_tilde @ P: gradients reach both P and, straight through y_tilde, y1."""
        return ad.matmul(y_tilde, P)

    def forward_train(self, x, y, rng: np.random.Generator, mode: str | None = None) -> PathwayOutputs:
        mode = mode or self.mode
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        K = self.config.num_classes
        H = self.features(x)
        y1 = self.classify(H)

        y_tilde, pseudo, p_row, assignment = None, None, None, None
        if mode == "label-leak":
            index = Tensor(one_hot(y, K))
        else:
            y_tilde, pseudo = categorical_st(y1, rng)
            index = y_tilde

        if mode == "fixed-assignment":
            z = ad.matmul(index, Tensor(self.fixed_mask))
        elif mode == "gumbel":
            z = gumbel_assignment(self.correspondence(), index, GUMBEL_TEMPERATURE, rng)
        else:
            p_row = self.select_p_row(self.correspondence(), index)
            z, assignment = bernoulli_st(p_row, rng)

        H_tilde = ad.hadamard_broadcast(H, z)
        y2 = self.classify(H_tilde)
        return PathwayOutputs(y1=y1, y2=y2, H=H, H_tilde=H_tilde, z=z, p_row=p_row,
                              y_tilde=y_tilde, assignment=assignment, pseudo_label=pseudo)

    def compute_loss(self, outputs: PathwayOutputs, y, lam: float) -> LossBreakdown:
        targets = one_hot(y, self.config.num_classes)
        l_dis = cross_entropy(outputs.y1, targets)
        l_int = cross_entropy(outputs.y2, targets)
        total = ad.add(l_dis, ad.scale(l_int, lam))
        return LossBreakdown(l_dis=l_dis, l_int=l_int, total=total, lam=lam)


@dataclass
class EpochStats:
    l_dis: float
    l_int: float
    accuracy: float
    steps: int = 0


def train_epoch(model: PICNN, images: np.ndarray, labels: np.ndarray, lam: float,
                rng: np.random.Generator, optimizer: Adam, batch_size: int = 32,
                mode: str | None = None) -> EpochStats:
    """One shuffled pass of joint optimisation over (images, labels)."""
    n = len(labels)
    if n == 0:
        raise ValueError("train_epoch: empty dataset")
    order = rng.permutation(n)
    sum_dis = sum_int = 0.0
    correct = 0
    steps = 0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        xb, yb = images[idx], labels[idx]
        optimizer.zero_grad()
        try:
            out = model.forward_train(xb, yb, rng, mode=mode)
            loss = model.compute_loss(out, yb, lam)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite forward value at step {steps}: {exc}") from exc
        ad.backward(loss.total)
        bad = ad.parameters_finite(optimizer.params)
        if bad is not None:
            raise TrainingDiverged(f"non-finite tensor {bad} at step {steps}")
        optimizer.step()
        l_dis, l_int, _ = loss.values()
        sum_dis += l_dis * len(idx)
        sum_int += l_int * len(idx)
        correct += int((out.y1.data.argmax(axis=1) == yb).sum())
        steps += 1
    return EpochStats(l_dis=sum_dis / n, l_int=sum_int / n, accuracy=correct / n, steps=steps)
