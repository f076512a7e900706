"""Small CNN backbone and the MLP classifier shared by both pathways."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor


@dataclass
class BackboneConfig:
    input_shape: tuple = (1, 28, 28)
    conv_widths: tuple = (16, 32)
    kernel_size: int = 3
    classifier_hidden: int = 64
    num_classes: int = 4

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.conv_widths = tuple(self.conv_widths)
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.num_filters < self.num_classes:
            raise ValueError(f"last conv width N={self.num_filters} must be >= K={self.num_classes}")
        side = self.input_shape[1]
        if side % (2 ** (len(self.conv_widths) - 1)):
            raise ValueError(f"input side {side} not divisible by the pooling stack")

    @property
    def num_filters(self) -> int:
        return self.conv_widths[-1]

    @property
    def ratio(self) -> float:
        """Filter-to-class ratio r = N / K."""
        return self.num_filters / self.num_classes

    @property
    def feature_size(self) -> int:
        return self.input_shape[1] // 2 ** (len(self.conv_widths) - 1)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Backbone:
    """conv -> relu -> [mean-pool 2 -> conv -> relu]*; the last conv is the target layer."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        k = config.kernel_size
        self.convs: list[tuple[Parameter, Parameter]] = []
        c_in = config.input_shape[0]
        for j, width in enumerate(config.conv_widths):
            w = Parameter(he_uniform(rng, (width, c_in, k, k), c_in * k * k), name=f"conv{j}.w")
            b = Parameter(np.zeros(width, np.float32), name=f"conv{j}.b")
            self.convs.append((w, b))
            c_in = width

    def parameters(self) -> list[Parameter]:
        return [p for pair in self.convs for p in pair]

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[1:] != self.config.input_shape:
            raise ShapeError("backbone", x.shape, (None,) + self.config.input_shape)
        h = x
        for j, (w, b) in enumerate(self.convs):
            if j:
                h = ad.mean_pool2d(h, 2)
            h = ad.relu(ad.conv2d(h, w, b))
        return h


class Classifier:
    """Global mean pool -> dense -> relu -> dense; ``__call__`` adds the softmax."""

    def __init__(self, num_filters: int, hidden: int, num_classes: int, rng: np.random.Generator):
        self.w1 = Parameter(he_uniform(rng, (num_filters, hidden), num_filters), name="fc1.w")
        self.b1 = Parameter(np.zeros(hidden, np.float32), name="fc1.b")
        self.w2 = Parameter(he_uniform(rng, (hidden, num_classes), hidden), name="fc2.w")
        self.b2 = Parameter(np.zeros(num_classes, np.float32), name="fc2.b")

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def logits_from_pooled(self, pooled) -> Tensor:
        hidden = ad.relu(ad.add(ad.matmul(ad.as_tensor(pooled), self.w1), self.b1))
        return ad.add(ad.matmul(hidden, self.w2), self.b2)

    def logits(self, features) -> Tensor:
        return self.logits_from_pooled(ad.global_mean_pool(features))

    def __call__(self, features) -> Tensor:
        return ad.softmax(self.logits(features))
