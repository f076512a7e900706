"""Synthetic class-motif images and IDX (MNIST-style) file I/O.

Labels are stored 0-based (``0..K-1``) throughout the package.
"""

from __future__ import annotations

import struct
from itertools import product
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MOTIF_KINDS = ("bar", "blob", "square")


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (M, C, H, W) float32 in [0, 1]
    labels: np.ndarray          # (M,) int64 in [0, K)
    num_classes: int
    split: str = "train"
    boxes: np.ndarray | None = None  # (M, 4) motif bbox: row0, col0, row1, col1 (exclusive)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "Dataset":
        boxes = None if self.boxes is None else self.boxes[idx]
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split, boxes)


@dataclass
class MotifSpec:
    num_classes: int = 4
    image_size: int = 28
    kinds: tuple = ()            # per-class motif kind; empty means "bar" for every class
    noise_std: float = 0.05
    jitter: int = 2
    samples_per_class: int = 500
    motif_size: int = 10
    thickness: float = 2.0
    radius: float = 6.0          # distance of class centres from the image centre

    def kind(self, k: int) -> str:
        return self.kinds[k] if self.kinds else "bar"


def _class_params(spec: MotifSpec, k: int) -> dict:
    """Per-class pose: centre on a ring, orientation spread over [0, pi)."""
    angle = 2 * np.pi * k / spec.num_classes + np.pi / 4
    c = (spec.image_size - 1) / 2
    return {
        "center": (c + spec.radius * np.sin(angle), c + spec.radius * np.cos(angle)),
        "orientation": np.pi * k / spec.num_classes,
        "kind": spec.kind(k),
    }


def render_motif(spec: MotifSpec, k: int, offset=(0, 0)) -> np.ndarray:
    """Noise-free (S, S) rendering of class ``k``'s motif shifted by ``offset`` pixels."""
    S = spec.image_size
    par = _class_params(spec, k)
    cy, cx = par["center"][0] + offset[0], par["center"][1] + offset[1]
    half = spec.motif_size / 2
    if cy - half < 0 or cx - half < 0 or cy + half > S - 1 or cx + half > S - 1:
        raise ValueError(f"image size {S} too small for motif of class {k} at ({cy:.1f}, {cx:.1f})")
    rr, cc = np.mgrid[0:S, 0:S].astype(np.float64)
    dy, dx = rr - cy, cc - cx
    kind = par["kind"]
    if kind == "bar":
        th = par["orientation"]
        along = dx * np.cos(th) + dy * np.sin(th)
        across = -dx * np.sin(th) + dy * np.cos(th)
        img = (np.abs(along) <= half) & (np.abs(across) <= spec.thickness / 2)
    elif kind == "blob":
        img = dy ** 2 + dx ** 2 <= (half * 0.6) ** 2
    elif kind == "square":
        inside = (np.abs(dy) <= half * 0.7) & (np.abs(dx) <= half * 0.7)
        core = (np.abs(dy) < half * 0.7 - spec.thickness) & (np.abs(dx) < half * 0.7 - spec.thickness)
        img = inside & ~core
    else:
        raise ValueError(f"unknown motif kind {kind!r}")
    return img.astype(np.float32)


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def generate_motifs(spec: MotifSpec, rng: np.random.Generator, split: str = "train") -> Dataset:
    """Balanced dataset: motif at its class pose + integer jitter + clipped Gaussian noise."""
    if spec.num_classes < 2:
        raise ValueError("need at least 2 classes")
    if spec.noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    S, K, n = spec.image_size, spec.num_classes, spec.samples_per_class
    # fail early if the extreme jitter does not fit
    for k in range(K):
        for off in product((-spec.jitter, spec.jitter), repeat=2):
            render_motif(spec, k, off)
    images = np.empty((K * n, 1, S, S), np.float32)
    labels = np.repeat(np.arange(K), n)
    boxes = np.empty((K * n, 4), np.int64)
    for i, k in enumerate(labels):
        off = tuple(rng.integers(-spec.jitter, spec.jitter + 1, size=2)) if spec.jitter else (0, 0)
        clean = render_motif(spec, k, off)
        boxes[i] = _bbox(clean > 0)
        noisy = clean + rng.normal(0.0, spec.noise_std, clean.shape) if spec.noise_std else clean
        images[i, 0] = np.clip(noisy, 0.0, 1.0)
    perm = rng.permutation(K * n)
    return Dataset(images[perm], labels[perm].astype(np.int64), K, split, boxes[perm])


def make_splits(spec: MotifSpec, seed: int, test_per_class: int = 200) -> tuple[Dataset, Dataset]:
    train = generate_motifs(spec, np.random.default_rng([seed, 0]), "train")
    test = generate_motifs(replace(spec, samples_per_class=test_per_class), np.random.default_rng([seed, 1]), "test")
    return train, test


# ---------------------------------------------------------------------- IDX

def quantize_u8(images: np.ndarray) -> np.ndarray:
    return np.round(np.clip(images, 0.0, 1.0) * 255).astype(np.uint8)


def write_idx(dataset: Dataset, images_path, labels_path):
    pix = quantize_u8(dataset.images)
    if pix.shape[1] == 1:
        pix = pix[:, 0]
    header = struct.pack(">BBBB", 0, 0, 0x08, pix.ndim) + struct.pack(f">{pix.ndim}I", *pix.shape)
    Path(images_path).write_bytes(header + pix.tobytes())
    lab = dataset.labels.astype(np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(lab)) + lab.tobytes())


def _read_idx(path, expect_ndims: tuple[int, ...]) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header ({len(data)} bytes)")
    zero0, zero1, dtype_code, ndims = struct.unpack(">BBBB", data[:4])
    if zero0 or zero1 or dtype_code != 0x08 or ndims not in expect_ndims:
        raise IdxFormatError(f"{path}: bad magic 0x{int.from_bytes(data[:4], 'big'):08x}")
    head = 4 + 4 * ndims
    if len(data) < head:
        raise IdxFormatError(f"{path}: truncated header ({len(data)} of {head} bytes)")
    dims = struct.unpack(f">{ndims}I", data[4:head])
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) - head != size:
        raise IdxFormatError(f"{path}: expected {size} payload bytes, found {len(data) - head}")
    return np.frombuffer(data, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Parse an IDX image/label pair; pixels are scaled to [0, 1]."""
    pix = _read_idx(images_path, (3, 4))
    lab = _read_idx(labels_path, (1,))
    if pix.shape[0] != lab.shape[0]:
        raise IdxFormatError(f"count mismatch: {pix.shape[0]} images vs {lab.shape[0]} labels")
    if pix.ndim == 3:
        pix = pix[:, None]
    labels = lab.astype(np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(pix.astype(np.float32) / 255.0, labels, k, split)
