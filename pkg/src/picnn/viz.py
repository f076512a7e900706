"""PGM/CSV export of the correspondence matrix and Grad-CAM heatmaps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SUBSETS = ("all", "class-cluster", "complement")


@dataclass
class Heatmap:
    values: np.ndarray   # normalised to [0, 1]
    raw: np.ndarray      # weighted sum before ReLU and normalisation
    lo: float
    hi: float


def to_u8(values: np.ndarray) -> np.ndarray:
    """Linear [0, 1] -> [0, 255] with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255 + 0.5).astype(np.uint8)


def write_pgm(pixels: np.ndarray, path):
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {pixels.shape}")
    h, w = pixels.shape
    Path(path).write_bytes(f"P5 {w} {h} 255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1  # single whitespace after maxval
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = map(int, tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def export_p_heatmap(P: np.ndarray, path):
    """One pixel per entry of P; rows are classes."""
    P = np.asarray(P)
    if P.ndim != 2:
        raise ValueError(f"P must be (K, N), got {P.shape}")
    write_pgm(to_u8(P), path)


def export_p_csv(P: np.ndarray, path):
    np.savetxt(path, np.asarray(P), delimiter=",", fmt="%.6f")


def export_heatmap(hm: Heatmap, pgm_path=None, csv_path=None, scale: int = 1):
    if pgm_path is not None:
        px = to_u8(hm.values)
        if scale > 1:
            px = np.kron(px, np.ones((scale, scale), np.uint8))
        write_pgm(px, pgm_path)
    if csv_path is not None:
        np.savetxt(csv_path, hm.values, delimiter=",", fmt="%.6f")


def filter_subset(model, class_index: int, subset: str) -> np.ndarray:
    if subset not in SUBSETS:
        raise ValueError(f"unknown subset {subset!r}; expected one of {SUBSETS}")
    N = model.config.num_filters
    if subset == "all":
        return np.ones(N, np.float32)
    cluster = model.eval_assignment()[class_index]
    return cluster if subset == "class-cluster" else 1.0 - cluster


def channel_weights(model, image: np.ndarray, class_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Feature maps (N, d, d) and per-filter weights: spatial mean of d logit_c / d H_i."""
    x = np.asarray(image, np.float32)[None]
    feats = model.features(x).data
    H = Tensor(feats, requires_grad=True)
    logits = model.classifier.logits(H)
    target = np.zeros(logits.shape, logits.data.dtype)
    target[0, class_index] = 1.0
    ad.backward(ad.sum(ad.mul(logits, Tensor(target))))
    return feats[0], H.grad[0].mean(axis=(1, 2))


def grad_cam(model, image: np.ndarray, class_index: int, subset: str = "all") -> Heatmap:
    """Grad-CAM restricted to a filter subset; an empty subset yields an all-zero map."""
    maps, w = channel_weights(model, image, class_index)
    keep = filter_subset(model, class_index, subset)
    raw = np.tensordot(w * keep, maps, axes=(0, 0))
    cam = np.maximum(raw, 0.0)
    lo, hi = float(cam.min()), float(cam.max())
    values = (cam - lo) / (hi - lo) if hi > lo else np.zeros_like(cam)
    return Heatmap(values=values, raw=raw, lo=lo, hi=hi)


def box_mass(values: np.ndarray, box, image_shape) -> float:
    """Fraction of heatmap mass in the cells overlapping an image-space box (row0, col0, row1, col1; exclusive).

    The heatmap lives on the coarser feature grid, so each cell covers a block of image pixels.
    Returns 0 for an all-zero map.
    """
    v = np.asarray(values, dtype=np.float64)
    total = v.sum()
    if total <= 0:
        return 0.0
    sr, sc = image_shape[0] / v.shape[0], image_shape[1] / v.shape[1]
    r0, c0, r1, c1 = box
    rows = slice(int(r0 // sr), int(np.ceil(r1 / sr)))
    cols = slice(int(c0 // sc), int(np.ceil(c1 / sc)))
    return float(v[rows, cols].sum() / total)
