"""ACC1 / ACC2 / ACC3 and the mutual-information score (MIS).

ACC2 keeps only the class-specific cluster of the true class, ACC3 keeps its
complement. Clusters come from the model's deterministic eval assignment.
MI is a plug-in histogram estimate in bits between each filter's spatially
pooled activation (equal-mass bins) and the one-vs-rest class indicator.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

CSV_FIELDS = ("run_id", "mode", "lambda", "seed", "acc1", "acc2", "acc3", "mis")


@dataclass
class MetricsReport:
    acc1: float
    acc2: float
    acc3: float
    mis: float
    per_filter_mi: np.ndarray = field(repr=False)

    def row(self, run_id: str, mode: str, lam: float, seed: int) -> dict:
        return {"run_id": run_id, "mode": mode, "lambda": lam, "seed": seed,
                "acc1": self.acc1, "acc2": self.acc2, "acc3": self.acc3, "mis": self.mis}

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_filter_mi")
        return d

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return (self.summary() == other.summary()
                and np.array_equal(self.per_filter_mi, other.per_filter_mi))


@dataclass
class EvalPass:
    """Everything the metrics need from one forward sweep over a dataset."""
    pooled: np.ndarray   # (M, N) spatial mean of each target-layer map
    labels: np.ndarray   # (M,)
    pred_full: np.ndarray
    pred_cluster: np.ndarray
    pred_complement: np.ndarray


def _check_nonempty(dataset):
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")


def evaluate_pass(model, dataset, batch_size: int = 256) -> EvalPass:
    _check_nonempty(dataset)
    assign = model.eval_assignment()
    clf = model.classifier
    pooled, full, clus, comp = [], [], [], []
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        H = model.features(x)
        z = assign[y]
        full.append(clf(H).data.argmax(axis=1))
        clus.append(clf(ad.hadamard_broadcast(H, z)).data.argmax(axis=1))
        comp.append(clf(ad.hadamard_broadcast(H, 1.0 - z)).data.argmax(axis=1))
        pooled.append(H.data.mean(axis=(2, 3)))
    return EvalPass(np.concatenate(pooled), dataset.labels.copy(), np.concatenate(full),
                    np.concatenate(clus), np.concatenate(comp))


def eval_acc1(model, dataset) -> float:
    ep = evaluate_pass(model, dataset)
    return float(np.mean(ep.pred_full == ep.labels))


def eval_acc2(model, dataset) -> float:
    ep = evaluate_pass(model, dataset)
    return float(np.mean(ep.pred_cluster == ep.labels))


def eval_acc3(model, dataset) -> float:
    ep = evaluate_pass(model, dataset)
    return float(np.mean(ep.pred_complement == ep.labels))


def quantile_bins(values: np.ndarray, bins: int) -> np.ndarray:
    """Equal-mass bin index per value, computed from ranks so ties share a bin.

    Depends only on the ordering of ``values``, hence invariant to strictly
    monotone transforms.
    """
    values = np.asarray(values)
    n = len(values)
    rank = np.searchsorted(np.sort(values), values, side="left")
    return (rank * bins) // n


def mutual_information_bits(x: np.ndarray, y: np.ndarray) -> float:
    """Plug-in MI in bits between two discrete integer-coded variables."""
    n = len(x)
    _, xi = np.unique(x, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    joint = np.zeros((xi.max() + 1, yi.max() + 1))
    np.add.at(joint, (xi, yi), 1.0)
    joint /= n
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log2(joint[nz] / (px @ py)[nz])))
    return max(mi, 0.0)


def per_filter_mi(pooled: np.ndarray, labels: np.ndarray, num_classes: int, bins: int = 8) -> np.ndarray:
    """(K, N) matrix of MI between binned activation of filter i and [label == y]."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    M, N = pooled.shape
    out = np.zeros((num_classes, N))
    for i in range(N):
        col = pooled[:, i]
        if np.all(col == col[0]):
            continue
        b = quantile_bins(col, bins)
        for y in range(num_classes):
            out[y, i] = mutual_information_bits(b, labels == y)
    return out


def mis_score(mi: np.ndarray) -> float:
    """Mean over filters of the max over classes."""
    return float(mi.max(axis=0).mean())


def eval_mis(model, dataset, bins: int = 8) -> tuple[float, np.ndarray]:
    ep = evaluate_pass(model, dataset)
    mi = per_filter_mi(ep.pooled, ep.labels, dataset.num_classes, bins)
    return mis_score(mi), mi


def evaluate(model, dataset, bins: int = 8) -> MetricsReport:
    """All four metrics from a single forward sweep."""
    ep = evaluate_pass(model, dataset)
    mi = per_filter_mi(ep.pooled, ep.labels, dataset.num_classes, bins)
    return MetricsReport(
        acc1=float(np.mean(ep.pred_full == ep.labels)),
        acc2=float(np.mean(ep.pred_cluster == ep.labels)),
        acc3=float(np.mean(ep.pred_complement == ep.labels)),
        mis=mis_score(mi),
        per_filter_mi=mi,
    )


def append_csv_row(path, row: dict, fields=CSV_FIELDS):
    """Append one row, writing the header only when the file is new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        if new:
            w.writeheader()
        w.writerow(row)


def write_matrix_csv(path, matrix: np.ndarray, fmt: str = "%.6f"):
    np.savetxt(path, np.asarray(matrix), delimiter=",", fmt=fmt)
