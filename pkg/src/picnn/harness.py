"""Seeded experiment runs and the desk-scale sweeps built on them."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Adam, NonFiniteError
from .backbone import BackboneConfig
from .checkpoint import save_checkpoint
from .data import Dataset, MotifSpec, load_idx, make_splits
from .metrics import MetricsReport, append_csv_row, evaluate, write_matrix_csv
from .model import MODES, PICNN, TrainingDiverged, train_epoch
from .viz import export_p_csv, export_p_heatmap

log = logging.getLogger(__name__)

TREND_TOLERANCE = 0.05
LAMBDA_DROP = 0.2   # required acc3 gap between lambda=0 and lambda=2

# spellings accepted in config files and --set overrides
KEY_ALIASES = {"lambda": "lam", "learning_rate": "lr", "learning-rate": "lr", "batch-size": "batch_size",
               "N": "num_filters", "K": "num_classes", "output-dir": "output_dir"}


@dataclass
class DataConfig:
    kind: str = "motifs"            # "motifs" or "idx"
    seed: int = 0
    noise_std: float = 0.2
    jitter: int = 2
    image_size: int = 28
    samples_per_class: int = 500
    test_per_class: int = 200
    motif_kinds: tuple = ()          # per-class motif kind; empty means bars for every class
    motif_thickness: float = 4.0
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def __post_init__(self):
        self.motif_kinds = tuple(self.motif_kinds)


@dataclass
class RunConfig:
    mode: str = "pseudo-label"
    lam: float = 2.0
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    num_filters: int = 32
    num_classes: int = 4
    bins: int = 8
    conv1_width: int = 16
    hidden: int = 64
    kernel_size: int = 3
    p_init_center: float = -0.4
    p_init_scale: float = 0.1
    eval_rule: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str | None = None
    run_id: str | None = None

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        self.lam, self.lr = float(self.lam), float(self.lr)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def ratio(self) -> float:
        return self.num_filters / self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = {KEY_ALIASES.get(k, k): v for k, v in d.items()}
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RunConfig keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("run_id")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def name(self) -> str:
        return self.run_id or f"{self.mode}-lam{self.lam:g}-N{self.num_filters}-s{self.seed}-{self.digest()[:8]}"

    def backbone_config(self, input_shape) -> BackboneConfig:
        return BackboneConfig(input_shape=tuple(input_shape), conv_widths=(self.conv1_width, self.num_filters),
                              kernel_size=self.kernel_size, classifier_hidden=self.hidden,
                              num_classes=self.num_classes)


@dataclass
class RunResult:
    config: RunConfig
    metrics: MetricsReport | None
    curves: dict                      # l_dis, l_int, train_acc: one float per epoch
    status: str = "ok"
    diagnostic: str = ""
    model: PICNN | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class SweepResult:
    runs: list[RunResult]
    checks: dict = field(default_factory=dict)

    def by(self, key) -> dict:
        """Group successful runs by ``key(config)`` and take the per-metric median."""
        groups: dict = {}
        for r in self.runs:
            if r.ok:
                groups.setdefault(key(r.config), []).append(r.metrics)
        return {k: median_report(v) for k, v in groups.items()}


def median_report(reports: list[MetricsReport]) -> MetricsReport:
    mi = np.median(np.stack([r.per_filter_mi for r in reports]), axis=0)
    return MetricsReport(
        acc1=float(np.median([r.acc1 for r in reports])),
        acc2=float(np.median([r.acc2 for r in reports])),
        acc3=float(np.median([r.acc3 for r in reports])),
        mis=float(np.median([r.mis for r in reports])),
        per_filter_mi=mi,
    )


_DATA_CACHE: dict = {}


def load_data(cfg: DataConfig, num_classes: int) -> tuple[Dataset, Dataset]:
    key = json.dumps(asdict(cfg), sort_keys=True) + f"|{num_classes}"
    if key not in _DATA_CACHE:
        if cfg.kind == "motifs":
            spec = MotifSpec(num_classes=num_classes, image_size=cfg.image_size, noise_std=cfg.noise_std,
                             jitter=cfg.jitter, samples_per_class=cfg.samples_per_class,
                             kinds=tuple(cfg.motif_kinds), thickness=cfg.motif_thickness)
            _DATA_CACHE[key] = make_splits(spec, cfg.seed, cfg.test_per_class)
        elif cfg.kind == "idx":
            train = load_idx(cfg.train_images, cfg.train_labels, num_classes, "train")
            test = load_idx(cfg.test_images, cfg.test_labels, num_classes, "test")
            _DATA_CACHE[key] = (train, test)
        else:
            raise ValueError(f"unknown dataset kind {cfg.kind!r}")
    return _DATA_CACHE[key]


def build_model(config: RunConfig, input_shape) -> PICNN:
    return PICNN(config.backbone_config(input_shape), seed=config.seed, mode=config.mode,
                 p_init_scale=config.p_init_scale, p_init_center=config.p_init_center,
                 eval_rule=config.eval_rule)


def run_experiment(config: RunConfig, keep_model: bool = False) -> RunResult:
    """Train from scratch, evaluate on the test split, and write artifacts if an output dir is set."""
    train, test = load_data(config.data, config.num_classes)
    model = build_model(config, train.images.shape[1:])
    opt = Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    curves = {"l_dis": [], "l_int": [], "train_acc": []}
    status, diagnostic, metrics = "ok", "", None
    try:
        for epoch in range(config.epochs):
            st = train_epoch(model, train.images, train.labels, config.lam, rng, opt,
                             config.batch_size)
            curves["l_dis"].append(st.l_dis)
            curves["l_int"].append(st.l_int)
            curves["train_acc"].append(st.accuracy)
            log.info("%s epoch %d: l_dis=%.4f l_int=%.4f acc=%.3f", config.name(), epoch + 1,
                     st.l_dis, st.l_int, st.accuracy)
        metrics = evaluate(model, test, config.bins)
    except (TrainingDiverged, NonFiniteError) as exc:
        status, diagnostic = "failed", str(exc)
        log.warning("%s diverged: %s", config.name(), exc)
    result = RunResult(config, metrics, curves, status, diagnostic, model if keep_model else None)
    if config.output_dir:
        write_run_artifacts(result, model)
    return result


def write_run_artifacts(result: RunResult, model: PICNN):
    cfg = result.config
    root = Path(cfg.output_dir)
    out = root / cfg.name()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    with (out / "curves.csv").open("w") as fh:
        fh.write("epoch,l_dis,l_int,train_acc\n")
        for e, (a, b, c) in enumerate(zip(result.curves["l_dis"], result.curves["l_int"],
                                          result.curves["train_acc"]), start=1):
            fh.write(f"{e},{a:.6f},{b:.6f},{c:.6f}\n")
    if not result.ok:
        (out / "FAILED.txt").write_text(result.diagnostic + "\n")
        return
    save_checkpoint(out / "checkpoint.bin", model.state_dict())
    export_p_heatmap(model.P, out / "P.pgm")
    export_p_csv(model.P, out / "P.csv")
    write_matrix_csv(out / "per_filter_mi.csv", result.metrics.per_filter_mi)
    append_csv_row(root / "results.csv", result.metrics.row(cfg.name(), cfg.mode, cfg.lam, cfg.seed))


def run_many(configs: list[RunConfig], workers: int = 1) -> list[RunResult]:
    """Independent runs; with ``workers > 1`` each goes to its own process."""
    if workers <= 1 or len(configs) <= 1:
        return [run_experiment(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_experiment, configs))


def _seeded(base: RunConfig, seeds, **changes) -> list[RunConfig]:
    seeds = list(seeds) if seeds is not None else [base.seed]
    return [replace(base, seed=s, run_id=None, **changes) for s in seeds]


def lambda_checks(result: SweepResult) -> dict:
    med = result.by(lambda c: c.lam)
    checks = {}
    if 0.0 in med and 2.0 in med:
        checks["acc3_drops"] = med[2.0].acc3 <= med[0.0].acc3 - LAMBDA_DROP
        checks["acc1_stable"] = abs(med[2.0].acc1 - med[0.0].acc1) <= TREND_TOLERANCE
    ordered = [med[v] for v in sorted(med)]
    checks["acc3_non_increasing"] = all(b.acc3 <= a.acc3 + TREND_TOLERANCE for a, b in zip(ordered, ordered[1:]))
    return checks


def sampler_checks(result: SweepResult) -> dict:
    med = result.by(lambda c: c.mode)
    if "pseudo-label" not in med or "gumbel" not in med:
        return {}
    bern, gum = med["pseudo-label"], med["gumbel"]
    return {"acc3_favors_bernoulli": bern.acc3 <= gum.acc3 + TREND_TOLERANCE,
            "acc2_near_tie": abs(bern.acc2 - gum.acc2) <= TREND_TOLERANCE}


def mean_l_int_at(result: SweepResult, mode: str, epoch: int) -> float | None:
    vals = [r.curves["l_int"][epoch - 1] for r in result.runs
            if r.ok and r.config.mode == mode and len(r.curves["l_int"]) >= epoch]
    return float(np.mean(vals)) if vals else None


def leak_checks(result: SweepResult, at_epoch: int = 5) -> dict:
    checks = {}
    leak, pseudo = mean_l_int_at(result, "label-leak", at_epoch), mean_l_int_at(result, "pseudo-label", at_epoch)
    if leak is not None and pseudo is not None:
        checks["l_int_leak_lower"] = leak < pseudo
        checks["l_int_at_epoch"] = {"epoch": at_epoch, "leak": leak, "pseudo": pseudo}
    med = result.by(lambda c: c.mode)
    if "label-leak" in med and "pseudo-label" in med:
        checks["mis_leak_lower"] = med["label-leak"].mis < med["pseudo-label"].mis
    return checks


def sweep_lambda(base: RunConfig, values, seeds=None, workers: int = 1) -> SweepResult:
    values = list(values)
    if not values:
        raise ValueError("sweep_lambda: no lambda values")
    configs = [c for v in values for c in _seeded(base, seeds, lam=float(v))]
    result = SweepResult(run_many(configs, workers))
    result.checks = lambda_checks(result)
    return result


def sweep_ratio(base: RunConfig, num_filters, seeds=None, workers: int = 1) -> SweepResult:
    """Vary r = N / K through the width of the target layer."""
    configs = [c for n in num_filters for c in _seeded(base, seeds, num_filters=int(n))]
    return SweepResult(run_many(configs, workers))


def ablate_sampler(base: RunConfig, seeds=None, workers: int = 1) -> SweepResult:
    configs = _seeded(base, seeds, mode="pseudo-label") + _seeded(base, seeds, mode="gumbel")
    result = SweepResult(run_many(configs, workers))
    result.checks = sampler_checks(result)
    return result


def demo_label_leak(base: RunConfig, seeds=None, workers: int = 1, at_epoch: int = 5) -> SweepResult:
    configs = _seeded(base, seeds, mode="label-leak") + _seeded(base, seeds, mode="pseudo-label")
    result = SweepResult(run_many(configs, workers))
    result.checks = leak_checks(result, at_epoch)
    return result
