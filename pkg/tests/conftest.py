import numpy as np
import pytest

from picnn.backbone import BackboneConfig
from picnn.data import MotifSpec, make_splits
from picnn.model import PICNN


@pytest.fixture
def tiny_config():
    return BackboneConfig(input_shape=(1, 8, 8), conv_widths=(4, 6), kernel_size=3, classifier_hidden=5,
                          num_classes=2)


@pytest.fixture
def tiny_model(tiny_config):
    return PICNN(tiny_config, seed=0)


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(0)
    return rng.random((5, 1, 8, 8)).astype(np.float32), np.array([0, 1, 1, 0, 1])


@pytest.fixture(scope="session")
def small_motifs():
    spec = MotifSpec(num_classes=4, image_size=28, noise_std=0.05, samples_per_class=60)
    return make_splits(spec, seed=0, test_per_class=30)


# ---------------------------------------------------------------- acceptance support

import contextlib
import time

from picnn.harness import RunConfig, run_experiment

DESK_SEEDS = (0, 1, 2)
DESK_MODES = (("pseudo-label", 2.0), ("pseudo-label", 0.0), ("gumbel", 2.0), ("label-leak", 2.0))
_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def desk_runs():
    """Desk-scale training runs shared by the end-to-end criteria: (mode, lambda, seed) -> (result, seconds)."""
    runs = {}
    for seed in DESK_SEEDS:
        for mode, lam in DESK_MODES:
            t0 = time.perf_counter()
            res = run_experiment(RunConfig(mode=mode, lam=lam, seed=seed), keep_model=(seed == 0))
            runs[(mode, lam, seed)] = (res, time.perf_counter() - t0)
    return runs


@pytest.fixture
def criterion():
    """Record a one-line pass/fail verdict per acceptance criterion."""

    @contextlib.contextmanager
    def record(number: int, summary: str):
        details = {}
        try:
            yield details
        except BaseException as exc:
            _ACCEPTANCE[number] = f"FAIL  criterion {number:2d}: {summary} | {details.get('info', '')} | {str(exc).splitlines()[0][:200] if str(exc) else type(exc).__name__}"
            raise
        _ACCEPTANCE[number] = f"PASS  criterion {number:2d}: {summary} | {details.get('info', '')}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n].replace("\n", " "))
