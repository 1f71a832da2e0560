import numpy as np
import pytest

from condalign.data import Dataset
from condalign.networks import Arch, init_params


def zero_heads(params):
    for g in ("class_head", "joint_head"):
        for W, b in params.group(g):
            W[...] = 0.0
            if b is not None:
                b[...] = 0.0
    return params


def toy_batch(n=6, d=2, k=3, seed=0, domain="source"):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = np.eye(k)[np.arange(n) % k]
    return Dataset(x, y, domain, f"toy{seed}")


@pytest.fixture
def small_params():
    return init_params(Arch(d_in=2, n_classes=3, widths=(5, 4)), seed=11)


@pytest.fixture
def src_batch():
    return toy_batch(seed=1)


@pytest.fixture
def tgt_batch():
    return toy_batch(seed=2, domain="target").unlabeled()


@pytest.fixture(scope="session")
def default_runs(tmp_path_factory):
    """Full method and source-only on the default toy task (seed 0), timed."""
    import time

    from condalign.config import ExperimentConfig
    from condalign.report import build_datasets, run_experiment

    out = tmp_path_factory.mktemp("default_runs")
    cfg = ExperimentConfig()
    splits = build_datasets(cfg)
    t0 = time.process_time()
    full, full_params = run_experiment(cfg, out=out, splits=splits)
    so, so_params = run_experiment(cfg.replace(mode="source-only"), out=out, splits=splits)
    return {"full": full, "source-only": so, "splits": splits, "cpu_seconds": time.process_time() - t0,
            "params": {"full": full_params, "source-only": so_params}}


ACCEPTANCE = []  # (criterion, passed, detail) filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
