import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from procver.data import GeneratorConfig, generate_dataset  # noqa: E402
from procver.model import CatModel, ModelConfig  # noqa: E402

SMALL_GEN = dict(num_tasks=3, procedures_per_task=4, videos_per_procedure=3, D_in=12, duration_range=(3, 5), steps_range=(4, 6))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return GeneratorConfig(**SMALL_GEN)


@pytest.fixture(scope="session")
def small_ds(small_cfg):
    return generate_dataset(small_cfg)


@pytest.fixture(scope="session")
def small_disk(tmp_path_factory, small_cfg):
    out = tmp_path_factory.mktemp("ds")
    generate_dataset(small_cfg, out)
    return out


@pytest.fixture
def tiny_model(small_ds):
    return CatModel(ModelConfig(D_in=small_ds.dim, D=8, K=4, layers=1, heads=2, D_prime=8, C=len(small_ds.train.procedures), seed=3))


# criterion number -> list of (label, passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        ok = all(p for _, p, _ in parts)
        detail = "; ".join(f"{label}: {d}" for label, _, d in parts)
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {detail}")
