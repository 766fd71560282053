import time

import numpy as np
import pytest
from hypothesis import settings

from ctom import synth
from ctom.trainer import TrainConfig, load_dataset, params_digest, train_coarse, train_refine

OVERFIT_SAMPLES = 50
OVERFIT_SIZE = 64
OVERFIT_EPOCHS = 200
REFINE_EPOCHS = 5

settings.register_profile("ctom", max_examples=40, deadline=None)
settings.load_profile("ctom")


@pytest.fixture(scope="session")
def bg_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("backgrounds")
    synth.write_procedural_backgrounds(d, 4, 32, 32, seed=3)
    return d


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, bg_dir):
    """Two samples per group at 32x32."""
    out = tmp_path_factory.mktemp("data")
    synth.generate_dataset({"train": {g: 2 for g in synth.ALL_GROUPS}}, bg_dir, out, seed=11, width=32, height=32)
    return out / "manifest.jsonl"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def overfit(tmp_path_factory):
    """Miniature coarse net trained to convergence on 50 balanced samples."""
    out = tmp_path_factory.mktemp("overfit")
    synth.write_procedural_backgrounds(out / "bg", 8, OVERFIT_SIZE, OVERFIT_SIZE, seed=0)
    synth.generate_dataset(
        {"train": synth.balanced_counts(OVERFIT_SAMPLES)}, out / "bg", out / "d", seed=0, width=OVERFIT_SIZE, height=OVERFIT_SIZE
    )
    data = load_dataset(out / "d" / "manifest.jsonl", "train")
    t0 = time.perf_counter()
    coarse, report = train_coarse(TrainConfig(epochs=OVERFIT_EPOCHS, seed=0), data)
    return {"data": data, "coarse": coarse, "report": report, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def overfit_refined(overfit):
    digest = params_digest(overfit["coarse"])
    refine, report = train_refine(TrainConfig(stage="refine", epochs=REFINE_EPOCHS, seed=0), overfit["data"], overfit["coarse"])
    return {"refine": refine, "report": report, "coarse_digest_before": digest}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
