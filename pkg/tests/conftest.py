from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from stngrasp.checkpoint import save_checkpoint
from stngrasp.data import load_cornell
from stngrasp.fixtures import write_cornell_fixture
from stngrasp.pipeline import GraspDetector, ModelConfig, NetConfig
from stngrasp.trainer import TrainConfig, success_rate, train

REPO = Path(__file__).resolve().parents[1]
OVERFIT_CONFIG = REPO / "configs" / "overfit.json"
OVERFIT_SEED = 3


def small_model_config(**overrides) -> ModelConfig:
    """A fast float64 architecture for unit tests."""
    tiny = NetConfig(widths=(4, 8), blocks_per_stage=1, downsample=1, pool=2, hidden=8)
    kw = dict(stage1=NetConfig(widths=(4, 8), downsample=8, pool=2, hidden=8),
              stage2=tiny, stage3=tiny, classifier=NetConfig(widths=(4,), pool=2, hidden=8),
              baseline=NetConfig(widths=(4, 8), downsample=8, pool=2, hidden=8),
              stage_patch=24, classifier_patch=16, dtype="float64")
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture(scope="session")
def small_config():
    return small_model_config()


@pytest.fixture(scope="session")
def cornell_dir(tmp_path_factory):
    """Four Cornell-layout items; the first carries a point-cloud text file."""
    root = tmp_path_factory.mktemp("cornell")
    write_cornell_fixture(root, 4, seed=11, point_cloud_items=1)
    return root


@pytest.fixture(scope="session")
def cornell_samples(cornell_dir):
    samples, report = load_cornell(cornell_dir)
    return samples, report


@pytest.fixture(scope="session")
def overfit_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    write_cornell_fixture(root, 8, seed=OVERFIT_SEED)
    return root


@pytest.fixture(scope="session")
def overfit_run(overfit_dir, tmp_path_factory):
    """The desk-scale overfit recipe on the 8-sample fixture, trained once per session.

    Records training-set success before and after fine-tuning and a
    snapshot of every parameter around each fine-tune phase.
    """
    samples, _ = load_cornell(overfit_dir)
    config = TrainConfig.from_file(OVERFIT_CONFIG)
    model = GraspDetector(config.model, seed=config.seed)
    record = {"phases": [], "pre_success": None}

    def snapshot():
        return {n: p.data.copy() for n, p in model.named_parameters()}

    def hook(event, name):
        if event == "start":
            if record["pre_success"] is None:
                record["pre_success"] = success_rate(model, samples)
            record["phases"].append({"name": name, "before": snapshot()})
        else:
            record["phases"][-1]["after"] = snapshot()

    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        train(model, samples, config, phase_hook=hook)
        record["seconds"] = time.perf_counter() - t0
        record["post_success"] = success_rate(model, samples)
    ckpt = tmp_path_factory.mktemp("overfit_ckpt") / "model.ckpt"
    save_checkpoint(ckpt, model)
    record.update(model=model, samples=samples, config=config, checkpoint=ckpt, root=overfit_dir)
    return record


def random_image(seed=0, size=400, channels=7, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(channels, size, size)).astype(dtype)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
