import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from apc_toolkit.datasets import DatasetConfig, build_dataset  # noqa: E402
from apc_toolkit.victims import TrainConfig, build_victim, freeze, train_victim  # noqa: E402


@pytest.fixture(scope="session")
def tiny_splits():
    return build_dataset(DatasetConfig(train_per_class=8, test_per_class=3, n_points=64, seed=3))


@pytest.fixture(scope="session")
def tiny_victim(tiny_splits):
    model = build_victim("pointnet_mini", seed=0)
    model, _ = train_victim(model, tiny_splits["train"], TrainConfig(epochs=15, batch_size=16))
    return model


@pytest.fixture(scope="session")
def tiny_dgcnn(tiny_splits):
    model = build_victim("dgcnn_mini", seed=0)
    model, _ = train_victim(model, tiny_splits["train"], TrainConfig(epochs=5, batch_size=16))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def double_victim(name, seed=0, **dims):
    return freeze(build_victim(name, seed=seed, **dims).double())


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# --------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion


_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.failed or (report.when == "setup" and report.skipped):
        entry = _CRITERIA.setdefault(props["criterion"], {"title": props["title"], "outcome": "passed"})
        if report.failed:
            entry["outcome"] = "failed"
        elif report.skipped and entry["outcome"] != "failed":
            entry["outcome"] = "skipped"
        if "detail" in props:
            entry.setdefault("details", []).append(props["detail"])


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        number, title = mark.args
        item.user_properties += [("criterion", number), ("title", title)]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[e["outcome"]]
        line = f"[{status}] criterion {number:2d}: {e['title']}"
        if e.get("details"):
            line += " | " + "; ".join(e["details"])
        terminalreporter.write_line(line)
