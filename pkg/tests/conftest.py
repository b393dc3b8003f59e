import sys
from pathlib import Path

import numpy as np
import pytest

from vitnorm import tensor as T
from vitnorm.model import ModelConfig

sys.path.insert(0, str(Path(__file__).parent))

MICRO = ModelConfig(image_size=(4, 4), channels=1, patch_size=2, hidden=16, depth=2, heads=2, mlp_dim=32, num_classes=3)


@pytest.fixture(autouse=True)
def finite_checks():
    with T.debug_checks(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro():
    return MICRO


TINY_SPEC = """\
name: tiny
dataset: synthetic
synthetic: {n: 48, n_eval: 32, seed: 0}
model:
  image_size: [8, 8]
  channels: 1
  patch_size: 4
  hidden: 16
  depth: 2
  heads: 2
  mlp_dim: 32
  num_classes: 2
train:
  total_steps: 12
  batch_size: 16
  warmup_steps: 3
  log_every: 4
"""


@pytest.fixture
def tiny_spec(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_SPEC)
    return path


# acceptance bookkeeping: tests marked criterion(n, text) get one PASS/FAIL line in the summary
_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, text = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        detail = item.user_properties and dict(item.user_properties).get("detail", "") or ""
        _CRITERIA[number] = (status, text, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, text, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {status}: {text}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
