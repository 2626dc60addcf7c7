import numpy as np
import pytest
import torch

from fidcal.synth import SHAPES, make_desk_corpus


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Three classes, 12 small images each."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    make_desk_corpus(root, per_class=12, classes=SHAPES[:3], seed=3, size_range=(20, 28))
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gray(h=64, w=64, value=0.5, c=3):
    return np.full((c, h, w), value, dtype=np.float32)


TINY_OVERRIDES = [
    "data.synth.per_class=8", "data.synth.size_range=[18, 22]", "data.train_per_class=5",
    "data.crop_size=16",
    "classifier.epochs=2", "classifier.warmup_epochs=1", "classifier.batch_size=16",
    "restorer.depth=3", "restorer.width=4", "restorer.patch=8", "restorer.stride=8",
    "restorer.epochs=1", "restorer.warmup_epochs=0",
    "estimator.depth=3", "estimator.width=4", "estimator.patch=8", "estimator.stride=8",
    "estimator.epochs=1", "estimator.warmup_epochs=0",
    "calib.conv_hidden=4", "calib.train.epochs=1", "calib.train.warmup_epochs=0",
    "calib.train.batch_size=16",
]


@pytest.fixture
def tiny_cfg():
    from fidcal.config import load_config
    return load_config("desk", overrides=TINY_OVERRIDES)


@pytest.fixture(scope="session")
def desk_ws(tmp_path_factory):
    """Full desk-profile workspace shared by the acceptance and desk-scale example tests.

    Set ``FIDCAL_DESK_WS`` to a directory to keep trained models between sessions.
    """
    import os

    from fidcal.config import load_config
    from fidcal.experiments import Workspace
    out = os.environ.get("FIDCAL_DESK_WS") or tmp_path_factory.mktemp("desk_ws")
    return Workspace(out, load_config("desk"))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call":
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL",
                              props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {num:>2}: {verdict}  {detail}")
