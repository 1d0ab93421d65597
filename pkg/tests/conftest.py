import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = {
    "profile": "desk",
    "model": {"width_scale": "1/16", "input_dims": [32, 32, 3], "head_hidden": 16},
    "anchors": {"shapes": [[10, 10], [16, 16]]},
    "train": {"batch_size": 2, "iterations": 4, "log_every": 1, "lr_decay_at": [3]},
    "sampling": {"rpn_batch": 16, "roi_batch": 8},
    "data": {"synth": {"scenes": 8, "image_dims": [32, 32], "min_size": 8, "max_size": 14}},
}


@pytest.fixture
def tiny_cfg():
    """A run config small enough to train for a few iterations in well under a second."""
    from fusion_detect.config import config_from_dict
    return config_from_dict(TINY)


@pytest.fixture
def tiny_data(tiny_cfg):
    from fusion_detect import pipeline
    return pipeline.synth_dataset(tiny_cfg)


# criterion number -> (passed, detail), filled in by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
