import sys

import numpy as np
import pytest

from seec.model import ModelConfig, SeecModel
from seec.trainer import TrainConfig, train

TINY = dict(c_hidden=8, c_y=8, c_z=4, c_f=8, c_ctx=8, c_fused=16, c_head=16)


@pytest.fixture(scope="session")
def tiny_model():
    return SeecModel.init(ModelConfig(K=3, **TINY), seed=0)


@pytest.fixture(scope="session")
def trained_tiny():
    """A few hundred steps on small patches: enough to move well below 24 bpp."""
    cfg = TrainConfig(K=3, batch_size=8, patch_size=32, lr=3e-3, epochs=3, steps_per_epoch=60,
                      n_train=96, n_val=16, log_every=0, **TINY)
    return cfg, train(cfg, log=None)


def natural_like(rng, H, W):
    """Smooth colour field plus mild noise, a stand-in for photographic content."""
    yy, xx = np.mgrid[0:H, 0:W]
    img = np.stack(
        [128 + 60 * np.sin(xx / (7 + 3 * c) + c) * np.cos(yy / (11 + c)) for c in range(3)], axis=-1
    )
    img = img + rng.normal(0, 3, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
