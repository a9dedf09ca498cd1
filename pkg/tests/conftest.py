import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from cycleflow import corrnet as cn
from cycleflow import quartetgen as qg


def tiny_net_config(size: int = 32) -> cn.NetConfig:
    """Smallest legal network: quick forwards, exhaustive gradchecks."""
    return cn.NetConfig(
        input_size=(size, size),
        encoder_channels=[2, 2, 2, 2, 3, 3, 3, 3],
        flow_decoder_channels=[3, 3, 3, 3, 2, 2, 2, 2, 2],
        match_decoder_channels=[3, 3, 3, 3, 2, 2, 2, 2, 1],
    )


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_net_config()


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Small generated dataset shared across test modules."""
    root = tmp_path_factory.mktemp("toyds")
    cfg = qg.GenConfig(shapes_per_category=3, instances_per_category=8,
                       val_instances_per_category=3, num_quartets=20, seed=7)
    qg.generate_dataset(cfg, str(root))
    return qg.QuartetDataset(str(root))


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criteria verdicts after the run."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)


def numerical_gradient(f, arr: np.ndarray, eps: float = 1e-5,
                       coords=None) -> np.ndarray:
    """Independent central-difference gradient used to cross-check both the
    analytic gradients and the package's own gradcheck."""
    flat = arr.reshape(-1)
    out = np.zeros_like(flat)
    idxs = range(flat.size) if coords is None else coords
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(arr.shape)
