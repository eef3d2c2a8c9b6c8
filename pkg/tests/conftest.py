import os
from pathlib import Path

import numpy as np
import pytest

from addl.nets import ADDLModel
from addl.training import Recipe, load_or_train

CACHE_DIR = Path(os.environ.get("ADDL_CACHE_DIR", Path(__file__).resolve().parent.parent / ".addl_cache"))


def jittered_model(seed: int = 7, scale: float = 0.05) -> ADDLModel:
    """Untrained model with every weight nudged, so no path is trivially zero."""
    m = ADDLModel(seed=seed)
    rng = np.random.default_rng(seed)
    for p in m.params().values():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return m


@pytest.fixture(scope="session")
def toy_model():
    return jittered_model()


@pytest.fixture(scope="session")
def trained():
    """Reference weights from the default recipe, trained once and cached on disk.

    Set ADDL_RETRAIN=1 to ignore the cache.
    """
    retrain = os.environ.get("ADDL_RETRAIN", "") == "1"
    model, log, fresh = load_or_train(Recipe(), CACHE_DIR, retrain=retrain, progress=print)
    return model, log, fresh


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
