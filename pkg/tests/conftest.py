"""Session-scoped mini fixtures shared across test modules.

Everything here is intentionally tiny (16x16, narrow nets, short
schedules): enough structure for invariants to bite without slowing the
suite.  Desk-scale checks live in test_acceptance.py.
"""

import numpy as np
import pytest

from segmoe import data as data_mod
from segmoe import nets

MINI_RES = (16, 16)
MINI_HIDDEN = (8, 12, 12)


@pytest.fixture(scope="session")
def mini_ds():
    return data_mod.generate_pair(
        {"train": 12, "val": 4, "test": 6}, resolution=MINI_RES, seed=0
    )


def _train_expert(ds, domain, seed, epochs=12):
    cfg = nets.SegNetConfig(resolution=MINI_RES, hidden=MINI_HIDDEN)
    model = nets.SegModel(cfg, seed=seed)
    nets.fit(model, ds.split("train", domain=domain),
             nets.TrainConfig(epochs=epochs, batch_size=8, seed=seed))
    return model


@pytest.fixture(scope="session")
def mini_experts(mini_ds):
    ea = _train_expert(mini_ds, "A", seed=11)
    eb = _train_expert(mini_ds, "B", seed=22)
    ea.freeze()
    eb.freeze()
    return ea, eb


@pytest.fixture(scope="session")
def mini_baseline(mini_ds):
    cfg = nets.SegNetConfig(resolution=MINI_RES, hidden=MINI_HIDDEN)
    model = nets.SegModel(cfg, seed=33)
    nets.fit(model, mini_ds.split("train"),
             nets.TrainConfig(epochs=12, batch_size=8, seed=33))
    return model


@pytest.fixture()
def mini_sample(mini_ds):
    s = mini_ds.split("test")[0]
    return s.image[None].copy(), s.mask[None].copy()
