import numpy as np
import pytest

from deepred.eventlog import ITEM, USER, HistoryBatch
from deepred.model import DeePRedModel, ModelConfig


def random_batch(rng, n, k, n_counterparts, side=USER, n_owners=10, min_len=0):
    """Random left-padded histories with strictly decreasing deltas."""
    valid = rng.integers(min_len, k + 1, size=n)
    cps = np.full((n, k), -1, dtype=np.int64)
    deltas = np.zeros((n, k))
    for r in range(n):
        v = valid[r]
        if v:
            cps[r, k - v:] = rng.integers(n_counterparts, size=v)
            deltas[r, k - v:] = np.sort(rng.uniform(0.1, 5.0, size=v))[::-1]
    return HistoryBatch(cps, deltas, valid.astype(np.int64), rng.integers(n_owners, size=n), side)


def random_pair_batch(model, rng, n, min_len=1):
    k = model.cfg.k
    uh = random_batch(rng, n, k, model.n_items, USER, model.n_users, min_len)
    ih = random_batch(rng, n, k, model.n_users, ITEM, model.n_items, min_len)
    return uh, ih


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return DeePRedModel(7, 9, ModelConfig(d=6, k=4), seed=3)
