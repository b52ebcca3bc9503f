import numpy as np
import pytest

from conceptkb.data import build_store
from conceptkb.model import Hyperparams, init_params


@pytest.fixture
def tiny_hp():
    return Hyperparams(n=5, m=4, k=2, gamma=1.0, tau=0.5, ell=1, lr=0.05,
                       batch_size=4, epochs=3, block_every=1, block_stop=3,
                       init_noise_sd=0.2, sampling_mode="uniform", block_budget=None)


@pytest.fixture
def tiny_store():
    train = np.array(
        [
            [0, 0, 1], [2, 0, 1], [3, 0, 4], [1, 0, 2],
            [0, 1, 3], [4, 1, 0], [2, 1, 3],
            [5, 2, 6], [6, 2, 5], [3, 2, 6],
        ],
        dtype=np.int64,
    )
    valid = np.array([[0, 0, 2], [5, 2, 3]], dtype=np.int64)
    test = np.array([[4, 1, 2], [6, 2, 3]], dtype=np.int64)
    return build_store(train, valid, test, n_entities=7, n_relations=3)


@pytest.fixture
def tiny_params(tiny_store, tiny_hp):
    params = init_params(tiny_store.n_entities, tiny_store.n_relations, tiny_hp, seed=11)
    rng = np.random.default_rng(7)
    params.head_scores[:] = rng.normal(size=params.head_scores.shape)
    params.tail_scores[:] = rng.normal(size=params.tail_scores.shape)
    return params
