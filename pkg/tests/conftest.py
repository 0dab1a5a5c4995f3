import numpy as np
import pytest

from geogrouse.policy import ModelConfig, Policy, build_params
from geogrouse.simulator import EnvironmentSpec, generate_environment
from geogrouse.training import check_vocab, conditioned_params


@pytest.fixture(scope="session")
def env():
    return generate_environment(EnvironmentSpec())


@pytest.fixture(scope="session")
def small_env():
    return generate_environment(EnvironmentSpec(n_items=40, n_users=120, cells_per_group=4, candidates=6))


def make_policy(variant="can", seed=0, conditioned=True, **kw):
    cfg = ModelConfig(variant=variant, **kw)
    vocab = check_vocab()
    rng = np.random.default_rng(seed)
    store = build_params(cfg, vocab, rng)
    if conditioned:
        conditioned_params(store, rng)
    return Policy(cfg, vocab, store)
