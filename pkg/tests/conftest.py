import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from unimask.vocab import Tokenizer, Vocabulary

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

@pytest.fixture(scope="session")
def vocab():
    return Vocabulary()


@pytest.fixture(scope="session")
def tok(vocab):
    return Tokenizer(vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Lazily trained toy models, one per task, shared across the session."""
    from unimask.tasks import make_task
    from unimask.train import TOY_RECIPES, TrainConfig, train_toy

    cache = {}

    def get(kind):
        if kind not in cache:
            task = make_task(kind)
            out = tmp_path_factory.mktemp(kind)
            cache[kind] = (task, train_toy(task, TrainConfig(seed=0, **TOY_RECIPES[kind]), out))
        return cache[kind]

    return get
