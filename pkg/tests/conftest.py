import numpy as np
import pytest

from core import LossSpec


@pytest.fixture
def alice_loss():
    # 효과가 있으면(y=1) 10 이득, 없으면 2 손실; 사용하지 않으면 0
    return LossSpec({"use": (2.0, -10.0), "skip": (0.0, 0.0)})


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_loss_spec(rng, n_actions=3, M=5.0):
    table = rng.uniform(-M, M, size=(n_actions, 2))
    return LossSpec({a: (table[a, 0], table[a, 1]) for a in range(n_actions)}, M=M)


@pytest.fixture
def make_loss_spec():
    return random_loss_spec
