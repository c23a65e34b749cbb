import numpy as np
import pytest

from tgvseg.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def weighted_sum(t: Tensor, seed: int = 0) -> Tensor:
    """Scalar loss with non-uniform upstream gradient."""
    w = np.random.default_rng(9000 + seed).uniform(-1.0, 1.0, t.shape)
    return (t * Tensor(w)).sum()
