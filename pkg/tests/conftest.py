import numpy as np
import pytest

from widenet.model import WideNetConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_cfg():
    return WideNetConfig(depth=2, d_model=8, d_ff=8, heads=2, groups=2, vocab_size=8, e_embed=4, seq_len=4,
                         num_classes=3)  # fmt: skip
