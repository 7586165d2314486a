import numpy as np
import pytest

from revq.quant import Codebook, QuantizerBank


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_bank(rng, dim=4, n_shared=1, n_routed=8, size=16, zero_entry=True):
    """Random bank; entry 0 of every codebook is zeroed unless disabled."""
    def make():
        entries = rng.normal(size=(size, dim))
        if zero_entry:
            entries[0] = 0.0
        return Codebook(entries)

    return QuantizerBank([make() for _ in range(n_shared)],
                         [make() for _ in range(n_routed)])
