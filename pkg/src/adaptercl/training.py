from __future__ import annotations

from typing import Iterator

import numpy as np


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator | None) -> Iterator[np.ndarray]:
    """Yield index arrays covering range(n); shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])
