"""Counter-based random streams.

Every random block is addressed by ``(seed, purpose, *counter)``: the seed and
purpose select a Philox key, the counter words select the block.  Inside a
block, row ``m`` belongs to ensemble member ``m``, so a member's noise does not
depend on how many other members are simulated or in which order.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "sampler": 1,
    "train": 2,
    "jump_diffusion": 3,
    "navier_stokes": 4,
    "bootstrap": 5,
    "permutation": 6,
    "data": 7,
    "reference": 8,
    "split": 9,
    "init": 10,
}


def _key(seed: int, purpose: str) -> np.ndarray:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.SeedSequence([int(seed), PURPOSES[purpose]]).generate_state(2, np.uint64)


def generator(seed: int, purpose: str, *counter: int) -> np.random.Generator:
    """Generator for the block ``(seed, purpose, *counter)``; at most 3 counter words."""
    if len(counter) > 3:
        raise ValueError("at most three counter words")
    words = [0, *[int(c) for c in counter]] + [0] * (3 - len(counter))
    return np.random.Generator(np.random.Philox(key=_key(seed, purpose), counter=words))


def member_normals(seed: int, purpose: str, counter: tuple, members, dim: int) -> np.ndarray:
    """Standard normals of shape ``(len(members), dim)``; row i is member ``members[i]``'s draw.

    ``members`` is an integer array of member ids.  The block is generated up
    to the largest id, so draws for a given member are identical whichever
    subset is requested.
    """
    members = np.asarray(members, dtype=np.int64)
    if members.ndim != 1:
        raise ValueError("members must be a 1-D array of ids")
    if members.size == 0:
        return np.empty((0, dim))
    n_rows = int(members.max()) + 1
    block = generator(seed, purpose, *counter).standard_normal((n_rows, dim))
    if members.size == n_rows and np.array_equal(members, np.arange(n_rows)):
        return block
    return block[members]
