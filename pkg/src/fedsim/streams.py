"""Seeded RNG stream discipline shared by every optimizer.

All four algorithms draw client participation and minibatches from the same
named streams keyed on (seed, purpose, round[, client]), so a single seed
yields identical sampling everywhere and runs differ only algorithmically.
Projector randomness lives in its own stream (see subspace.generate_projector)
and is consumed only by the subspace methods.
"""

from __future__ import annotations

import numpy as np

_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)
TAG_CLIENTS = 2
TAG_BATCH = 3


def _gen(*entropy: int) -> np.random.Generator:
    key = tuple(int(np.uint64(e) & _U64) for e in entropy)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def round_clients(seed: int, round: int, num_clients: int, clients_per_round: int) -> np.ndarray:
    """Uniform sample without replacement, returned in ascending order.

    Ascending order fixes the aggregation order regardless of scheduling.
    """
    g = _gen(seed, TAG_CLIENTS, round)
    picked = g.permutation(num_clients)[:clients_per_round]
    return np.sort(picked)


def round_batches(seed: int, round: int, client: int, n: int,
                  local_steps: int, batch_size: int) -> np.ndarray:
    """Minibatch indices for one client's K local steps, shape (K, batch_size).

    One stream per (client, round); row k holds step k's batch, sampled
    without replacement within the step (random-keys order statistics) and
    independent across steps.
    """
    g = _gen(seed, TAG_BATCH, round, client)
    keys = g.random((local_steps, n))
    return np.argsort(keys, axis=1)[:, :batch_size]
