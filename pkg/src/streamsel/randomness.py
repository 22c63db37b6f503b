"""Reproducible random substreams.

Each replication owns one generator per input stream (the real-world data
feed) and one per design (its simulation runs). Generators are derived from
``(master_seed, replication, role, index)`` through ``SeedSequence`` spawn
keys, so a substream never depends on how many stages are run, on the
allocation policy, or on which worker process executes the replication.
"""

from __future__ import annotations

import numpy as np

INPUT_ROLE = 0
SIMULATION_ROLE = 1
PILOT_ROLE = 2


def substream(master_seed: int, *key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


class ReplicationStreams:
    def __init__(self, master_seed: int, replication: int, n_streams: int, n_designs: int):
        self.master_seed = int(master_seed)
        self.replication = int(replication)
        self.inputs = [substream(master_seed, replication, INPUT_ROLE, s) for s in range(n_streams)]
        self.simulations = [substream(master_seed, replication, SIMULATION_ROLE, i) for i in range(n_designs)]
