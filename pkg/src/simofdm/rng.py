"""Named, seedable random streams on top of numpy's counter-based Philox generator.

Every stochastic draw in a run (bits, noise, scatterers, shadowing, power levels,
initialization) pulls from its own stream, keyed by the master seed plus a tuple of
name tokens. Streams are independent of each other and of evaluation order, which is
what makes sweeps and Monte-Carlo replicas exactly replayable.
"""

import hashlib

import numpy as np


class SeedHub:
    """Derives independent Philox generators from (master_seed, *tokens)."""

    def __init__(self, master_seed):
        self.master_seed = int(master_seed)

    def stream(self, *tokens) -> np.random.Generator:
        """Return a fresh generator for the named stream. Same tokens, same stream."""
        material = repr((self.master_seed,) + tuple(tokens)).encode()
        digest = hashlib.sha256(material).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *tokens) -> "SeedHub":
        """Derive a sub-hub (e.g. one per Monte-Carlo replica)."""
        material = repr((self.master_seed, "child") + tuple(tokens)).encode()
        digest = hashlib.sha256(material).digest()
        return SeedHub(int.from_bytes(digest[:8], "little"))
