"""Seeded counter-based random streams.

Every component draws from its own Philox stream. Streams share the run
seed and are separated by fixed jump offsets, so adding draws to one
component never shifts the numbers another component sees.
"""

from typing import Dict
import numpy as np

STREAM_OFFSETS: Dict[str, int] = {
    "init": 0,
    "sampler": 1,
    "trainer": 2,
    "selection": 3,
    "evaluation": 4,
}


def philox_generator(seed: int, offset: int = 0) -> np.random.Generator:
    """Generator on the Philox stream `offset` jumps away from `seed`"""
    bit_generator = np.random.Philox(seed)
    if offset:
        bit_generator = bit_generator.jumped(offset)
    return np.random.Generator(bit_generator)


class RngStreams:
    """Named per-component generators derived from one seed"""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def __getattr__(self, name: str) -> np.random.Generator:
        if name.startswith("_") or name not in STREAM_OFFSETS:
            raise AttributeError(name)
        if name not in self._streams:
            self._streams[name] = philox_generator(self.seed, STREAM_OFFSETS[name])
        return self._streams[name]
