"""Keyed, counter-based random streams.

Every random draw in the simulator comes from a Philox generator whose
128-bit key is a hash of ``(seed, path)``. A path is a tuple of labels such as
``("run", 3, "layer", 1, "wq", "replica", 0, "block", 0, 1)``. Streams for
different paths share no state, so the order in which work is scheduled never
changes a result.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_SEP = b"\x1f"


def _encode_label(label) -> bytes:
    if isinstance(label, bool):
        raise TypeError("bool is not a valid path label")
    if isinstance(label, (int, np.integer)):
        return b"i" + str(int(label)).encode()
    if isinstance(label, str):
        return b"s" + label.encode("utf-8")
    raise TypeError(f"path labels must be int or str, got {type(label).__name__}")


@dataclass(frozen=True)
class RngKey:
    seed: int
    path: tuple = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")
        object.__setattr__(self, "path", tuple(self.path))
        for label in self.path:
            _encode_label(label)

    def child(self, *labels) -> "RngKey":
        return RngKey(self.seed, self.path + labels)

    def digest(self) -> bytes:
        h = hashlib.blake2b(digest_size=16)
        h.update(int(self.seed).to_bytes(8, "little"))
        for label in self.path:
            h.update(_SEP)
            h.update(_encode_label(label))
        return h.digest()

    def derived_seed(self) -> int:
        """A 64-bit integer summarising the key, for reporting."""
        return int.from_bytes(self.digest()[:8], "little")

    def generator(self) -> np.random.Generator:
        key = np.frombuffer(self.digest(), dtype="<u8").astype(np.uint64)
        return np.random.Generator(np.random.Philox(key=key))
