"""Named, seedable counter-based random streams.

Every source of randomness in the package derives from one root seed via
Philox (a counter-based bit generator) keyed per purpose: a stream such as
``("partition", step, image)`` can be replayed in isolation without
advancing any other stream.  Keys are derived with BLAKE2b so unrelated
purposes never collide.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _derive_key(seed: int, purpose: str, indices: tuple[int, ...]) -> int:
    label = purpose + "".join(f"/{i}" for i in indices)
    digest = hashlib.blake2b(
        label.encode("utf-8"),
        digest_size=16,
        key=int(seed).to_bytes(8, "little", signed=True),
    ).digest()
    return int.from_bytes(digest, "little")


class Streams:
    """Factory of independent generators derived from one root seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, purpose: str, *indices: int) -> np.random.Generator:
        """Fresh generator for (purpose, indices); same arguments, same stream."""
        key = _derive_key(self.seed, purpose, indices)
        return np.random.Generator(np.random.Philox(key=key))

    def label(self, purpose: str, *indices: int) -> str:
        """Human-readable replay key for logs and partition plans."""
        return f"{self.seed}:{purpose}" + "".join(f"/{i}" for i in indices)
