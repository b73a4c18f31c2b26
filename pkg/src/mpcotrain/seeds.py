"""Deterministic seed derivation shared by every randomized component.

A single master seed drives data generation, weight initialization, slice
shuffling and pixel subsampling.  Each component derives its own child seed
from the master seed plus a tag path, so results never depend on scheduling
or worker count.
"""

import hashlib


def derive_seed(master_seed: int, *tags: str) -> int:
    """Derive a child seed from a master seed and a component tag path.

    Uses SHA-256 over ``"<master>/<tag>/<tag>/..."`` so the mapping is stable
    across platforms and Python processes (unlike the builtin ``hash``).

    Returns:
        An unsigned 64-bit integer seed.
    """
    text = "/".join([str(int(master_seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
