"""Deterministic seed derivation for reproducible runs."""

from __future__ import annotations

import hashlib


def derive_seed(*parts: int | str) -> int:
    """Map a tuple of run coordinates to a stable 63-bit seed.

    Python's built-in ``hash`` is salted per process, so seeds are derived
    from a SHA-256 digest of the joined parts instead. Any mix of ints and
    strings is accepted; e.g. ``derive_seed(base, "ckpt", stage, instance)``.
    """
    key = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
