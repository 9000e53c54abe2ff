"""Deterministic seed derivation.

Every stochastic stage in the simulator draws from a seed derived here, so a
run is a pure function of its master seed. Python's builtin hash() is salted
per process and must never be used for this.
"""

from __future__ import annotations

import hashlib


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from an ordered tuple of labels/values."""
    text = "\x1f".join(_canon(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def derive_salt(*parts: object) -> bytes:
    """Stable 16-byte salt, e.g. the pre-shared value seeding per-client codecs."""
    text = "\x1f".join(_canon(p) for p in parts)
    return hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()


def _canon(part: object) -> str:
    if isinstance(part, bytes):
        return part.hex()
    if isinstance(part, (tuple, list)):
        return ",".join(_canon(p) for p in part)
    return f"{type(part).__name__}:{part}"
