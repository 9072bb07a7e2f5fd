"""Small shared helpers."""

from __future__ import annotations

import hashlib

_MASK = (1 << 64) - 1


def mix_seed(*parts) -> int:
    """Deterministically fold ints/strings into one 63-bit seed (splitmix64)."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        if isinstance(p, str):
            p = int.from_bytes(hashlib.sha256(p.encode("utf-8")).digest()[:8], "little")
        z = (h ^ (int(p) & _MASK)) & _MASK
        z = (z + 0x9E3779B97F4A7C15) & _MASK
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        h = z ^ (z >> 31)
    return h & (2**63 - 1)
