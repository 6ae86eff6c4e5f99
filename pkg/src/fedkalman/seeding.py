"""Stable seed derivation for parallel-safe reproducibility.

Component seeds are derived by hashing (global seed, component name,
client id, ...) so that adding or reordering work units never shifts
another unit's random stream.
"""

import hashlib


def derive_seed(*parts) -> int:
    """Map a tuple of ints/strings to a stable 63-bit seed."""
    blob = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1
