"""Deterministic seed derivation.

All randomness in the toolkit flows from a single root seed. Component seeds
are derived by hashing the root together with a path of string/int parts, so
adding a new consumer never perturbs the streams of existing ones.
"""

from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1


def derive_seed(root: int, *parts: str | int) -> int:
    """Derive a stable 64-bit seed from a root seed and a label path.

    The same (root, parts) always yields the same value, across processes and
    platforms. Distinct paths yield independent-looking seeds.
    """
    h = hashlib.sha256()
    h.update((int(root) & ((1 << 128) - 1)).to_bytes(16, "little", signed=False))
    for part in parts:
        token = f"{type(part).__name__}:{part}"
        h.update(token.encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little") & _MASK64
