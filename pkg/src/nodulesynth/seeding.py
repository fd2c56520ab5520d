"""Deterministic seed derivation.

Every source of randomness in the package draws its seed from a single root
via labeled hashing, so any stage can be reproduced in isolation and resumed
runs see identical random streams.
"""

from __future__ import annotations

import hashlib


def derive_seed(root: int, *labels: object) -> int:
    """A stable 63-bit seed for the (root, labels...) stream."""
    h = hashlib.sha256(str(int(root)).encode("ascii"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)
