"""Splittable deterministic randomness.

Every run derives all of its randomness from one 64-bit seed. A component
asks for a named stream; the stream's state is seeded by
sha256(seed_le64 || label), so adding a new consumer never perturbs the
draws of existing ones. The hash here is fixed (sha256) on purpose:
scenario reproducibility must not depend on the commitment-scheme choice.
"""

from __future__ import annotations

import hashlib
import random
import struct


def stream(seed: int, label: str) -> random.Random:
    digest = hashlib.sha256(struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF) + label.encode()).digest()
    return random.Random(int.from_bytes(digest, "big"))
