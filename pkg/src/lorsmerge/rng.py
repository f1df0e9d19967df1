"""Counter-based deterministic random streams.

Every stochastic operation in the package (DARE masks, bootstrap resamples,
workbench data generation) draws from a Philox generator whose 256-bit key is
derived by hashing a user seed together with a stream label. Streams are
therefore independent of scheduling: the same (seed, label) pair yields the
same draws no matter which thread asks first.
"""

import hashlib

import numpy as np


def philox_stream(seed: int, label: object) -> np.random.Generator:
    """Return a generator keyed by ``seed`` and a stream ``label``.

    ``label`` is formatted with ``str``; use tensor names, iteration indices,
    or any other stable identifier.
    """
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    material = int(seed).to_bytes(8, "little") + b"\x00" + str(label).encode("utf-8")
    key = int.from_bytes(hashlib.sha256(material).digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, label: object) -> int:
    """Derive a 63-bit sub-seed from ``seed`` and ``label`` (for nested use)."""
    material = int(seed).to_bytes(8, "little", signed=False) + b"\x01" + str(label).encode("utf-8")
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "little") >> 1
