"""Deterministic fan-out from one root seed to per-stage seeds."""

import hashlib


def derive_seed(root, *labels):
    """Map a root seed plus context labels to a 32-bit stage seed.

    The fan-out is SHA-256 over the string "root/label1/label2/...", taking
    the first eight digest bytes little-endian, reduced mod 2**32.  Every
    stochastic stage (corpus synthesis, parameter init, training shuffles,
    attack targets, defense noise draws) derives its seed this way so a
    single root seed pins the whole pipeline.
    """
    key = "/".join([str(int(root))] + [str(label) for label in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**32)
