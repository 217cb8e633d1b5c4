"""Labeled seed derivation from one master seed."""
import hashlib


def derive_seed(master, *labels):
    """Stable 63-bit seed for (master, labels...), e.g. derive_seed(7, "init", 2)."""
    key = "/".join([str(int(master))] + [str(x) for x in labels]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1
