"""Seed fan-out.

Every stochastic component draws from its own stream derived from one master
seed: the component name is hashed (SHA-256, first 8 bytes, little-endian)
and used as the spawn key of a :class:`numpy.random.SeedSequence` whose
entropy is the master seed. Streams are therefore independent of each other
and of the order in which components are created.
"""
import hashlib

import numpy as np


def component_key(name):
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(master_seed, component):
    """Return a 32-bit integer seed for ``component`` under ``master_seed``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(component_key(component),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(master_seed, component, *extra):
    """Generator for ``component``; ``extra`` integers (e.g. epoch) extend the key."""
    key = (component_key(component),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=key))
