"""One root seed, independent per-component streams.

stream id = first 8 bytes (big-endian) of sha256(component name); the
generator is ``PCG64(SeedSequence(root_seed, spawn_key=(stream_id,)))``.
"""

import hashlib

import numpy as np


def stream_id(component):
    return int.from_bytes(hashlib.sha256(component.encode("utf-8")).digest()[:8], "big")


def component_seed(root_seed, component):
    seq = np.random.SeedSequence(int(root_seed), spawn_key=(stream_id(component),))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def component_rng(root_seed, component):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(root_seed),
                                                                      spawn_key=(stream_id(component),))))
