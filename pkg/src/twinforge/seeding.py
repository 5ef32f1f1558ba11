"""Named sub-streams from a single experiment seed.

Every random decision in an experiment draws from a stream addressed by
(seed, label...), so components are reproducible independently of each
other and of evaluation order.
"""

import zlib

import numpy as np


def substream_seq(seed, *labels):
    key = tuple(zlib.crc32(str(label).encode("utf-8")) for label in labels)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=key)


def substream(seed, *labels):
    """np.random.Generator for the named sub-stream of ``seed``."""
    return np.random.default_rng(substream_seq(seed, *labels))
