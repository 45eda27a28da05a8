"""Named deterministic random streams.

Every random decision in the project draws from a stream derived from
(root_seed, stream_name), so sub-components can be re-run independently and
whole runs reproduce bit-identically from the root seed alone.
"""

import hashlib

import numpy as np


def stream(root_seed, name):
    """A ``numpy.random.Generator`` unique to (root_seed, name)."""
    digest = hashlib.sha256(f"{int(root_seed)}:{name}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))
