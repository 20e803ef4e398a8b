"""Deterministic random stream management.

Every stochastic routine in the package draws from a named substream of a
single master seed. Substreams use the counter-based Philox generator and
are derived from (seed, hashed name), so the same label always gives the
same stream and results cannot depend on thread scheduling or worker
count. Array draws are made in one fixed-layout call per substream.
"""

import hashlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

_MASK64 = (1 << 64) - 1


def substream(master_seed, name):
    """Return a fresh Generator for the substream `name` of `master_seed`."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    tag = int.from_bytes(digest, "little")
    ss = np.random.SeedSequence([int(master_seed) & _MASK64, tag])
    return np.random.Generator(np.random.Philox(seed=ss))


def parallel_map(fn, items, workers=1):
    """Apply fn to each item, returning results in input order.

    workers <= 1 runs inline. With more workers a thread pool is used
    (numpy releases the GIL in the heavy kernels); results are slotted by
    index so the output does not depend on completion order.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
