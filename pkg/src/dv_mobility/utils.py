"""General utilities shared across dv-mobility."""

import hashlib
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def map_jobs(
    func: Callable[[T], R], items: Iterable[T], threads: int = 1
) -> List[R]:
    """Apply a function to every item, optionally using a thread pool.

    Results are always returned in the order of the inputs, so the output
    does not depend on the number of threads.

    Parameters
    ----------
    func : Callable
        Function to apply.
    items : Iterable
        Inputs.
    threads : int
        Maximum number of worker threads. One means run inline.

    Returns
    -------
    list
        Results in input order.
    """
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(func, items))


def derive_seed(seed: int, *keys) -> int:
    """Derive a child seed from a master seed and a sequence of keys.

    Keys may be integers or strings. The result only depends on the inputs,
    never on call order or scheduling.

    Parameters
    ----------
    seed : int
        Master seed.
    keys : int or str
        Identifiers of the stream, e.g. a tree index or a stage name.

    Returns
    -------
    int
        Seed in the range [0, 2**32).
    """
    entropy = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key))
    state = np.random.SeedSequence(entropy).generate_state(1)
    return int(state[0])


def sha256_file(path) -> str:
    """Return the hex SHA-256 digest of a file."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def as_float_array(values, name="values") -> np.ndarray:
    """Convert to a 1-dimensional float array and check it is finite."""
    from .errors import ParameterError

    array = np.asarray(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(array)):
        raise ParameterError(f"{name} contains non-finite entries")
    return array
