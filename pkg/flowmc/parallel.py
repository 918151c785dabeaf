from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional
import numpy as np

from flowmc.config import get_settings


def map_rows(
    fn: Callable[[np.ndarray], np.ndarray],
    rows: np.ndarray,
    threads: Optional[int] = None,
    chunk_size: int = 16384,
) -> np.ndarray:
    """Apply a pure row-wise function over chunks, concatenating in chunk order"""
    if threads is None:
        threads = get_settings().threads
    n = rows.shape[0]
    if n == 0:
        return fn(rows)
    starts = list(range(0, n, chunk_size))
    chunks = [rows[s:s + chunk_size] for s in starts]
    if threads <= 1 or len(chunks) == 1:
        return np.concatenate([fn(c) for c in chunks], axis=0)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(fn, chunks))
    return np.concatenate(results, axis=0)
