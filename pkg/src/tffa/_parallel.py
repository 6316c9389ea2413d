from concurrent.futures import ThreadPoolExecutor

_default_threads = 1


def set_default_threads(n):
    global _default_threads
    _default_threads = max(1, int(n))


def get_default_threads():
    return _default_threads


def pmap(fn, items, threads=None):
    """Order-preserving map over a thread pool.

    Results come back in input order, so any reduction done by the caller is
    independent of the thread count.
    """
    items = list(items)
    threads = _default_threads if threads is None else max(1, int(threads))
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as ex:
        return list(ex.map(fn, items))
