import threading
import time

import pytest

from src.runner import chunk_bounds, map_chunks


def test_chunk_bounds():
    assert chunk_bounds(10, 4) == [(0, 4), (4, 8), (8, 10)]
    assert chunk_bounds(0, 4) == []
    with pytest.raises(ValueError):
        chunk_bounds(10, 0)


def test_results_keep_chunk_order():
    seen = set()

    def slow_first(start, stop):
        seen.add(threading.get_ident())
        if start == 0:
            time.sleep(0.05)
        return list(range(start, stop))

    out = map_chunks(slow_first, 20, 3, threads=4)
    assert [x for chunk in out for x in chunk] == list(range(20))
    assert len(seen) > 1


def test_single_thread_runs_inline():
    caller = threading.get_ident()
    out = map_chunks(lambda a, b: threading.get_ident(), 5, 2, threads=1)
    assert out == [caller] * 3
