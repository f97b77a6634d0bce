import threading

import pytest

from ringsim.core.exceptions import ValidationError
from ringsim.tasks.sweeps import ordered_map


@pytest.mark.unit
class TestOrderedMap:
    def test_serial(self):
        assert ordered_map(lambda x: x * x, [3, 1, 2]) == [9, 1, 4]

    def test_threads_keep_input_order(self):
        names = set()

        def work(x):
            names.add(threading.current_thread().name)
            return -x

        assert ordered_map(work, range(20), workers=4) == [-x for x in range(20)]
        assert all(name.startswith("ringsim-sweep") for name in names)

    def test_single_item_runs_inline(self):
        assert ordered_map(lambda _: threading.current_thread().name, ["only"], workers=8) == [
            threading.current_thread().name
        ]

    def test_empty(self):
        assert ordered_map(str, [], workers=2) == []

    def test_rejects_zero_workers(self):
        with pytest.raises(ValidationError):
            ordered_map(str, [1, 2], workers=0)

    def test_worker_errors_propagate(self):
        def fail(x):
            raise RuntimeError(f"item {x}")

        with pytest.raises(RuntimeError, match="item"):
            ordered_map(fail, [1, 2, 3], workers=2)
