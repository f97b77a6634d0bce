from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

import structlog

from ringsim.core.exceptions import ValidationError

logger = structlog.get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(func: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """Apply ``func`` to every item and return results in input order.

    Runs are independent, so results do not depend on ``workers``. The
    closed-loop kernel releases the GIL, which lets threads overlap.
    """
    if workers < 1:
        raise ValidationError("worker count must be at least 1", details={"workers": workers})
    items = list(items)
    if workers == 1 or len(items) <= 1:
        return [func(item) for item in items]

    pool_size = min(workers, len(items))
    logger.info("sweep started", item_count=len(items), workers=pool_size)
    with ThreadPoolExecutor(max_workers=pool_size, thread_name_prefix="ringsim-sweep") as pool:
        return list(pool.map(func, items))
