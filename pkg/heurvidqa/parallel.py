import asyncio
from typing import Callable, Iterable


async def _gather_in_executor(function: Callable, items: list) -> list:
    loop = asyncio.get_running_loop()
    futures = [loop.run_in_executor(None, function, item) for item in items]
    return await asyncio.gather(*futures)


def map_in_order(function: Callable, items: Iterable, parallel: bool = True) -> list:
    """Apply `function` to every item on the default executor; results keep item order."""
    items = list(items)
    if not parallel or len(items) < 2:
        return [function(item) for item in items]
    try:
        asyncio.get_running_loop()
    except RuntimeError:
        return asyncio.run(_gather_in_executor(function, items))
    # already inside an event loop (e.g. a notebook), fall back to a plain loop
    return [function(item) for item in items]
