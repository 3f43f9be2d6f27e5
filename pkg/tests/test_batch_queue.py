from __future__ import annotations

import asyncio
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from desk_sim.main.batch_queue import BatchPrefetchQueue, consume_batches, run_batches

SCHEDULE = [(epoch, b) for epoch in range(2) for b in range(5)]


def slow_build(epoch, batch_index):
    # later batches finish first when several workers are busy
    time.sleep(0.002 * (5 - batch_index))
    return ("batch", epoch, batch_index)


@pytest.mark.asyncio
async def test_batches_arrive_in_schedule_order():
    seen = []

    status = await consume_batches(
        slow_build, SCHEDULE, lambda e, b, batch: seen.append(batch), threads=4, queue_size=2
    )

    assert seen == [("batch", e, b) for e, b in SCHEDULE]
    assert status.submitted_batches == status.consumed_batches == len(SCHEDULE)
    assert status.pending_batches == 0


@pytest.mark.asyncio
async def test_queue_is_bounded():
    executor = ThreadPoolExecutor(max_workers=1)
    queue = BatchPrefetchQueue(slow_build, executor, queue_size=2)

    producer = asyncio.ensure_future(queue.produce(SCHEDULE))
    await asyncio.sleep(0.05)

    assert queue.get_status().pending_batches == 2
    assert queue.get_status().submitted_batches == 3

    producer.cancel()
    await asyncio.gather(producer, return_exceptions=True)
    executor.shutdown(wait=True)
    await asyncio.sleep(0)


def test_run_batches_from_sync_code():
    seen = []
    run_batches(slow_build, SCHEDULE[:3], lambda e, b, batch: seen.append((e, b)), threads=2)
    assert seen == SCHEDULE[:3]


def test_builder_errors_propagate():
    def broken(epoch, batch_index):
        if batch_index == 2:
            raise ValueError("bad sample")
        return batch_index

    seen = []
    with pytest.raises(ValueError, match="bad sample"):
        run_batches(broken, SCHEDULE, lambda e, b, batch: seen.append(batch), threads=2)

    assert seen == [0, 1]
