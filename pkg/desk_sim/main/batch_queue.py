from __future__ import annotations

import asyncio
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import AsyncIterator, Callable, Iterable, Optional, Tuple

from ..api import ViewBatch
from .log import LOG

BatchBuilder = Callable[[int, int], ViewBatch]
BatchConsumer = Callable[[int, int, ViewBatch], None]


@dataclass(frozen=True)
class PrefetchQueueStatus:
    queue_size: int
    submitted_batches: int
    consumed_batches: int
    pending_batches: int


@dataclass
class PrefetchedBatch:
    epoch: int
    batch_index: int
    future: "asyncio.Future[ViewBatch]"


class BatchPrefetchQueue:
    """
    Bounded queue of batch futures. Batches are built on an executor and
    handed out strictly in submission order, so the consumer sees the same
    sequence whatever the worker count.
    """

    def __init__(self, build: BatchBuilder, executor: Executor, queue_size: int):
        self.build = build
        self.executor = executor
        self.queue_size = queue_size
        self.submitted_batches = 0
        self.consumed_batches = 0

        self.queue = asyncio.Queue(
            maxsize=queue_size
        )  # type: asyncio.Queue[Optional[PrefetchedBatch]]

    async def produce(self, schedule: Iterable[Tuple[int, int]]):
        loop = asyncio.get_running_loop()

        for epoch, batch_index in schedule:
            future = loop.run_in_executor(self.executor, self.build, epoch, batch_index)
            self.submitted_batches = self.submitted_batches + 1

            await self.queue.put(PrefetchedBatch(epoch, batch_index, future))

        await self.queue.put(None)

    async def batches(self) -> AsyncIterator[Tuple[int, int, ViewBatch]]:
        while True:
            LOG.debug("Waiting for prefetched batch.")

            entry = await self.queue.get()
            if entry is None:
                return

            batch = await entry.future
            self.consumed_batches = self.consumed_batches + 1

            yield entry.epoch, entry.batch_index, batch

    def get_status(self) -> PrefetchQueueStatus:
        return PrefetchQueueStatus(
            queue_size=self.queue_size,
            submitted_batches=self.submitted_batches,
            consumed_batches=self.consumed_batches,
            pending_batches=self.queue.qsize(),
        )


async def consume_batches(
    build: BatchBuilder,
    schedule: Iterable[Tuple[int, int]],
    consume: BatchConsumer,
    threads: int,
    queue_size: int,
) -> PrefetchQueueStatus:
    """
    Build the scheduled batches on a worker pool and feed them, in order,
    to ``consume`` on the calling event loop.
    """
    executor = ThreadPoolExecutor(max_workers=threads, thread_name_prefix="sim-augment")
    queue = BatchPrefetchQueue(build, executor, queue_size)

    LOG.info("Batch prefetch starting (%d workers, queue size %d).", threads, queue_size)

    producer = asyncio.ensure_future(queue.produce(schedule))
    try:
        async for epoch, batch_index, batch in queue.batches():
            consume(epoch, batch_index, batch)

        await producer
    finally:
        producer.cancel()
        executor.shutdown(wait=True, cancel_futures=True)

    return queue.get_status()


def run_batches(
    build: BatchBuilder,
    schedule: Iterable[Tuple[int, int]],
    consume: BatchConsumer,
    threads: int = 1,
    queue_size: int = 4,
) -> PrefetchQueueStatus:
    return asyncio.run(consume_batches(build, schedule, consume, threads, queue_size))
