"""Concurrent executor: drives transaction procedures through the
dependency-graph controller and assembles the preplay result for a batch.

Two drive modes share all scheduling policy:

* deterministic: a seeded scheduler advances up to W logical executors one
  operation at a time, so a (batch, seed) pair always yields the same
  schedule.  Protocol-mode simulation and the fuzzer use this.
* threaded: W real threads, wall-clock timing, for benchmark runs.

Aborted transactions re-enter the work queue at the tail.  A transaction
aborted max_aborts times escalates to exclusive mode: the pool quiesces (in
the deterministic scheduler any in-flight work is aborted back to the queue)
and the transaction runs alone, which guarantees it commits.
"""

from __future__ import annotations

import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .depgraph import DepGraph
from .model import ABORTED, PreplayResult, ProcRun, Transaction


@dataclass
class _Slot:
    tx: Transaction
    run: ProcRun
    send: object = None


@dataclass
class ConcurrentExecutor:
    workers: int = 4
    max_aborts: int = 10
    threaded: bool = False
    # threaded mode: pause per operation, standing in for storage latency.
    # Without it a procedure finishes inside one interpreter slice and
    # attempts never overlap.
    op_delay: float = 0.0
    counters: dict[str, int] = field(default_factory=dict)

    def preplay_batch(self, txs: Sequence[Transaction], snapshot: dict[str, int],
                      batch_id: str = "batch", *, seed: int = 0,
                      snapshot_version: str = "", shard: Optional[int] = None,
                      n_shards: Optional[int] = None,
                      schedule: Optional[Callable[[list[str]], str]] = None,
                      skip_read_guard: bool = False) -> PreplayResult:
        graph = DepGraph(snapshot, shard=shard, n_shards=n_shards,
                         skip_read_guard=skip_read_guard)
        by_digest = {tx.digest: tx for tx in txs}
        if len(by_digest) != len(txs):
            raise ValueError("duplicate transaction digests in batch")
        if txs:
            if self.threaded and schedule is None:
                reexec = self._run_threaded(list(txs), graph)
            else:
                reexec = self._run_deterministic(list(txs), graph, seed, schedule)
        else:
            reexec = 0
        order, reads, writes, results = graph.extract_schedule()
        assert len(order) == len(txs), "batch did not fully commit"
        self.counters[batch_id] = reexec
        return PreplayResult(
            batch_id=batch_id,
            order=order,
            txs=tuple(txs),
            reads=reads,
            writes=writes,
            results=results,
            snapshot_version=snapshot_version,
            reexec_count=reexec,
        )

    def reexecution_count(self, batch_id: str) -> int:
        return self.counters.get(batch_id, 0)

    # -- deterministic scheduler ------------------------------------------

    def _run_deterministic(self, txs: list[Transaction], graph: DepGraph,
                           seed: int, schedule) -> int:
        rng = random.Random(seed)
        queue: deque[Transaction] = deque(txs)
        slots: dict[str, _Slot] = {}
        aborts: dict[str, int] = {}
        reexec = 0

        def drain() -> None:
            nonlocal reexec
            for txid in graph.pop_aborted():
                reexec += 1
                aborts[txid] = aborts.get(txid, 0) + 1
                slot = slots.pop(txid, None)
                if slot is not None:
                    slot.run.close()
                    queue.append(slot.tx)
                else:
                    queue.append(next(t for t in txs if t.digest == txid))

        def run_exclusive(tx: Transaction) -> None:
            # quiesce: push in-flight work back, then run alone to commit
            for txid in list(slots):
                graph.abort_tx(txid)
            drain()
            graph.begin(tx.digest)
            run = ProcRun(tx)
            item = run.next_op()
            while item[0] != "done":
                if item[0] == "r":
                    value = graph.read(tx.digest, item[1])
                    assert value != ABORTED, "exclusive transaction cannot abort"
                    item = run.next_op(value)
                else:
                    graph.write(tx.digest, item[1], item[2])
                    item = run.next_op(None)
            outcome = graph.finalize(tx.digest, item[1])
            assert outcome[0] == "committed", "exclusive transaction must commit"

        while queue or slots:
            while queue and len(slots) < self.workers:
                tx = queue.popleft()
                if aborts.get(tx.digest, 0) >= self.max_aborts:
                    run_exclusive(tx)
                    drain()
                    continue
                graph.begin(tx.digest)
                slots[tx.digest] = _Slot(tx, ProcRun(tx))
            if not slots:
                continue
            active = list(slots)
            txid = schedule(active) if schedule else active[rng.randrange(len(active))]
            slot = slots[txid]
            item = slot.run.next_op(slot.send)
            slot.send = None
            if item[0] == "r":
                value = graph.read(txid, item[1])
                if value == ABORTED:
                    slots.pop(txid, None)
                else:
                    slot.send = value
            elif item[0] == "w":
                if graph.write(txid, item[1], item[2]) == ABORTED:
                    slots.pop(txid, None)
            else:  # done
                graph.finalize(txid, item[1])
                slots.pop(txid, None)
            drain()
        return reexec

    # -- threaded pool -----------------------------------------------------

    def _run_threaded(self, txs: list[Transaction], graph: DepGraph) -> int:
        total = len(txs)
        lock = threading.Lock()
        gate = _Gate()
        queue: deque[Transaction] = deque(txs)
        by_digest = {t.digest: t for t in txs}
        aborts: dict[str, int] = {}
        running: set[str] = set()
        parked: set[str] = set()
        stats = {"reexec": 0}
        failures: list[BaseException] = []
        rngs = [random.Random(7919 + i) for i in range(self.workers)]

        def requeue(txid: str) -> None:
            # caller holds lock
            stats["reexec"] += 1
            aborts[txid] = aborts.get(txid, 0) + 1
            queue.append(by_digest[txid])

        def drain() -> None:
            with lock:
                for txid in graph.pop_aborted():
                    if txid in running:
                        # its attempt is still on some thread; restarting
                        # now would race it, so hand back on exit instead
                        parked.add(txid)
                    else:
                        requeue(txid)

        def attempt(tx: Transaction) -> None:
            graph.begin(tx.digest)
            run = ProcRun(tx)
            item = run.next_op()
            while item[0] != "done":
                if item[0] == "r":
                    value = graph.read(tx.digest, item[1])
                    if value == ABORTED:
                        run.close()
                        return
                    item = run.next_op(value)
                else:
                    if graph.write(tx.digest, item[1], item[2]) == ABORTED:
                        run.close()
                        return
                    item = run.next_op(None)
                drain()
                time.sleep(self.op_delay)
            graph.finalize(tx.digest, item[1])

        def finish(txid: str) -> None:
            with lock:
                running.discard(txid)
                if txid in parked:
                    parked.discard(txid)
                    requeue(txid)

        def worker(wid: int) -> None:
            rng = rngs[wid]
            try:
                while True:
                    with lock:
                        done = len(graph.committed) >= total
                        tx = queue.popleft() if queue and not done else None
                        if tx is not None:
                            running.add(tx.digest)
                        retries = aborts.get(tx.digest, 0) if tx is not None else 0
                        exclusive = retries >= self.max_aborts
                    if tx is None:
                        if done or failures:
                            return
                        time.sleep(0.0005)
                        continue
                    if retries and not exclusive:
                        # randomized backoff; symmetric retry races on one
                        # hot key never resolve without it
                        time.sleep(rng.random() * self.op_delay * min(retries, 8))
                    if exclusive:
                        gate.enter_exclusive()
                        try:
                            attempt(tx)
                        finally:
                            gate.exit_exclusive()
                            finish(tx.digest)
                    else:
                        gate.enter_shared()
                        try:
                            attempt(tx)
                        finally:
                            gate.exit_shared()
                            finish(tx.digest)
                    drain()
            except BaseException as exc:  # surface worker errors to the caller
                failures.append(exc)

        threads = [threading.Thread(target=worker, args=(i,), daemon=True)
                   for i in range(self.workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if failures:
            raise failures[0]
        return stats["reexec"]


class _Gate:
    """Shared/exclusive admission: exclusive work waits out in-flight
    attempts and blocks new ones, so the escalated transaction runs alone."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._shared = 0
        self._exclusive = 0
        self._active = False

    def enter_shared(self) -> None:
        with self._cond:
            while self._exclusive:
                self._cond.wait()
            self._shared += 1

    def exit_shared(self) -> None:
        with self._cond:
            self._shared -= 1
            self._cond.notify_all()

    def enter_exclusive(self) -> None:
        with self._cond:
            self._exclusive += 1
            # wait out shared holders AND any other exclusive; two escalated
            # transactions running "alone" together would keep colliding
            while self._shared or self._active:
                self._cond.wait()
            self._active = True

    def exit_exclusive(self) -> None:
        with self._cond:
            self._exclusive -= 1
            self._active = False
            self._cond.notify_all()


def preplay_batch(txs: Sequence[Transaction], snapshot: dict[str, int],
                  batch_id: str = "batch", *, workers: int = 4, seed: int = 0,
                  threaded: bool = False, max_aborts: int = 10,
                  op_delay: float = 0.0, **kwargs) -> PreplayResult:
    ex = ConcurrentExecutor(workers=workers, max_aborts=max_aborts,
                            threaded=threaded, op_delay=op_delay)
    return ex.preplay_batch(txs, snapshot, batch_id=batch_id, seed=seed, **kwargs)
