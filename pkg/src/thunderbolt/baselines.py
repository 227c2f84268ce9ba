"""Reference concurrency controls for the benchmark comparisons.

Both engines drive the same generator procedures as the dependency-graph
executor and report their outcome in the same result shape, so abort counts
and schedules are directly comparable:

* optimistic: reads record the version they saw, writes buffer locally, and
  a central backward validation at commit rejects the attempt if any read
  version moved.
* two-phase locking, no-wait: exclusive per-key locks taken at first touch;
  hitting a held lock aborts the attempt immediately (release everything,
  re-queue at the tail).

Versions double as committed order indexes, so the serial-replay oracle can
check both engines' output unchanged.
"""

from __future__ import annotations

import random
import threading
import time
from collections import deque
from typing import Any, Optional, Sequence

from .model import PreplayResult, ProcRun, Transaction


class _Store:
    """Committed state: key -> value plus the order index of its last
    writer (-1 for the initial snapshot)."""

    def __init__(self, snapshot: dict[str, int], default: int = 0):
        self.values = dict(snapshot)
        self.writer: dict[str, int] = {}
        self.default = default
        self.order: list[str] = []
        self.reads: dict[str, dict[str, tuple[Any, int]]] = {}
        self.writes: dict[str, dict[str, Any]] = {}
        self.results: dict[str, Any] = {}

    def get(self, key: str) -> tuple[Any, int]:
        return self.values.get(key, self.default), self.writer.get(key, -1)

    def commit(self, txid: str, reads, write_buf, result) -> int:
        idx = len(self.order)
        self.order.append(txid)
        self.reads[txid] = dict(reads)
        self.writes[txid] = dict(write_buf)
        self.results[txid] = result
        for key, value in write_buf.items():
            self.values[key] = value
            self.writer[key] = idx
        return idx


class _Conflict(Exception):
    pass


class _OccSession:
    def __init__(self, store: _Store):
        self.store = store
        self.reads: dict[str, tuple[Any, int]] = {}
        self.write_buf: dict[str, Any] = {}

    def read(self, key: str) -> Any:
        if key in self.write_buf:
            return self.write_buf[key]
        if key in self.reads:
            return self.reads[key][0]
        value, ver = self.store.get(key)
        self.reads[key] = (value, ver)
        return value

    def write(self, key: str, value: Any) -> None:
        self.write_buf[key] = value

    def finish(self, result: Any, txid: str) -> bool:
        # backward validation: all read versions must still be current
        for key, (_, ver) in self.reads.items():
            if self.store.get(key)[1] != ver:
                return False
        self.store.commit(txid, self.reads, self.write_buf, result)
        return True

    def release(self) -> None:
        pass


class _LockTable:
    def __init__(self):
        self.owner: dict[str, str] = {}


class _TplSession:
    def __init__(self, store: _Store, locks: _LockTable, txid: str):
        self.store = store
        self.locks = locks
        self.txid = txid
        self.held: set[str] = set()
        self.reads: dict[str, tuple[Any, int]] = {}
        self.write_buf: dict[str, Any] = {}

    def _acquire(self, key: str) -> None:
        owner = self.locks.owner.get(key)
        if owner is None:
            self.locks.owner[key] = self.txid
            self.held.add(key)
        elif owner != self.txid:
            raise _Conflict

    def read(self, key: str) -> Any:
        self._acquire(key)
        if key in self.write_buf:
            return self.write_buf[key]
        if key in self.reads:
            return self.reads[key][0]
        value, ver = self.store.get(key)
        self.reads[key] = (value, ver)
        return value

    def write(self, key: str, value: Any) -> None:
        self._acquire(key)
        self.write_buf[key] = value

    def finish(self, result: Any, txid: str) -> bool:
        self.store.commit(txid, self.reads, self.write_buf, result)
        self.release()
        return True

    def release(self) -> None:
        for key in self.held:
            if self.locks.owner.get(key) == self.txid:
                del self.locks.owner[key]
        self.held.clear()


def _drive(session, run: ProcRun, txid: str) -> tuple[bool, Any]:
    """Run one attempt to completion against a session.  Returns
    (validated, result); _Conflict propagates for no-wait aborts."""
    item = run.next_op()
    while item[0] != "done":
        if item[0] == "r":
            item = run.next_op(session.read(item[1]))
        else:
            session.write(item[1], item[2])
            item = run.next_op(None)
    return session.finish(item[1], txid), item[1]


def _run_engine(txs: Sequence[Transaction], snapshot: dict[str, int],
                make_session, *, workers: int, seed: int,
                threaded: bool, op_delay: float = 0.0) -> tuple[_Store, int]:
    store = _Store(snapshot)
    factory = lambda txid: make_session(store, txid)
    if threaded:
        aborts = _engine_threaded(list(txs), store, factory, workers, seed,
                                  op_delay)
    else:
        aborts = _engine_deterministic(list(txs), store, factory,
                                       workers, seed)
    assert len(store.order) == len(txs), "baseline engine lost transactions"
    return store, aborts


def _engine_deterministic(txs, store, make_session, workers, seed) -> int:
    rng = random.Random(seed)
    queue: deque[Transaction] = deque(txs)
    slots: dict[str, tuple[Transaction, ProcRun, Any, list]] = {}
    aborts = 0
    send: dict[str, Any] = {}

    while queue or slots:
        while queue and len(slots) < workers:
            tx = queue.popleft()
            slots[tx.digest] = (tx, ProcRun(tx), make_session(tx.digest), [])
            send[tx.digest] = None
        active = list(slots)
        txid = active[rng.randrange(len(active))]
        tx, run, session, _ = slots[txid]
        try:
            item = run.next_op(send.pop(txid, None))
            if item[0] == "r":
                send[txid] = session.read(item[1])
            elif item[0] == "w":
                session.write(item[1], item[2])
                send[txid] = None
            else:
                del slots[txid]
                if not session.finish(item[1], txid):
                    aborts += 1
                    queue.append(tx)
        except _Conflict:
            session.release()
            run.close()
            del slots[txid]
            aborts += 1
            queue.append(tx)
    return aborts


def _engine_threaded(txs, store, make_session, workers, seed,
                     op_delay: float = 0.0) -> int:
    lock = threading.Lock()
    queue: deque[Transaction] = deque(txs)
    stats = {"aborts": 0}
    total = len(txs)
    failures: list[BaseException] = []
    rngs = [random.Random(seed * 7919 + i) for i in range(workers)]

    def worker(wid: int) -> None:
        rng = rngs[wid]
        try:
            while True:
                with lock:
                    if len(store.order) >= total or failures:
                        return
                    tx = queue.popleft() if queue else None
                if tx is None:
                    time.sleep(0.0005)
                    continue
                run = ProcRun(tx)
                # store and lock-table mutations stay inside the lock; the
                # procedure body runs between ops without it
                try:
                    with lock:
                        session = make_session(tx.digest)
                    item = run.next_op()
                    while item[0] != "done":
                        with lock:
                            if item[0] == "r":
                                value = session.read(item[1])
                            else:
                                session.write(item[1], item[2])
                                value = None
                        item = run.next_op(value)
                        # pause per op (storage latency stand-in); a dict-only
                        # procedure otherwise finishes inside one interpreter
                        # slice and attempts never overlap
                        time.sleep(op_delay)
                    with lock:
                        ok = session.finish(item[1], tx.digest)
                        if not ok:
                            stats["aborts"] += 1
                            queue.append(tx)
                except _Conflict:
                    with lock:
                        session.release()
                        stats["aborts"] += 1
                        queue.append(tx)
                    run.close()
                    time.sleep(rng.random() * 0.001)
        except BaseException as exc:
            failures.append(exc)

    threads = [threading.Thread(target=worker, args=(i,), daemon=True)
               for i in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        raise failures[0]
    return stats["aborts"]


def _result(store: _Store, txs: Sequence[Transaction], batch_id: str,
            aborts: int) -> PreplayResult:
    return PreplayResult(
        batch_id=batch_id,
        order=tuple(store.order),
        txs=tuple(txs),
        reads=store.reads,
        writes=store.writes,
        results=store.results,
        snapshot_version="",
        reexec_count=aborts,
    )


def run_occ(txs: Sequence[Transaction], snapshot: dict[str, int], *,
            workers: int = 4, seed: int = 0, threaded: bool = False,
            op_delay: float = 0.0, batch_id: str = "occ") -> PreplayResult:
    store, aborts = _run_engine(
        txs, snapshot, lambda store, txid: _OccSession(store),
        workers=workers, seed=seed, threaded=threaded, op_delay=op_delay)
    return _result(store, txs, batch_id, aborts)


def run_tpl_nowait(txs: Sequence[Transaction], snapshot: dict[str, int], *,
                   workers: int = 4, seed: int = 0, threaded: bool = False,
                   op_delay: float = 0.0, batch_id: str = "tpl") -> PreplayResult:
    locks = _LockTable()
    store, aborts = _run_engine(
        txs, snapshot, lambda store, txid: _TplSession(store, locks, txid),
        workers=workers, seed=seed, threaded=threaded, op_delay=op_delay)
    return _result(store, txs, batch_id, aborts)
