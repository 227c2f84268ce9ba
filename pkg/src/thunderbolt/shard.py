"""Per-replica shard engine.

Owns everything between the network/DAG layer and the key-value state:

* proposal building: single-shard batches preplayed through the concurrent
  executor; cross-shard transactions ride in block payloads unexecuted; a
  proposer blocked by unfinalized cross-shard work converts its queued
  singles to cross-shard form, or (skip_recovery) holds them behind Skip
  blocks until the blockers finalize.
* speculative chain tracking: every delivered block extends its shard's
  uncommitted chain suffix, which supplies both the proposer's preplay
  snapshot and the validator's receipt-time view.
* validation: declared read/write sets re-executed through per-key ready
  queues; the authoritative verdict is a function of the block and its
  commit-position state, and a receipt-time verdict is reused only when a
  state-version check proves it was computed over that same state.
* commit application: per leader batch, validated single-shard results
  apply first, then cross-shard transactions execute deterministically; a
  cross transaction whose shards lack their previous-round proposal defers,
  together with those shards' later blocks, to the next leader.

Queued singles convert rather than preplay while any observed cross-shard
transaction touching this shard is unapplied: a preplay on state missing
that transaction's writes would be ordered after it at commit and fail
validation.
"""

from __future__ import annotations

from collections import ChainMap, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from .dag import CommitBatch
from .executor import ConcurrentExecutor
from .model import (
    Block,
    BlockKind,
    MalformedTransaction,
    PreplayResult,
    Transaction,
    TxClass,
    convert_to_cross,
    digest_of,
    run_procedure,
    sid_of_key,
)

VALID = "valid"
INVALID = "invalid"


class _Undeclared(Exception):
    pass


# -- validation ------------------------------------------------------------


def validate_preplay(result: PreplayResult, view, shard: Optional[int] = None,
                     n_shards: Optional[int] = None) -> str:
    """Deterministic verdict over a declared preplay schedule.

    Re-executes the declared order through per-key ready queues (a
    transaction runs once it heads the queue of every key it declares; one
    wave's members touch disjoint keys and could run in parallel) and
    compares every observed read, final write, result, and read source
    against the declaration.  Any divergence, undeclared access, or
    misrouted key is Invalid.
    """
    order = result.order
    declared = {t.digest: t for t in result.txs}
    if len(order) != len(result.txs) or set(order) != set(declared):
        return INVALID
    idx = {d: i for i, d in enumerate(order)}

    def keys_of(d: str) -> set[str]:
        return set(result.reads.get(d, {})) | set(result.writes.get(d, {}))

    queues: dict[str, deque[str]] = {}
    for d in order:
        for key in sorted(keys_of(d)):
            if shard is not None and n_shards is not None and \
                    sid_of_key(key, n_shards) != shard:
                return INVALID
            queues.setdefault(key, deque()).append(d)

    # the read source a correct declaration would name: the last declared
    # writer of the key before this transaction, or -1 for the snapshot
    expect_src: dict[str, dict[str, int]] = {}
    last_writer: dict[str, int] = {}
    for d in order:
        expect_src[d] = {k: last_writer.get(k, -1) for k in result.reads.get(d, {})}
        for key in result.writes.get(d, {}):
            last_writer[key] = idx[d]

    state: dict[str, Any] = {}
    done = 0
    while done < len(order):
        heads = {q[0] for q in queues.values() if q}
        ready = [d for d in heads if all(queues[k][0] == d for k in keys_of(d))]
        if not ready:
            return INVALID
        ready.sort(key=lambda d: idx[d])
        for d in ready:
            tx = declared[d]
            reads: dict[str, tuple[Any, int]] = {}
            writes: dict[str, Any] = {}
            allowed = keys_of(d)

            def do_read(key: str) -> Any:
                if key not in allowed:
                    raise _Undeclared
                if key in writes:
                    return writes[key]
                if key in reads:
                    return reads[key][0]
                value = state[key] if key in state else view.get(key, 0)
                reads[key] = (value, expect_src[d].get(key, -1))
                return value

            def do_write(key: str, value: Any) -> None:
                if key not in allowed:
                    raise _Undeclared
                writes[key] = value

            try:
                res = run_procedure(tx, do_read, do_write)
            except Exception:
                return INVALID
            if reads != result.reads.get(d, {}):
                return INVALID
            if writes != result.writes.get(d, {}):
                return INVALID
            if res != result.results.get(d):
                return INVALID
        for d in ready:
            for key in keys_of(d):
                queues[key].popleft()
            for key, value in result.writes.get(d, {}).items():
                state[key] = value
            done += 1
    return VALID


# -- cross-shard execution -------------------------------------------------


def execute_cross_batch(txs: Iterable[Transaction], state: dict[str, int],
                        n_shards: int) -> list[tuple[str, Any]]:
    """Execute committed cross-shard transactions in order.

    Per-shard FIFO queues: a transaction runs once it heads the queue of
    every shard it touches; one wave's members touch disjoint shards, hence
    disjoint keys, so the outcome equals serial execution in the given
    order.  Mutates state; returns (digest, result) pairs in execution
    order.
    """
    txs = list(txs)
    by_digest = {tx.digest: tx for tx in txs}
    pos = {tx.digest: i for i, tx in enumerate(txs)}
    queues: dict[int, deque[str]] = {}
    for tx in txs:
        for s in sorted(tx.sids):
            queues.setdefault(s, deque()).append(tx.digest)
    results: list[tuple[str, Any]] = []
    remaining = set(by_digest)
    while remaining:
        heads = {q[0] for q in queues.values() if q}
        ready = [d for d in heads
                 if all(queues[s][0] == d for s in by_digest[d].sids)]
        if not ready:
            raise AssertionError("cross-shard queues wedged")
        ready.sort(key=lambda d: pos[d])
        for d in ready:
            tx = by_digest[d]
            writes: dict[str, int] = {}

            def do_read(key: str) -> int:
                if sid_of_key(key, n_shards) not in tx.sids:
                    raise MalformedTransaction(
                        f"tx {tx.digest[:8]} touches key {key} outside its shards")
                if key in writes:
                    return writes[key]
                return state.get(key, 0)

            def do_write(key: str, value: int) -> None:
                if sid_of_key(key, n_shards) not in tx.sids:
                    raise MalformedTransaction(
                        f"tx {tx.digest[:8]} touches key {key} outside its shards")
                writes[key] = value

            res = run_procedure(tx, do_read, do_write)
            state.update(writes)
            results.append((d, res))
            for s in tx.sids:
                queues[s].popleft()
            remaining.discard(d)
    return results


# -- engine ----------------------------------------------------------------


@dataclass
class EngineConfig:
    n: int
    f: int
    workers: int = 4
    batch_size: int = 100
    max_aborts: int = 10
    skip_recovery: bool = False
    threaded: bool = False


@dataclass
class Applied:
    """One transaction leaving the pipeline at commit application."""

    tx: Transaction
    kind: str  # "single" | "cross"


@dataclass
class CommitOutcome:
    applied: list[Applied] = field(default_factory=list)
    discarded: list[Transaction] = field(default_factory=list)
    validations: int = 0  # verdicts computed at commit (cache misses)
    executed_cross: int = 0
    reused_verdicts: int = 0


class ShardEngine:
    """Transaction-processing half of one replica for one shard role."""

    def __init__(self, cfg: EngineConfig, shard: Optional[int],
                 state: Optional[dict[str, int]] = None):
        self.cfg = cfg
        self.shard = shard  # None while this replica proposes for no shard
        self.state: dict[str, int] = dict(state or {})
        self.executor = ConcurrentExecutor(
            workers=cfg.workers, max_aborts=cfg.max_aborts,
            threaded=cfg.threaded)
        self.singles: deque[Transaction] = deque()
        self.crosses: deque[Transaction] = deque()
        self.applied_ids: set[str] = set()
        self.in_flight: dict[str, Transaction] = {}
        self.exec_log: list[str] = []
        self.events: list[str] = []
        self.reexec_total = 0
        self.preplayed_batches = 0
        self.skipping = False
        self.dag = 0
        self._reset_dag_state()

    def _reset_dag_state(self) -> None:
        # per-shard uncommitted chain suffixes and bookkeeping, all scoped
        # to the current DAG instance
        self.suffix: dict[int, list[tuple[int, str, Optional[PreplayResult]]]] = {}
        self.spec_writes: dict[int, dict[str, int]] = {}
        self.cross_epoch: dict[int, int] = {}
        self.invalid_count: dict[int, int] = {}
        self.committed_rounds: dict[int, set[int]] = {}
        self.pending_cross: dict[str, Transaction] = {}
        self.deferred: list[tuple[str, Any]] = []
        self.verdict_cache: dict[tuple[str, str], str] = {}
        self.chain_prev: dict[str, str] = {}
        self.delivered_tails: dict[int, str] = {}

    # -- client intake -----------------------------------------------------

    def submit(self, tx: Transaction) -> bool:
        """Queue a client transaction for proposing; duplicates of applied
        or in-flight transactions are dropped."""
        d = tx.digest
        if d in self.applied_ids or d in self.in_flight:
            return False
        queue = self.crosses if tx.klass is TxClass.CROSS else self.singles
        if any(t.digest == d for t in queue):
            return False
        queue.append(tx)
        return True

    def queue_depth(self) -> int:
        return len(self.singles) + len(self.crosses)

    # -- speculative chains ------------------------------------------------

    def _genesis(self, sid: int) -> str:
        return f"genesis/{self.dag}/{sid}"

    def chain_tail(self, sid: int) -> str:
        return self.delivered_tails.get(sid, self._genesis(sid))

    def state_version(self, sid: int, round: int, tail: str) -> str:
        return digest_of(self.dag, sid, round, tail,
                         self.cross_epoch.get(sid, 0),
                         self.invalid_count.get(sid, 0))

    def shard_view(self, sid: int):
        return ChainMap(self.spec_writes.setdefault(sid, {}), self.state)

    def deliver_block(self, block: Block, sid: Optional[int]) -> None:
        """Track a delivered block on its shard's chain and absorb any
        cross-shard payload into the pending set."""
        for tx in block.cross:
            if tx.digest not in self.applied_ids:
                self.pending_cross.setdefault(tx.digest, tx)
        if sid is None or block.digest in self.chain_prev:
            return
        self.chain_prev[block.digest] = self.chain_tail(sid)
        self.delivered_tails[sid] = block.digest
        self.suffix.setdefault(sid, []).append(
            (block.round, block.digest, block.single))
        if block.single is not None:
            merged = self.spec_writes.setdefault(sid, {})
            for d in block.single.order:
                merged.update(block.single.writes.get(d, {}))

    def receipt_validate(self, block: Block, sid: int) -> Optional[str]:
        """Validate a Normal block against the local speculative chain when
        the declared snapshot version matches the local one; the verdict is
        cached under that version so commit can reuse it only while it
        still describes the block's commit-position state."""
        if block.single is None or block.digest not in self.chain_prev:
            return None
        version = self.state_version(sid, block.round,
                                     self.chain_prev[block.digest])
        if block.single.snapshot_version != version:
            return None
        view = ChainMap(self._suffix_writes_before(sid, block.digest), self.state)
        verdict = validate_preplay(block.single, view, sid, self.cfg.n)
        self.verdict_cache[(block.digest, version)] = verdict
        return verdict

    def _suffix_writes_before(self, sid: int, digest: str) -> dict[str, int]:
        merged: dict[str, int] = {}
        for _, d, pre in self.suffix.get(sid, []):
            if d == digest:
                break
            if pre is not None:
                for t in pre.order:
                    merged.update(pre.writes.get(t, {}))
        return merged

    def _rebuild_spec_writes(self, sid: int) -> None:
        merged: dict[str, int] = {}
        for _, _, pre in self.suffix.get(sid, []):
            if pre is not None:
                for t in pre.order:
                    merged.update(pre.writes.get(t, {}))
        self.spec_writes[sid] = merged

    # -- proposing ---------------------------------------------------------

    def blocking_crosses(self) -> list[Transaction]:
        """Observed, not yet applied cross transactions touching this
        shard; while any exist, preplaying would race their execution."""
        if self.shard is None:
            return []
        return [tx for tx in self.pending_cross.values()
                if self.shard in tx.sids]

    def recover_preplay(self) -> bool:
        """True when every blocking cross transaction has been applied and
        preplay may resume."""
        return not self.blocking_crosses()

    def build_proposal(self, round: int, parents: tuple[str, ...], *,
                       leader_seen: bool = True, timed_out: bool = False,
                       shift: bool = False) -> Block:
        if shift:
            return Block(self._me(), round, self.dag, BlockKind.SHIFT, parents)
        cross_payload = list(self.crosses)
        self.crosses.clear()
        blocking = self.blocking_crosses()
        converted: list[Transaction] = []
        single: Optional[PreplayResult] = None

        if round % 2 == 1 and not leader_seen and timed_out and self.singles:
            converted = self._convert_queue("p6")
        elif blocking:
            if self.cfg.skip_recovery:
                if not self.skipping:
                    self.skipping = True
                    self.events.append(
                        f"SKIP round={round} blocked_by={len(blocking)}")
            elif self.singles:
                converted = self._convert_queue("conflict")
        else:
            if self.skipping:
                self.skipping = False
                self.events.append(f"RESUME round={round}")
            single = self._preplay(round)

        cross_payload.extend(converted)
        for tx in cross_payload:
            # once proposed, an own cross tx touching this shard blocks
            # later preplays exactly like a remote one
            self.pending_cross.setdefault(tx.digest, tx)
            self.in_flight[tx.digest] = tx
        if single is not None:
            for tx in single.txs:
                self.in_flight[tx.digest] = tx

        if single is not None:
            kind = BlockKind.NORMAL
        elif cross_payload:
            kind = BlockKind.CROSS_ONLY
        elif blocking and self.cfg.skip_recovery:
            kind = BlockKind.SKIP
        else:
            kind = BlockKind.NORMAL  # empty keepalive
        return Block(self._me(), round, self.dag, kind, parents,
                     single=single, cross=tuple(cross_payload))

    def _me(self) -> int:
        if self.shard is None:
            raise ValueError("replica without a shard cannot propose")
        return self.shard

    def _convert_queue(self, rule: str) -> list[Transaction]:
        out = []
        while self.singles:
            tx = self.singles.popleft()
            self.events.append(f"CONVERT tx={tx.digest[:8]} rule={rule}")
            out.append(convert_to_cross(tx, rule))
        return out

    def _preplay(self, round: int) -> Optional[PreplayResult]:
        batch: list[Transaction] = []
        while self.singles and len(batch) < self.cfg.batch_size:
            tx = self.singles.popleft()
            if tx.digest in self.applied_ids or tx.digest in self.in_flight:
                continue
            batch.append(tx)
        if not batch:
            return None
        sid = self._me()
        version = self.state_version(sid, round, self.chain_tail(sid))
        batch_id = f"d{self.dag}/s{sid}/r{round}"
        result = self.executor.preplay_batch(
            batch, self.shard_view(sid), batch_id=batch_id,
            seed=_seed_of(batch_id), snapshot_version=version,
            shard=sid, n_shards=self.cfg.n)
        self.reexec_total += result.reexec_count
        self.preplayed_batches += 1
        return result

    # -- commit application ------------------------------------------------

    def commit_apply(self, batches: list[CommitBatch],
                     blocks: dict[str, Block],
                     shard_of: Callable[[Block], Optional[int]]) -> CommitOutcome:
        out = CommitOutcome()
        for batch in batches:
            self._apply_batch(batch, blocks, shard_of, out)
        return out

    def _apply_batch(self, batch: CommitBatch, blocks: dict[str, Block],
                     shard_of, out: CommitOutcome) -> None:
        leader_round = batch.round
        history = [blocks[d] for d in batch.history]
        touched: set[int] = set()
        for block in history:
            sid = shard_of(block)
            if sid is None:
                continue
            self.committed_rounds.setdefault(sid, set()).add(block.round)
            suffix = self.suffix.get(sid, [])
            if suffix and suffix[0][1] == block.digest:
                suffix.pop(0)
                touched.add(sid)

        items: list[tuple[str, Any]] = list(self.deferred)
        self.deferred = []
        for block in history:
            if block.kind is BlockKind.NORMAL and block.single is not None:
                items.append(("block", block))
        for block in history:
            for tx in block.cross:
                items.append(("cross", tx))

        blocked: set[int] = set()
        queued: set[str] = set()  # batched for execution in this pass
        run: list[Transaction] = []

        def flush() -> None:
            if not run:
                return
            for d, res in execute_cross_batch(run, self.state, self.cfg.n):
                tx = next(t for t in run if t.digest == d)
                self.exec_log.append(
                    f"EXEC tx={d[:8]} sids={','.join(map(str, sorted(tx.sids)))}")
                self.applied_ids.add(d)
                self.pending_cross.pop(d, None)
                self.in_flight.pop(d, None)
                out.applied.append(Applied(tx, "cross"))
                out.executed_cross += 1
                for s in tx.sids:
                    self.cross_epoch[s] = self.cross_epoch.get(s, 0) + 1
            run.clear()

        for kind, payload in items:
            if kind == "block":
                block: Block = payload
                sid = shard_of(block)
                if sid in blocked:
                    self.deferred.append((kind, payload))
                    self.exec_log.append(
                        f"HOLD shard={sid} round={block.round} "
                        f"block={block.digest[:8]}")
                    continue
                flush()
                self._apply_single_block(block, sid, out)
                touched.add(sid)
            else:
                tx: Transaction = payload
                if tx.digest in self.applied_ids or tx.digest in queued:
                    self.pending_cross.pop(tx.digest, None)
                    self.in_flight.pop(tx.digest, None)
                    self.exec_log.append(f"DUP tx={tx.digest[:8]}")
                    continue
                if blocked & tx.sids:
                    self.deferred.append((kind, tx))
                    continue
                if self._cross_ready(tx, leader_round):
                    run.append(tx)
                    queued.add(tx.digest)
                else:
                    self.deferred.append((kind, tx))
                    self.exec_log.append(
                        f"DEFER tx={tx.digest[:8]} leader_round={leader_round}")
                    blocked.update(tx.sids)
        flush()
        for sid in touched:
            self._rebuild_spec_writes(sid)
        self.exec_log.append(f"STATE round={leader_round} "
                             f"digest={state_digest(self.state)[:16]}")

    def _cross_ready(self, tx: Transaction, leader_round: int) -> bool:
        """A cross transaction executes under the leader of round r only
        when every shard it touches has a committed round r-1 proposal."""
        if leader_round == 0:
            return True
        return all(leader_round - 1 in self.committed_rounds.get(s, ())
                   for s in tx.sids)

    def _apply_single_block(self, block: Block, sid: int,
                            out: CommitOutcome) -> None:
        pre = block.single
        # commit-position chain tail equals the delivered predecessor, so
        # the receipt-time verdict key matches exactly when nothing (cross
        # executions, discards) touched this shard in between
        tail = self.chain_prev.get(block.digest, self._genesis(sid))
        version = self.state_version(sid, block.round, tail)
        verdict = self.verdict_cache.get((block.digest, version))
        if verdict is None:
            verdict = validate_preplay(pre, self.state, sid, self.cfg.n)
            out.validations += 1
        else:
            out.reused_verdicts += 1
        self.exec_log.append(
            f"VERDICT shard={sid} round={block.round} "
            f"block={block.digest[:8]} {verdict}")
        if verdict == INVALID:
            self.invalid_count[sid] = self.invalid_count.get(sid, 0) + 1
            for tx in pre.txs:
                self.in_flight.pop(tx.digest, None)
                out.discarded.append(tx)
            return
        for d in pre.order:
            if d in self.applied_ids:
                # retransmitted and re-proposed in a later DAG before this
                # replica learned of the first commit; apply at most once
                self.in_flight.pop(d, None)
                self.exec_log.append(f"DUP tx={d[:8]}")
                continue
            for key, value in pre.writes.get(d, {}).items():
                self.state[key] = value
            self.applied_ids.add(d)
            self.in_flight.pop(d, None)
            self.exec_log.append(f"APPLY tx={d[:8]} shard={sid}")
            out.applied.append(Applied(pre.tx_by_digest(d), "single"))

    # -- reconfiguration hooks --------------------------------------------

    def discard_for_transition(self) -> list[Transaction]:
        """Drop everything uncommitted in the old DAG; affected clients
        must retransmit."""
        lost = list(self.in_flight.values())
        self.in_flight.clear()
        return lost

    def start_new_dag(self, dag: int, shard: Optional[int]) -> None:
        self.dag = dag
        self.shard = shard
        self.skipping = False
        self._reset_dag_state()


def state_digest(state: dict[str, int]) -> str:
    return digest_of(sorted(state.items()))


def _seed_of(batch_id: str) -> int:
    return int(digest_of(batch_id)[:8], 16)
