"""One replica's event-driven state machine.

Glues together the DAG store (block/vote/certificate bookkeeping and the
leader commit rule), the shard engine (preplay, validation, commit
application), and the reconfiguration tracker.  The surrounding harness
owns time and the network: it injects an `env` providing now/send/
broadcast/schedule/busy plus client notification, and delivers messages
by calling the on_* handlers.  All handler logic is synchronous and
deterministic; any real parallelism stays inside the engine.

Round flow: a replica proposes its round-r block, votes for every
delivered block, and advances to r+1 once 2f+1 round-r certificates are
held including its own (a replica that skipped proposing advances on the
quorum alone).  At odd rounds a non-leader proposer waits for the
leader's block before preplaying; if the wait exceeds the round timeout
it proposes anyway and the engine converts its queued singles.

Messages are triples ("block", Block) / ("vote", dag, digest, voter) /
("cert", Certificate).  Blocks and certificates that arrive before their
prerequisites buffer and retry after every successful insertion;
messages for a future DAG instance buffer until the local transition.
"""

from __future__ import annotations

import time
from collections import deque
from typing import Any, Optional

from .dag import DagStore
from .model import Block, BlockKind, PreplayResult, ShardAssignment, Transaction
from .reconfig import ShiftConfig, ShiftTracker
from .model import run_procedure
from .shard import EngineConfig, ShardEngine, state_digest

PROTO_THUNDERBOLT = "thunderbolt"
PROTO_TUSK_SERIAL = "tusk-serial"


class ReplicaNode:
    def __init__(self, rid: int, cfg: Any, env: Any, state: dict[str, int]):
        self.rid = rid
        self.cfg = cfg
        self.env = env
        self.assignment = ShardAssignment.initial(cfg.n)
        self.dag_id = 0
        # adversary knobs, set by the harness; an unset node is honest
        self.crashed = False
        self.halt_round: Optional[int] = None
        self.halt_dag: Optional[int] = None
        self.halt_recipients: Optional[set[int]] = None
        self.tamper = False
        self.censor: Optional[Any] = None  # predicate over Transaction

        ecfg = EngineConfig(
            n=cfg.n, f=cfg.f, workers=cfg.workers, batch_size=cfg.batch_size,
            max_aborts=cfg.max_aborts, skip_recovery=cfg.skip_recovery,
            threaded=cfg.bench)
        self.engine = ShardEngine(ecfg, self._my_slot(), state)
        self.state = self.engine.state
        self.events = self.engine.events  # one chronological replica log
        self.committed_blocks: list[str] = []
        self.applied_log: list[tuple[str, str]] = []  # (tx digest, kind)
        self.serial_queue: deque[Transaction] = deque()
        self.future: dict[int, list[Any]] = {}
        self.reexec_serial = 0
        self._init_dag_structs()

    def _my_slot(self) -> Optional[int]:
        return self.assignment.shard_of_replica(self.rid)

    def _init_dag_structs(self) -> None:
        self.dag = DagStore(self.cfg.n, self.cfg.f, dag=self.dag_id,
                            leader_offset=self.cfg.leader_offset)
        self.tracker = ShiftTracker(
            ShiftConfig(n=self.cfg.n, f=self.cfg.f, k=self.cfg.k,
                        k_rotate=self.cfg.k_rotate),
            self._my_slot())
        self.round = 0
        self.proposed_round = -1
        self.waiting_leader: Optional[int] = None
        self.delivered: set[tuple[int, int, int]] = set()  # (dag, round, slot)
        self.seen_digests: set[str] = set()
        self.voted: set[tuple[int, int, int]] = set()
        self.pending_blocks: list[Block] = []
        self.pending_certs: list[Any] = []

    # -- harness entry points ----------------------------------------------

    def start(self) -> None:
        self._enter_round(0)

    def on_message(self, msg: tuple) -> None:
        if self.crashed:
            return
        kind = msg[0]
        if kind == "block":
            self._on_block(msg[1])
        elif kind == "vote":
            self._on_vote(msg[1], msg[2], msg[3])
        elif kind == "cert":
            self._on_cert(msg[1])
        else:
            raise ValueError(f"unknown message kind {kind!r}")

    def on_submit(self, tx: Transaction) -> None:
        """Client submission routed to this replica."""
        if self.crashed:
            return
        if self.censor is not None and self.censor(tx):
            return
        if self.cfg.protocol == PROTO_TUSK_SERIAL:
            if tx.digest not in self.engine.applied_ids and \
                    all(t.digest != tx.digest for t in self.serial_queue):
                self.serial_queue.append(tx)
        elif min(tx.sids) == self._my_slot():
            # a submission routed under a stale assignment is dropped; the
            # client retries against the rotated one
            self.engine.submit(tx)

    # -- round progression -------------------------------------------------

    def _enter_round(self, r: int) -> None:
        self.round = r
        if self.cfg.protocol == PROTO_TUSK_SERIAL:
            self._propose(r, leader_seen=True)
            return
        leader = self.dag.leader_of(r)
        if leader is None or leader == self._my_slot():
            self._propose(r, leader_seen=True)
        elif (self.dag_id, r, leader) in self.delivered:
            self._propose(r, leader_seen=True)
        else:
            self.waiting_leader = r
            dag_at_arm = self.dag_id
            self.env.schedule(self.cfg.delta_round,
                              lambda: self._leader_timeout(dag_at_arm, r))

    def _leader_timeout(self, dag_at_arm: int, r: int) -> None:
        if self.crashed or dag_at_arm != self.dag_id:
            return
        if self.waiting_leader == r and self.proposed_round < r:
            self.waiting_leader = None
            self._propose(r, leader_seen=False, timed_out=True)

    def _suppressed(self, r: int) -> bool:
        """A halted proposer stops proposing for good after its halt point."""
        if self.halt_round is None:
            return False
        hd = self.halt_dag or 0
        return (self.dag_id, r) > (hd, self.halt_round)

    def _propose(self, r: int, *, leader_seen: bool,
                 timed_out: bool = False) -> None:
        if self.proposed_round >= r or self._suppressed(r):
            return
        parents = () if r == 0 else tuple(self.dag.parent_candidates(r))
        ready = self.env.now()
        if self.cfg.protocol == PROTO_TUSK_SERIAL:
            block = self._build_serial_block(r, parents)
        else:
            reason = self.tracker.shift_reason(r)
            started = time.perf_counter()
            block = self.engine.build_proposal(
                r, parents, leader_seen=leader_seen, timed_out=timed_out,
                shift=reason is not None)
            if block.single is not None:
                if self.cfg.bench:
                    ready = self.env.exec_busy(time.perf_counter() - started)
                else:
                    cost = self.cfg.costs.preplay_per_tx
                    ready = self.env.exec_busy(cost * len(block.single.order))
            if reason is not None:
                self.events.append(f"SHIFT round={r} reason={reason}")
            if self.tamper and block.single is not None:
                block = _tampered(block)
        self.tracker.note_own_proposal(block)
        self.proposed_round = r
        self.events.append(
            f"PROPOSE dag={self.dag_id} round={r} kind={block.kind.value}")
        self._on_block(block)  # local delivery without network hop
        self.dag.record_vote(block.digest, self.rid)
        recipients = None
        if self.halt_round is not None and r == self.halt_round and \
                self.dag_id == (self.halt_dag or 0):
            recipients = self.halt_recipients
        # the block leaves this replica once its payload finishes preplay
        self.env.schedule(
            ready - self.env.now(),
            lambda: self.env.broadcast(self.rid, ("block", block), recipients))

    def _build_serial_block(self, r: int, parents: tuple[str, ...]) -> Block:
        batch: list[Transaction] = []
        while self.serial_queue and len(batch) < self.cfg.batch_size:
            tx = self.serial_queue.popleft()
            if tx.digest not in self.engine.applied_ids:
                batch.append(tx)
        kind = BlockKind.CROSS_ONLY if batch else BlockKind.NORMAL
        return Block(self._my_slot(), r, self.dag_id, kind, parents,
                     cross=tuple(batch))

    def _maybe_advance(self) -> None:
        while True:
            r = self.round
            certs = self.dag.certified_round(r)
            if len(certs) < self.dag.quorum():
                return
            if self.proposed_round >= r:
                if self._my_slot() not in certs:
                    return
            elif not self._suppressed(r):
                return  # still owe this round a proposal
            self._enter_round(r + 1)
            if self.round != r + 1:  # transitioned mid-flight
                return

    # -- message handlers --------------------------------------------------

    def _route(self, msg: tuple, dag: int) -> bool:
        """True when msg belongs to the current DAG; buffers future ones."""
        if dag == self.dag_id:
            return True
        if dag > self.dag_id:
            self.future.setdefault(dag, []).append(msg)
        return False

    def _on_block(self, block: Block) -> None:
        if not self._route(("block", block), block.dag):
            return
        if block.digest in self.seen_digests:
            return
        self.seen_digests.add(block.digest)
        self.delivered.add((block.dag, block.round, block.proposer))
        self.tracker.observe_block(block)
        if self.cfg.protocol == PROTO_THUNDERBOLT:
            self.engine.deliver_block(block, block.proposer)
            if block.single is not None:
                started = time.perf_counter()
                self.engine.receipt_validate(block, block.proposer)
                if self.cfg.bench:
                    self.env.exec_busy(time.perf_counter() - started)
                # protocol mode: receipt validation is executor work with
                # slack before the commit arrives; left uncharged
        key = (block.dag, block.round, block.proposer)
        if key not in self.voted:
            self.voted.add(key)
            target = self.assignment.proposer_of[block.proposer]
            if target != self.rid:
                self.env.send(self.rid, target,
                              ("vote", block.dag, block.digest, self.rid))
        try:
            self.dag.add_block(block)
        except ValueError:
            self.pending_blocks.append(block)
        else:
            self._after_insert()
        if self.waiting_leader is not None and \
                block.round == self.waiting_leader and \
                block.proposer == self.dag.leader_of(self.waiting_leader):
            r = self.waiting_leader
            self.waiting_leader = None
            self._propose(r, leader_seen=True)

    def _on_vote(self, dag: int, digest: str, voter: int) -> None:
        if not self._route(("vote", dag, digest, voter), dag):
            return
        if digest not in self.dag.blocks:
            return  # vote for a block this proposer never issued
        cert = self.dag.record_vote(digest, voter)
        if cert is not None:
            self.env.broadcast(self.rid, ("cert", cert), None)
            self._after_insert()

    def _on_cert(self, cert) -> None:
        if not self._route(("cert", cert), cert.dag):
            return
        try:
            changed = self.dag.add_certificate(cert)
        except ValueError:
            self.pending_certs.append(cert)
            return
        if changed:
            self._after_insert()

    def _after_insert(self) -> None:
        self._drain_pending()
        self._process_commits()
        self._maybe_advance()

    def _drain_pending(self) -> None:
        progressed = True
        while progressed:
            progressed = False
            for block in list(self.pending_blocks):
                try:
                    self.dag.add_block(block)
                except ValueError:
                    continue
                self.pending_blocks.remove(block)
                progressed = True
            for cert in list(self.pending_certs):
                try:
                    self.dag.add_certificate(cert)
                except ValueError:
                    continue
                self.pending_certs.remove(cert)
                progressed = True

    # -- commit processing -------------------------------------------------

    def _process_commits(self) -> None:
        batches = self.dag.try_commit()
        for batch in batches:
            # dag/round/proposer prefix so consumers can audit per-proposer
            # round order without keeping every retired DagStore alive
            self.committed_blocks.extend(
                f"{self.dag_id}/{self.dag.blocks[d].round}"
                f"/{self.dag.blocks[d].proposer}/{d}"
                for d in batch.history)
            if self.cfg.protocol == PROTO_TUSK_SERIAL:
                self._apply_serial(batch)
            else:
                self._apply_thunderbolt(batch)
            blocks = (self.dag.blocks[d] for d in batch.history)
            ending = self.tracker.note_committed(batch.round, blocks)
            if ending is not None and self.cfg.protocol == PROTO_THUNDERBOLT:
                self._transition(ending)
                return  # later old-DAG batches are abandoned

    def _apply_thunderbolt(self, batch) -> None:
        started = time.perf_counter()
        out = self.engine.commit_apply([batch], self.dag.blocks,
                                       lambda b: b.proposer)
        if self.cfg.bench:
            ready = self.env.exec_busy(time.perf_counter() - started)
        else:
            costs = self.cfg.costs
            singles = sum(1 for a in out.applied if a.kind == "single")
            ready = self.env.exec_busy(
                costs.apply_per_tx * singles +
                costs.exec_per_tx * out.executed_cross +
                costs.validate_per_block * out.validations)
        digests = [a.tx.digest for a in out.applied]
        for a in out.applied:
            self.applied_log.append((a.tx.digest, a.kind))
        self.env.schedule(ready - self.env.now(),
                          lambda: self._notify_applied(digests))

    def _apply_serial(self, batch) -> None:
        applied: list[str] = []
        started = time.perf_counter()
        for digest in batch.history:
            for tx in self.dag.blocks[digest].cross:
                if tx.digest in self.engine.applied_ids:
                    continue
                run_procedure(tx, lambda k: self.state.get(k, 0),
                              self.state.__setitem__)
                self.engine.applied_ids.add(tx.digest)
                self.applied_log.append((tx.digest, "serial"))
                applied.append(tx.digest)
        self.reexec_serial += len(applied)
        if self.cfg.bench:
            ready = self.env.exec_busy(time.perf_counter() - started)
        else:
            ready = self.env.exec_busy(
                self.cfg.costs.exec_per_tx * len(applied))
        self.env.schedule(ready - self.env.now(),
                          lambda: self._notify_applied(applied))

    def _notify_applied(self, digests: list[str]) -> None:
        for d in digests:
            self.env.tx_applied(self.rid, d)

    # -- reconfiguration ---------------------------------------------------

    def _transition(self, ending_round: int) -> None:
        self.events.append(f"ENDING round={ending_round}")
        self.engine.discard_for_transition()
        self.engine.singles.clear()
        self.engine.crosses.clear()
        self.assignment = self.assignment.rotated(self.cfg.n)
        self.dag_id += 1
        self.engine.start_new_dag(self.dag_id, self._my_slot())
        self._init_dag_structs()
        self.events.append(
            f"NEWDAG id={self.dag_id} assignment={self.assignment.as_text()}")
        backlog = self.future.pop(self.dag_id, [])
        self._enter_round(0)
        for msg in backlog:
            self.on_message(msg)

    # -- reporting ---------------------------------------------------------

    def reexec_total(self) -> int:
        if self.cfg.protocol == PROTO_TUSK_SERIAL:
            return self.reexec_serial
        return self.engine.reexec_total

    def snapshot(self) -> dict[str, Any]:
        return {
            "rid": self.rid,
            "dag": self.dag_id,
            "round": self.round,
            "committed_blocks": list(self.committed_blocks),
            "applied": [d for d, _ in self.applied_log],
            "events": list(self.events),
            "state_digest": state_digest(self.state),
            "reexec": self.reexec_total(),
        }


def _tampered(block: Block) -> Block:
    """Corrupt one declared write in the preplay payload; receivers must
    judge the block Invalid."""
    pre = block.single
    writes = {d: dict(m) for d, m in pre.writes.items()}
    for d in pre.order:
        if writes.get(d):
            key = sorted(writes[d])[0]
            writes[d][key] += 1
            break
    else:
        return block
    bad = PreplayResult(
        batch_id=pre.batch_id, order=pre.order, txs=pre.txs,
        reads={d: dict(m) for d, m in pre.reads.items()}, writes=writes,
        results=dict(pre.results), snapshot_version=pre.snapshot_version,
        reexec_count=pre.reexec_count)
    return Block(block.proposer, block.round, block.dag, block.kind,
                 block.parents, single=bad, cross=block.cross)
