"""Core domain model: keys, shards, transactions, procedures, blocks.

Everything downstream (concurrency controller, DAG layer, shard engine,
harness) builds on the types here.  The model is deliberately plain: frozen
dataclasses, content-addressed digests, and a small registry of named
transaction procedures.  A procedure is a deterministic generator over
read/write requests, so the same definition can be driven by the preplay
executor, the OCC / 2PL baselines, the serial replay oracle, and block
validation without divergence.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Iterator, Optional

ReplicaId = int
ShardId = int
Round = int
DagId = int

# Sentinel returned by controller operations issued on behalf of an aborted
# transaction.  It is a normal return value, not an error.
ABORTED = "ABORTED"

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


class MalformedTransaction(ValueError):
    """Transaction whose declared shard set is empty or inconsistent."""


class MisroutedTransaction(ValueError):
    """Single-shard transaction handed to a proposer that does not own it."""


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a.  Non-cryptographic, stable across runs and platforms;
    used only to map keys onto shards."""
    h = FNV64_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def assign_shard(key: str, n_shards: int) -> ShardId:
    """Deterministic key -> shard id mapping: fnv1a64(key) mod n."""
    if n_shards <= 0:
        raise ValueError("n_shards must be positive")
    return fnv1a64(key.encode("utf-8")) % n_shards


def sid_of_key(key: str, n_shards: int) -> ShardId:
    """Shard of a storage key.  Keys are grouped by the account prefix in
    front of the first '/', so all fields of one account live on one shard."""
    return assign_shard(key.split("/", 1)[0], n_shards)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def digest_of(*parts: Any) -> str:
    return hashlib.sha256(canonical_json(parts).encode("utf-8")).hexdigest()


class TxClass(str, Enum):
    SINGLE = "single"
    CROSS = "cross"


class BlockKind(str, Enum):
    NORMAL = "normal"
    CROSS_ONLY = "cross_only"
    SKIP = "skip"
    SHIFT = "shift"


@dataclass(frozen=True)
class Operation:
    kind: str  # "R" | "W"
    key: str
    value: Optional[int] = None


@dataclass(frozen=True)
class Procedure:
    """A named deterministic program with bound arguments."""

    name: str
    args: tuple = ()


ProcFn = Callable[..., Iterator]
PROCEDURES: dict[str, ProcFn] = {}


def procedure(name: str) -> Callable[[ProcFn], ProcFn]:
    def register(fn: ProcFn) -> ProcFn:
        PROCEDURES[name] = fn
        return fn

    return register


@procedure("script")
def _script(ops: tuple):
    """Straight-line op list, used by tests and the fuzzer.

    Each element is ("r", key), ("w", key, value) or ("rmw", key, delta);
    rmw reads the key and writes back value+delta.  Returns the tuple of
    values read, so the result captures what the execution observed.
    """
    seen = []
    for op in ops:
        if op[0] == "r":
            seen.append((yield ("r", op[1])))
        elif op[0] == "w":
            yield ("w", op[1], op[2])
        elif op[0] == "rmw":
            v = yield ("r", op[1])
            seen.append(v)
            yield ("w", op[1], v + op[2])
        else:
            raise ValueError(f"unknown script op {op!r}")
    return tuple(seen)


class ProcRun:
    """Stepwise driver for one execution attempt of a transaction.

    next_op() yields ("r", key) and ("w", key, value) requests one at a
    time; the caller feeds read results back in.  ("done", result) marks
    completion.  Keeping the generator protocol explicit lets the
    deterministic scheduler interleave many attempts one operation at a
    time."""

    def __init__(self, tx: "Transaction"):
        self.tx = tx
        fn = PROCEDURES.get(tx.proc.name)
        if fn is None:
            raise MalformedTransaction(f"unknown procedure {tx.proc.name!r}")
        self._gen = fn(*tx.proc.args) if tx.proc.args else fn()
        self._started = False

    def next_op(self, sent: Any = None):
        try:
            if not self._started:
                self._started = True
                item = next(self._gen)
            else:
                item = self._gen.send(sent)
        except StopIteration as stop:
            return ("done", stop.value)
        return item

    def close(self) -> None:
        self._gen.close()


def run_procedure(tx: "Transaction", read: Callable[[str], int],
                  write: Callable[[str, int], None]) -> Any:
    """Drive a procedure to completion with read/write callbacks."""
    run = ProcRun(tx)
    item = run.next_op()
    while item[0] != "done":
        if item[0] == "r":
            item = run.next_op(read(item[1]))
        else:
            write(item[1], item[2])
            item = run.next_op(None)
    return item[1]


@dataclass(frozen=True)
class Transaction:
    """Client transaction.  The digest is derived from (client, seq,
    procedure) only, so retransmissions and cross-shard conversion keep the
    same identity."""

    client: str
    seq: int
    proc: Procedure
    sids: frozenset[ShardId]
    klass: TxClass
    submit_time: float = 0.0
    converted: Optional[str] = None  # conversion rule tag, e.g. "P3"

    @property
    def digest(self) -> str:
        return digest_of(self.client, self.seq, self.proc.name, self.proc.args)

    def __repr__(self) -> str:  # short form keeps logs readable
        return f"Tx({self.client}:{self.seq} {self.proc.name} {self.klass.value})"


def make_tx(client: str, seq: int, proc: Procedure, sids, submit_time: float = 0.0) -> Transaction:
    sids = frozenset(sids)
    return Transaction(client, seq, proc, sids, classify_sids(sids), submit_time)


def classify_sids(sids: frozenset[ShardId]) -> TxClass:
    if not sids:
        raise MalformedTransaction("transaction touches no shard")
    return TxClass.SINGLE if len(sids) == 1 else TxClass.CROSS


def classify(tx: Transaction) -> TxClass:
    return classify_sids(tx.sids)


def convert_to_cross(tx: Transaction, rule: str) -> Transaction:
    """Wrap a single-shard transaction as cross-shard without changing its
    identity.  The rule tag records why conversion happened, which keeps the
    proposer's event log auditable."""
    if tx.klass is TxClass.CROSS:
        return tx
    return replace(tx, klass=TxClass.CROSS, converted=rule)


@dataclass(frozen=True)
class PreplayResult:
    """Outcome of preplaying one batch on its shard proposer.

    order lists committed tx digests in schedule order; reads maps digest ->
    {key: (value, src)} where src is the order index of the writer the value
    came from, or -1 for the batch snapshot; writes maps digest ->
    {key: value}; results maps digest -> procedure return value.  txs carries
    the transactions themselves so validators can re-execute."""

    batch_id: str
    order: tuple[str, ...]
    txs: tuple[Transaction, ...]
    reads: dict[str, dict[str, tuple[int, int]]]
    writes: dict[str, dict[str, int]]
    results: dict[str, Any]
    snapshot_version: str
    reexec_count: int = 0

    def tx_by_digest(self, d: str) -> Transaction:
        for tx in self.txs:
            if tx.digest == d:
                return tx
        raise KeyError(d)


@dataclass(frozen=True)
class Block:
    """One DAG vertex worth of payload from a shard proposer."""

    proposer: ShardId
    round: Round
    dag: DagId
    kind: BlockKind
    parents: tuple[str, ...] = ()
    single: Optional[PreplayResult] = None
    cross: tuple[Transaction, ...] = ()

    def __post_init__(self):
        if self.kind in (BlockKind.SKIP, BlockKind.SHIFT):
            if self.single is not None or self.cross:
                raise ValueError(f"{self.kind.value} blocks carry no payload")
        if self.kind is BlockKind.CROSS_ONLY and self.single is not None:
            raise ValueError("cross_only blocks carry no preplay payload")

    @property
    def digest(self) -> str:
        payload = self.single.batch_id if self.single else None
        return digest_of(self.proposer, self.round, self.dag, self.kind.value,
                         self.parents, payload,
                         tuple(t.digest for t in self.cross))

    def payload_txs(self) -> tuple[Transaction, ...]:
        out: tuple[Transaction, ...] = ()
        if self.single is not None:
            out += self.single.txs
        return out + self.cross


@dataclass(frozen=True)
class Certificate:
    """Abstract availability certificate: 2f+1 distinct replica votes over
    one (proposer, round, dag) vertex."""

    block_digest: str
    proposer: ShardId
    round: Round
    dag: DagId
    voters: frozenset[ReplicaId]

    def valid(self, f: int) -> bool:
        return len(self.voters) >= 2 * f + 1


@dataclass
class ShardAssignment:
    """shard -> proposing replica map for one DAG incarnation."""

    proposer_of: dict[ShardId, ReplicaId]

    @classmethod
    def initial(cls, n: int) -> "ShardAssignment":
        return cls({s: s for s in range(n)})

    def rotated(self, n: int) -> "ShardAssignment":
        """Advance every shard to the next replica in index order."""
        return ShardAssignment({s: (r + 1) % n for s, r in self.proposer_of.items()})

    def shard_of_replica(self, replica: ReplicaId) -> Optional[ShardId]:
        for s, r in self.proposer_of.items():
            if r == replica:
                return s
        return None

    def as_text(self) -> str:
        return ",".join(f"{s}:{self.proposer_of[s]}" for s in sorted(self.proposer_of))
