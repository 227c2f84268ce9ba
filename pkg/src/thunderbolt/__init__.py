"""Desk-scale simulator of a sharded DAG ledger.

Single-shard transactions are preplayed by their shard proposer through a
dependency-graph concurrency controller and validated by every replica after
DAG consensus orders the blocks; cross-shard transactions are ordered first
and executed deterministically afterwards.  Shift blocks rotate shard
ownership without halting the DAG.
"""

from . import workload as _workload  # noqa: F401  registers the builtin procedures
from .model import (
    ABORTED,
    Block,
    BlockKind,
    Certificate,
    MalformedTransaction,
    MisroutedTransaction,
    PreplayResult,
    Procedure,
    ShardAssignment,
    Transaction,
    TxClass,
    assign_shard,
    classify,
    convert_to_cross,
    make_tx,
    sid_of_key,
)

__all__ = [
    "ABORTED",
    "Block",
    "BlockKind",
    "Certificate",
    "MalformedTransaction",
    "MisroutedTransaction",
    "PreplayResult",
    "Procedure",
    "ShardAssignment",
    "Transaction",
    "TxClass",
    "assign_shard",
    "classify",
    "convert_to_cross",
    "make_tx",
    "sid_of_key",
]
