"""Dependency-graph concurrency controller for preplay batches.

Transactions execute operation by operation against a snapshot plus a graph
of live transactions.  Each node keeps at most two records per key: the first
read and the last write.  A virtual root node stands for the snapshot and
counts as a write node for every key.

Ordering discipline:

* A read selects a source write node (the write frontier on that key, ties
  broken toward the most recently begun node, then earlier writers, then the
  root).  Reading from u is only allowed if every other write node on the key
  can be placed before u or after the reader; missing constraints are added
  as edges, and a candidate that cannot be made consistent is skipped in
  favour of an ancestor source.  If no source works the reader aborts.
* A first write links after the uncommitted readers of the key that would
  otherwise be invalidated (read-frontier linkage, falling back to a root
  edge), aborting readers that cannot be ordered before the writer.  Write
  nodes are not ordered among each other; their commit order decides.
* Rewriting a key that other transactions already read from this node makes
  those readers stale and aborts them.

Aborts remove nodes physically.  A node with any write records cascades to
everything reachable over its outgoing edges; a pure reader aborts alone.
Removing a node re-links each of its predecessors to each of its successors
as an ordering-only constraint: placement decisions elsewhere rely on
reachability, so a constraint that ran through the removed node must not
vanish with it.  Commit requires every predecessor (data or ordering) to be
committed, so the committed order is a topological order of the final graph
and serial replay of that order reproduces every recorded read and write.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

from .model import ABORTED, MisroutedTransaction, sid_of_key

ROOT_ID = "@root"


class Status(Enum):
    EXECUTING = "executing"
    READY = "ready_to_commit"
    COMMITTED = "committed"


@dataclass
class DepNode:
    txid: str
    seq: int
    status: Status = Status.EXECUTING
    first_read: dict[str, tuple[int, str]] = field(default_factory=dict)
    last_write: dict[str, int] = field(default_factory=dict)
    result: Any = None
    order_idx: int = -1


class DepGraph:
    def __init__(self, snapshot: dict[str, int], *, default: int = 0,
                 shard: Optional[int] = None, n_shards: Optional[int] = None,
                 skip_read_guard: bool = False):
        self.snapshot = dict(snapshot)
        self.default = default
        self.shard = shard
        self.n_shards = n_shards
        # Fault-injection switch for the fuzzer's self-test: disables the
        # source-placement guard so stale reads can slip through.
        self._skip_read_guard = skip_read_guard
        self.nodes: dict[str, DepNode] = {}
        self.succ: dict[str, dict[str, set[str]]] = {ROOT_ID: {}}
        self.pred: dict[str, dict[str, set[str]]] = {}
        # ordering-only constraints left behind by removed nodes; they gate
        # commits and reachability but carry no data and never cascade
        self.follows: dict[str, set[str]] = {}
        self.followed: dict[str, set[str]] = {}
        self.readers: dict[str, set[str]] = {}
        self.writers: dict[str, set[str]] = {}
        self.committed: list[str] = []
        self._seq = 0
        self._aborted: list[str] = []
        self._lock = threading.RLock()

    # -- lifecycle ---------------------------------------------------------

    def begin(self, txid: str) -> None:
        with self._lock:
            if txid in self.nodes:
                raise ValueError(f"tx {txid} already live")
            self._seq += 1
            self.nodes[txid] = DepNode(txid, self._seq)
            self.succ[txid] = {}
            self.pred[txid] = {}

    def status(self, txid: str) -> Optional[Status]:
        nd = self.nodes.get(txid)
        return nd.status if nd else None

    def pop_aborted(self) -> list[str]:
        """Drain abort notifications for the executor pool."""
        with self._lock:
            out, self._aborted = self._aborted, []
            return out

    # -- operations --------------------------------------------------------

    def read(self, txid: str, key: str):
        with self._lock:
            node = self.nodes.get(txid)
            if node is None:
                return ABORTED
            if node.status is not Status.EXECUTING:
                raise ValueError(f"tx {txid} is {node.status.value}, cannot read")
            self._check_routing(key)
            if key in node.last_write:
                return node.last_write[key]
            if key in node.first_read:
                return node.first_read[key][0]
            writers = sorted(
                (self.nodes[w] for w in self.writers.get(key, ()) if w != txid),
                key=lambda nd: -nd.seq)
            wset = {nd.txid for nd in writers}
            frontier, rest = [], []
            for nd in writers:
                out = self.succ.get(nd.txid, {})
                if any(key in keys and to in wset for to, keys in out.items()):
                    rest.append(nd)
                else:
                    frontier.append(nd)
            for cand in frontier + rest + [None]:
                ok, value = self._try_source(node, key, cand, writers)
                if ok:
                    return value
            self.detect_conflict(txid, key)
            return ABORTED

    def _try_source(self, node: DepNode, key: str, cand: Optional[DepNode],
                    writers: list[DepNode]) -> tuple[bool, Any]:
        """Attempt to serve node's read of key from cand (None = root).

        Adds the read edge plus any placement edges needed so no other
        writer on the key can land between the source and the reader; rolls
        everything back and reports failure if that cannot be done
        acyclically."""
        v = node.txid
        src = ROOT_ID if cand is None else cand.txid
        added: list[tuple[str, str, str]] = []

        def try_add(frm: str, to: str) -> bool:
            if frm == to or self._reaches(to, frm):
                return False
            if self._add_edge(frm, to, key):
                added.append((frm, to, key))
            return True

        def rollback() -> tuple[bool, Any]:
            for frm, to, k in reversed(added):
                self._remove_edge(frm, to, k)
            return False, None

        if cand is not None and self._reaches(v, src):
            return False, None  # reading from a descendant would cycle
        if not try_add(src, v):
            return rollback()
        if not self._skip_read_guard:
            u_committed = cand is not None and cand.status is Status.COMMITTED
            for w in sorted(writers, key=lambda nd: nd.seq):
                if w.txid == src:
                    continue
                if w.status is Status.COMMITTED:
                    if cand is None:
                        return rollback()  # snapshot already overwritten
                    if u_committed and w.order_idx > cand.order_idx:
                        return rollback()
                    continue  # committed before an uncommitted source
                if cand is not None and not u_committed:
                    if self._reaches(w.txid, src) or self._reaches(v, w.txid):
                        continue
                    if try_add(w.txid, src) or try_add(v, w.txid):
                        continue
                    return rollback()
                # source is committed or the root: w must follow the reader
                if self._reaches(v, w.txid) or try_add(v, w.txid):
                    continue
                return rollback()
        value = self.snapshot.get(key, self.default) if cand is None \
            else cand.last_write[key]
        node.first_read[key] = (value, src)
        self.readers.setdefault(key, set()).add(v)
        return True, value

    def write(self, txid: str, key: str, value: int):
        with self._lock:
            node = self.nodes.get(txid)
            if node is None:
                return ABORTED
            if node.status is not Status.EXECUTING:
                raise ValueError(f"tx {txid} is {node.status.value}, cannot write")
            self._check_routing(key)
            if key in node.last_write:
                node.last_write[key] = value
                self._abort_stale_readers(txid, key)
                return None
            node.last_write[key] = value
            self.writers.setdefault(key, set()).add(txid)
            self._guard_readers_against(node, key)
            if not any(key in keys for keys in self.pred.get(txid, {}).values()):
                self._add_edge(ROOT_ID, txid, key)
            return None

    def _abort_stale_readers(self, writer: str, key: str) -> None:
        """The node changed a value it already served to readers."""
        stale = []
        for r in self.readers.get(key, set()):
            nd = self.nodes.get(r)
            if nd is None or r == writer or nd.status is Status.COMMITTED:
                continue
            if nd.first_read.get(key, (None, None))[1] == writer:
                stale.append(nd)
        for nd in sorted(stale, key=lambda n: n.seq):
            if nd.txid in self.nodes:
                self.detect_conflict(nd.txid, key)

    def _guard_readers_against(self, node: DepNode, key: str) -> None:
        """First write on key: order existing readers before this writer, or
        this writer before their sources; readers that fit neither are stale
        and abort."""
        v = node.txid
        for r in sorted(self.readers.get(key, set()),
                        key=lambda t: self.nodes[t].seq if t in self.nodes else 0):
            rnd = self.nodes.get(r)
            if rnd is None or r == v or rnd.status is Status.COMMITTED:
                continue
            value_src = rnd.first_read[key][1]
            src_nd = self.nodes.get(value_src)
            src_open = src_nd is not None and src_nd.status is not Status.COMMITTED
            if self._reaches(r, v) or (src_open and self._reaches(v, value_src)):
                continue
            if not self._reaches(v, r) and self._add_edge(r, v, key) is not None:
                continue
            if src_open and not self._reaches(value_src, v):
                self._add_edge(v, value_src, key)
                continue
            self.detect_conflict(r, key)

    # -- conflicts and aborts ---------------------------------------------

    def detect_conflict(self, txid: str, key: Optional[str] = None) -> frozenset[str]:
        """Remove txid (and, if it holds writes, every transaction reachable
        over its outgoing edges) from the graph.  Returns the abort set."""
        with self._lock:
            node = self.nodes.get(txid)
            if node is None:
                return frozenset()
            if node.last_write:
                doomed = self._closure(txid)
            else:
                doomed = {txid}
            waiters: set[str] = set()
            for t in doomed:
                waiters.update(self.succ.get(t, ()))
                waiters.update(self.follows.get(t, ()))
            for t in sorted(doomed, key=lambda t: self.nodes[t].seq):
                self._remove_node(t)
            # losing a predecessor can leave a finished transaction with
            # nothing but committed predecessors; commit it now
            survivors = [self.nodes[t] for t in waiters - doomed if t in self.nodes]
            for nd in sorted(survivors, key=lambda n: n.seq):
                if nd.status is Status.READY:
                    self._commit_cascade(nd)
            return frozenset(doomed)

    def abort_tx(self, txid: str) -> frozenset[str]:
        """Executor-initiated abort (same closure rules as detect_conflict)."""
        return self.detect_conflict(txid)

    def _closure(self, start: str) -> set[str]:
        seen = {start}
        stack = [start]
        while stack:
            for to in self.succ.get(stack.pop(), {}):
                if to not in seen:
                    seen.add(to)
                    stack.append(to)
        return seen

    def _remove_node(self, txid: str) -> None:
        nd = self.nodes.pop(txid, None)
        if nd is None:
            return
        if nd.status is Status.COMMITTED:
            raise AssertionError(f"committed tx {txid} cannot abort")
        ins = [p for p in self.pred.get(txid, {}) if p != ROOT_ID]
        ins.extend(self.followed.get(txid, ()))
        outs = list(self.succ.get(txid, {})) + list(self.follows.get(txid, ()))
        restitch: list[tuple[str, str]] = []
        for to, keys in self.succ.pop(txid, {}).items():
            self.pred.get(to, {}).pop(txid, None)
            restitch.extend((to, k) for k in keys)
        for frm, keys in self.pred.pop(txid, {}).items():
            self.succ.get(frm, {}).pop(txid, None)
        for to in self.follows.pop(txid, set()):
            self.followed.get(to, set()).discard(txid)
        for frm in self.followed.pop(txid, set()):
            self.follows.get(frm, set()).discard(txid)
        for k in nd.first_read:
            self.readers.get(k, set()).discard(txid)
        for k in nd.last_write:
            self.writers.get(k, set()).discard(txid)
        self._aborted.append(txid)
        for to, k in restitch:
            survivor = self.nodes.get(to)
            if survivor is None:
                continue
            if k in survivor.first_read or k in survivor.last_write:
                if not any(k in keys for keys in self.pred.get(to, {}).values()):
                    self._add_edge(ROOT_ID, to, k)
        # keep orderings that ran through the removed node alive
        for p in ins:
            if p not in self.nodes:
                continue
            for s in outs:
                if s != p and s in self.nodes:
                    self.follows.setdefault(p, set()).add(s)
                    self.followed.setdefault(s, set()).add(p)

    # -- commit ------------------------------------------------------------

    def finalize(self, txid: str, result: Any = None) -> tuple:
        with self._lock:
            node = self.nodes.get(txid)
            if node is None:
                return ("aborted",)
            node.result = result
            node.status = Status.READY
            self._commit_cascade(node)
            if node.status is Status.COMMITTED:
                return ("committed", node.order_idx)
            return ("pending",)

    def _commit_cascade(self, node: DepNode) -> None:
        stack = [node]
        while stack:
            nd = stack.pop()
            if nd.status is not Status.READY:
                continue
            ready = True
            blockers = [p for p in self.pred.get(nd.txid, {}) if p != ROOT_ID]
            blockers.extend(self.followed.get(nd.txid, ()))
            for p in blockers:
                pn = self.nodes.get(p)
                if pn is not None and pn.status is not Status.COMMITTED:
                    ready = False
                    break
            if not ready:
                continue
            nd.status = Status.COMMITTED
            nd.order_idx = len(self.committed)
            self.committed.append(nd.txid)
            for s in (*self.succ.get(nd.txid, {}),
                      *self.follows.get(nd.txid, ())):
                sn = self.nodes.get(s)
                if sn is not None and sn.status is Status.READY:
                    stack.append(sn)

    def extract_schedule(self):
        """Committed order with per-tx reads (value, source order index; -1
        for the snapshot), writes, and results."""
        with self._lock:
            order = tuple(self.committed)
            reads: dict[str, dict[str, tuple[int, int]]] = {}
            writes: dict[str, dict[str, int]] = {}
            results: dict[str, Any] = {}
            for t in order:
                nd = self.nodes[t]
                r: dict[str, tuple[int, int]] = {}
                for k, (val, src) in nd.first_read.items():
                    idx = -1 if src == ROOT_ID else self.nodes[src].order_idx
                    r[k] = (val, idx)
                reads[t] = r
                writes[t] = dict(nd.last_write)
                results[t] = nd.result
            return order, reads, writes, results

    # -- plumbing ----------------------------------------------------------

    def _check_routing(self, key: str) -> None:
        if self.shard is not None and self.n_shards is not None:
            if sid_of_key(key, self.n_shards) != self.shard:
                raise MisroutedTransaction(
                    f"key {key!r} belongs to shard {sid_of_key(key, self.n_shards)},"
                    f" proposer owns {self.shard}")

    def _add_edge(self, frm: str, to: str, key: str):
        keys = self.succ.setdefault(frm, {}).setdefault(to, set())
        if key in keys:
            return None  # already present, nothing new added
        keys.add(key)
        self.pred.setdefault(to, {}).setdefault(frm, set()).add(key)
        return (frm, to, key)

    def _remove_edge(self, frm: str, to: str, key: str) -> None:
        keys = self.succ.get(frm, {}).get(to)
        if keys is None or key not in keys:
            return
        keys.discard(key)
        if not keys:
            self.succ[frm].pop(to, None)
        pkeys = self.pred.get(to, {}).get(frm)
        if pkeys is not None:
            pkeys.discard(key)
            if not pkeys:
                self.pred[to].pop(frm, None)

    def _reaches(self, a: str, b: str) -> bool:
        if a == b:
            return True
        seen = {a}
        stack = [a]
        while stack:
            at = stack.pop()
            for to in (*self.succ.get(at, {}), *self.follows.get(at, ())):
                if to == b:
                    return True
                if to not in seen:
                    seen.add(to)
                    stack.append(to)
        return False

    def export_edges(self) -> list[tuple[str, str, str]]:
        """(from, to, key) triples, root edges included, sorted."""
        with self._lock:
            out = []
            for frm, tos in self.succ.items():
                for to, keys in tos.items():
                    out.extend((frm, to, k) for k in keys)
            return sorted(out)

    def live_ids(self) -> set[str]:
        return set(self.nodes)

    def validate(self) -> list[str]:
        """Debug invariant check; returns violation descriptions."""
        with self._lock:
            problems = []
            # acyclicity over data edges and ordering constraints together
            adj = {t: set() for t in self.nodes}
            for frm, tos in self.succ.items():
                if frm in adj:
                    adj[frm].update(to for to in tos if to in adj)
            for frm, tos in self.follows.items():
                if frm in adj:
                    adj[frm].update(to for to in tos if to in adj)
            indeg = {t: 0 for t in self.nodes}
            for frm, tos in adj.items():
                for to in tos:
                    indeg[to] += 1
            queue = [t for t, d in indeg.items() if d == 0]
            seen = 0
            while queue:
                t = queue.pop()
                seen += 1
                for to in adj[t]:
                    indeg[to] -= 1
                    if indeg[to] == 0:
                        queue.append(to)
            if seen != len(self.nodes):
                problems.append("cycle among live nodes")
            # root reachability per accessed key
            for t, nd in self.nodes.items():
                for k in set(nd.first_read) | set(nd.last_write):
                    if not any(k in keys for keys in self.pred.get(t, {}).values()):
                        problems.append(f"{t[:8]} accesses {k} without incoming edge")
            # read placement guard: no other writer may land between a
            # read's source and the reader in any commit-order extension
            for t, nd in self.nodes.items():
                t_idx = nd.order_idx if nd.status is Status.COMMITTED else None
                for k, (_val, src) in nd.first_read.items():
                    sn = self.nodes.get(src)
                    src_done = src == ROOT_ID or (sn is not None and sn.status is Status.COMMITTED)
                    src_idx = -1 if src == ROOT_ID else (sn.order_idx if src_done else None)
                    for w in self.writers.get(k, set()):
                        if w in (t, src):
                            continue
                        wn = self.nodes[w]
                        w_done = wn.status is Status.COMMITTED
                        if w_done and src_done:
                            if wn.order_idx < src_idx:
                                continue  # before the source
                            if t_idx is not None and wn.order_idx > t_idx:
                                continue  # after the reader
                            if t_idx is None:
                                problems.append(
                                    f"committed writer {w[:8]} between {src[:8]} and open reader {t[:8]} on {k}")
                            else:
                                problems.append(
                                    f"writer {w[:8]} slips between {src[:8]} and {t[:8]} on {k}")
                        elif w_done and not src_done:
                            continue  # w committed before the open source can
                        elif not w_done and src_done:
                            if t_idx is not None:
                                continue  # open writer commits after the reader
                            if not self._reaches(t, w):
                                problems.append(
                                    f"open writer {w[:8]} unordered after reader {t[:8]} on {k}")
                        else:
                            if not (self._reaches(w, src) or self._reaches(t, w)):
                                problems.append(
                                    f"writer {w[:8]} unplaced around read {src[:8]}->{t[:8]} on {k}")
            return problems
