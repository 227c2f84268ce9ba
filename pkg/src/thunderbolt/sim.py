"""Deterministic discrete-event harness for whole-protocol runs.

Replicas, links, and clients share one event heap ordered by (time, seq);
seq breaks ties in push order, so a run is a pure function of its config
and seed.  Each link delivers in FIFO order (a later send never overtakes
an earlier one on the same src->dst pair), which the per-proposer chain
logic in the shard engine relies on.

Each replica is modeled as two servers.  The consensus thread handles
messages and timers and is never charged for execution, so rounds advance
at network pace.  The executor is a single-server queue: preplay,
commit-time execution, and apply work reserve time on it via
env.exec_busy(), which returns the completion timestamp.  A proposal
whose payload is still being preplayed broadcasts at that timestamp, and
a transaction counts as applied at it, so execution backlog caps
throughput and stretches latency without stalling rounds; protocols that
execute everything serially after consensus pay for it here.

Two timing modes.  Protocol mode charges fixed per-item costs from
CostModel and never reads the wall clock, so reports are byte-identical
across reruns.  Bench mode (cfg.bench) charges measured wall time of the
real engine calls instead and runs the engine's thread pool; it loses
bitwise determinism but exercises true parallelism.

Faults are injected per run via AdversarySpec: crash (stop at a time),
halt (stop proposing after a round, optionally letting the final
broadcast reach only some replicas), delay (slow one replica's outgoing
links, optionally only for blocks in a round window), censor (drop
client submissions matching a digest fraction), tamper (corrupt one
write in every preplay payload before broadcast).

Clients submit a pregenerated transaction stream, route each transaction
to the proposer of its home shard under the most advanced assignment
they have seen, and retransmit anything uncommitted on a timer; commit
time is the first application on any replica.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import asdict, dataclass, field
from statistics import fmean
from typing import Any, Callable, Optional

from .model import Transaction
from .replica import PROTO_THUNDERBOLT, PROTO_TUSK_SERIAL, ReplicaNode
from .workload import SmallBankSpec, generate, initial_state


@dataclass(frozen=True)
class CostModel:
    """Per-item charges (seconds) for protocol-mode timing."""

    preplay_per_tx: float = 2e-3
    exec_per_tx: float = 2e-3
    apply_per_tx: float = 2e-4
    validate_per_block: float = 1e-4
    link_min: float = 0.01
    link_mean: float = 0.02
    link_max: float = 0.05
    gst: float = 0.0         # before this time links add gst_extra
    gst_extra: float = 0.0

    def sample_link(self, rng: random.Random, now: float) -> float:
        d = rng.triangular(self.link_min, self.link_max, self.link_mean)
        if now < self.gst:
            d += self.gst_extra
        return d


@dataclass(frozen=True)
class AdversarySpec:
    kind: str = "none"  # none | crash | halt | delay | censor | tamper
    targets: tuple[int, ...] = ()
    crash_at: float = 1.0
    halt_round: int = 2
    halt_dag: int = 0
    halt_recipients: Optional[tuple[int, ...]] = None  # None: deliver to all
    delay_extra: float = 0.5
    delay_rounds: Optional[tuple[int, int]] = None  # [lo, hi] block rounds
    censor_frac: float = 1.0  # fraction of submissions dropped, by digest


@dataclass
class SimConfig:
    protocol: str = PROTO_THUNDERBOLT
    n: int = 4
    f: int = 1
    workers: int = 4
    batch_size: int = 100
    max_aborts: int = 10
    skip_recovery: bool = False
    bench: bool = False
    k: int = 2
    k_rotate: int = 0
    leader_offset: int = 0
    delta_round: float = 0.3
    seed: int = 0
    horizon: float = 60.0
    costs: CostModel = field(default_factory=CostModel)
    # workload shape
    n_accounts: int = 256
    theta: float = 0.85
    pr: float = 0.5
    cross_pct: int = 0
    total_txs: int = 200
    arrival_rate: float = 0.0  # tx/s; 0 submits everything at t=0
    retry_every: float = 1.0


class _Env:
    """The narrow waist a replica sees: time, links, timers, cost account."""

    def __init__(self, sim: "Sim", rid: int):
        self._sim = sim
        self._rid = rid

    def now(self) -> float:
        return self._sim.now

    def send(self, src: int, dst: int, msg: tuple) -> None:
        self._sim.deliver(src, dst, msg)

    def broadcast(self, src: int, msg: tuple,
                  recipients: Optional[set[int]] = None) -> None:
        for dst in range(self._sim.cfg.n):
            if dst == src:
                continue
            if recipients is not None and dst not in recipients:
                continue
            self._sim.deliver(src, dst, msg)

    def schedule(self, delay: float, fn: Callable[[], None]) -> None:
        self._sim.push(self._sim.now + delay, fn)

    def exec_busy(self, duration: float) -> float:
        """Queue work on this replica's executor; returns completion time."""
        s = self._sim
        done = max(s.now, s.exec_until[self._rid]) + duration
        s.exec_until[self._rid] = done
        return done

    def tx_applied(self, rid: int, digest: str) -> None:
        self._sim.clients.on_applied(digest)


class Clients:
    """Submission, routing, commit tracking, and retransmission."""

    def __init__(self, sim: "Sim", arrivals: list[tuple[float, Transaction]]):
        self.sim = sim
        self.arrivals = sorted(arrivals, key=lambda a: a[0])
        self.submit_time: dict[str, float] = {}
        self.commit_time: dict[str, float] = {}
        self.pending: dict[str, Transaction] = {}
        self.total = len(arrivals)

    def install(self) -> None:
        for t, tx in self.arrivals:
            self.sim.push(t, lambda tx=tx: self.submit(tx))
        if self.arrivals:
            self.sim.push(self.sim.cfg.retry_every, self._retry_tick)

    def submit(self, tx: Transaction) -> None:
        if tx.digest not in self.submit_time:
            self.submit_time[tx.digest] = self.sim.now
            self.pending[tx.digest] = tx
        self._route(tx)

    def _route(self, tx: Transaction) -> None:
        nodes = [n for n in self.sim.nodes if not n.crashed]
        if not nodes:
            return
        best = max(nodes, key=lambda n: (n.dag_id, -n.rid))
        home = min(tx.sids)
        target = best.assignment.proposer_of[home]
        node = self.sim.nodes[target]
        delay = self.sim.cfg.costs.sample_link(self.sim.rng, self.sim.now)
        self.sim.push(self.sim.now + delay, lambda: node.on_submit(tx))

    def _retry_tick(self) -> None:
        for digest in sorted(self.pending):
            self._route(self.pending[digest])
        if self.pending or len(self.submit_time) < self.total:
            self.sim.push(self.sim.now + self.sim.cfg.retry_every,
                          self._retry_tick)

    def on_applied(self, digest: str) -> None:
        if digest in self.pending:
            self.commit_time[digest] = self.sim.now
            del self.pending[digest]

    def all_done(self) -> bool:
        return self.total > 0 and not self.pending and \
            len(self.submit_time) == self.total


class Sim:
    def __init__(self, cfg: SimConfig,
                 arrivals: list[tuple[float, Transaction]],
                 adversary: Optional[AdversarySpec] = None):
        self.cfg = cfg
        self.adversary = adversary or AdversarySpec()
        self.now = 0.0
        self.seq = 0
        self.heap: list[tuple[float, int, Callable]] = []
        self.rng = random.Random(cfg.seed)
        self.exec_until: dict[int, float] = {i: 0.0 for i in range(cfg.n)}
        self.last_link: dict[tuple[int, int], float] = {}
        state = initial_state(cfg.n_accounts)
        self.nodes = [ReplicaNode(i, cfg, _Env(self, i), dict(state))
                      for i in range(cfg.n)]
        self.clients = Clients(self, arrivals)
        self._arm_adversary()

    # -- plumbing ----------------------------------------------------------

    def push(self, t: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self.heap, (t, self.seq, fn))
        self.seq += 1

    def deliver(self, src: int, dst: int, msg: tuple) -> None:
        d = self.cfg.costs.sample_link(self.rng, self.now)
        adv = self.adversary
        if adv.kind == "delay" and src in adv.targets:
            windowed = adv.delay_rounds is not None
            if not windowed:
                d += adv.delay_extra
            elif msg[0] == "block" and \
                    adv.delay_rounds[0] <= msg[1].round <= adv.delay_rounds[1]:
                d += adv.delay_extra
        t = max(self.now + d, self.last_link.get((src, dst), 0.0))
        self.last_link[(src, dst)] = t
        node = self.nodes[dst]
        self.push(t, lambda: node.on_message(msg))

    def _arm_adversary(self) -> None:
        adv = self.adversary
        for rid in adv.targets:
            node = self.nodes[rid]
            if adv.kind == "crash":
                self.push(adv.crash_at,
                          lambda node=node: setattr(node, "crashed", True))
            elif adv.kind == "halt":
                node.halt_round = adv.halt_round
                node.halt_dag = adv.halt_dag
                node.halt_recipients = (None if adv.halt_recipients is None
                                        else set(adv.halt_recipients))
            elif adv.kind == "censor":
                frac = adv.censor_frac
                node.censor = (lambda tx, frac=frac:
                               int(tx.digest[:8], 16) / 0xFFFFFFFF < frac)
            elif adv.kind == "tamper":
                node.tamper = True

    # -- main loop ---------------------------------------------------------

    def run(self, stop_when: Optional[Callable[["Sim"], bool]] = None) -> None:
        for node in self.nodes:
            self.push(0.0, node.start)
        self.clients.install()
        stop = stop_when or (lambda sim: sim.clients.all_done())
        while self.heap:
            t, _, fn = heapq.heappop(self.heap)
            if t > self.cfg.horizon:
                break
            self.now = t
            fn()
            if stop(self):
                break

    # -- reporting ---------------------------------------------------------

    def reference_rid(self) -> int:
        for i in range(self.cfg.n):
            if i not in self.adversary.targets:
                return i
        return 0

    def report(self) -> "RunReport":
        cl = self.clients
        committed = len(cl.commit_time)
        if committed and not cl.pending:
            elapsed = max(cl.commit_time.values())
        else:
            elapsed = self.cfg.horizon
        lat = [cl.commit_time[d] - cl.submit_time[d] for d in cl.commit_time]
        ref = self.nodes[self.reference_rid()]
        cfg = asdict(self.cfg)
        cfg["adversary"] = asdict(self.adversary)
        return RunReport(
            config=cfg,
            committed=committed,
            tps=committed / elapsed if elapsed > 0 else 0.0,
            avg_latency_s=fmean(lat) if lat else 0.0,
            reexec=ref.reexec_total(),
            reconfigs=ref.dag_id,
            replicas=[n.snapshot() for n in self.nodes],
        )


@dataclass
class RunReport:
    config: dict
    committed: int
    tps: float
    avg_latency_s: float
    reexec: int
    reconfigs: int
    replicas: list[dict]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True,
                          separators=(",", ":"))


def make_arrivals(cfg: SimConfig) -> list[tuple[float, Transaction]]:
    spec = SmallBankSpec(n_accounts=cfg.n_accounts, theta=cfg.theta,
                         pr=cfg.pr, cross_pct=cfg.cross_pct,
                         n_txs=cfg.total_txs)
    txs = generate(spec, cfg.n, cfg.seed, client="c")
    if cfg.arrival_rate <= 0:
        return [(0.0, tx) for tx in txs]
    rng = random.Random(cfg.seed + 1)
    t = 0.0
    out = []
    for tx in txs:
        t += rng.expovariate(cfg.arrival_rate)
        out.append((t, tx))
    return out


def run_sim(cfg: SimConfig,
            arrivals: Optional[list[tuple[float, Transaction]]] = None,
            adversary: Optional[AdversarySpec] = None,
            stop_when: Optional[Callable[[Sim], bool]] = None) -> RunReport:
    sim = Sim(cfg, make_arrivals(cfg) if arrivals is None else arrivals,
              adversary)
    sim.run(stop_when)
    return sim.report()
