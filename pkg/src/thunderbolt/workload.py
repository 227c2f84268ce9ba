"""SmallBank-style workload, key space, and the serial replay oracle.

Accounts carry a checking and a savings balance under keys "<acct>/c" and
"<acct>/s"; both keys of an account map to the same shard (see
model.sid_of_key), so a balance probe is always single-shard while a payment
between accounts on different shards is cross-shard.  Transactions are routed
by the shard of the sender (first parameter) account.

The serial replay oracle is the ground truth for every execution engine in
this package: a schedule is correct exactly when replaying its commit order
serially reproduces the recorded reads, writes and results.
"""

from __future__ import annotations

import random
from bisect import bisect_left
from dataclasses import dataclass
from itertools import accumulate
from typing import Any, Iterable

from .model import (
    Procedure,
    Transaction,
    assign_shard,
    make_tx,
    procedure,
)

INITIAL_BALANCE = 10_000


def ckey(acct: str) -> str:
    return acct + "/c"


def skey(acct: str) -> str:
    return acct + "/s"


@procedure("send_payment")
def _send_payment(src: str, dst: str, amount: int):
    """Read both checking balances, then write the transferred values back."""
    a = yield ("r", ckey(src))
    b = yield ("r", ckey(dst))
    yield ("w", ckey(src), a - amount)
    yield ("w", ckey(dst), b + amount)
    return (a - amount, b + amount)


@procedure("get_balance")
def _get_balance(acct: str):
    """Read checking and savings of one account."""
    c = yield ("r", ckey(acct))
    s = yield ("r", skey(acct))
    return c + s


def account_name(i: int) -> str:
    return f"a{i}"


def initial_state(n_accounts: int) -> dict[str, int]:
    state: dict[str, int] = {}
    for i in range(n_accounts):
        acct = account_name(i)
        state[ckey(acct)] = INITIAL_BALANCE
        state[skey(acct)] = INITIAL_BALANCE
    return state


@dataclass(frozen=True)
class SmallBankSpec:
    """Workload shape: contention (theta), read fraction (pr), cross-shard
    payment fraction (cross_pct, in percent)."""

    n_accounts: int = 1000
    theta: float = 0.85
    pr: float = 0.5
    cross_pct: int = 0
    n_txs: int = 1000
    amount_max: int = 100


class ZipfSampler:
    """Bounded Zipf over ranks 1..n with exponent theta.

    theta=0 is uniform; larger theta concentrates draws on low indices.
    Sampling is a bisect over the precomputed cumulative weights, so a given
    rng yields a reproducible stream."""

    def __init__(self, n: int, theta: float):
        weights = [(k + 1) ** -theta for k in range(n)]
        self.cum = list(accumulate(weights))
        self.total = self.cum[-1]

    def sample(self, rng: random.Random) -> int:
        return bisect_left(self.cum, rng.random() * self.total)


def generate(spec: SmallBankSpec, n_shards: int, seed: int,
             client: str = "gen") -> list[Transaction]:
    """Deterministic transaction stream for one workload spec.

    Payments pick both accounts from the Zipfian distribution; with
    probability cross_pct/100 the receiver is forced onto a different shard
    than the sender, otherwise onto the same shard.  A single-shard system
    cannot host cross-shard pairs, so cross_pct degenerates to 0 there."""
    rng = random.Random(seed)
    zipf = ZipfSampler(spec.n_accounts, spec.theta)
    txs: list[Transaction] = []
    for seq in range(spec.n_txs):
        if rng.random() < spec.pr:
            acct = account_name(zipf.sample(rng))
            proc = Procedure("get_balance", (acct,))
            sids = {assign_shard(acct, n_shards)}
        else:
            src = account_name(zipf.sample(rng))
            src_sid = assign_shard(src, n_shards)
            want_cross = n_shards > 1 and rng.random() < spec.cross_pct / 100.0
            dst = _pick_partner(spec, zipf, rng, src, src_sid, n_shards, want_cross)
            amount = rng.randint(1, spec.amount_max)
            proc = Procedure("send_payment", (src, dst, amount))
            sids = {src_sid, assign_shard(dst, n_shards)}
        txs.append(make_tx(client, seq, proc, sids))
    return txs


def _pick_partner(spec: SmallBankSpec, zipf: ZipfSampler, rng: random.Random,
                  src: str, src_sid: int, n_shards: int, want_cross: bool) -> str:
    for _ in range(200):
        dst = account_name(zipf.sample(rng))
        if dst == src:
            continue
        if (assign_shard(dst, n_shards) != src_sid) == want_cross:
            return dst
    # Degenerate account/shard layout: fall back to a linear scan so the
    # generator stays deterministic and total.
    start = rng.randrange(spec.n_accounts)
    for off in range(spec.n_accounts):
        dst = account_name((start + off) % spec.n_accounts)
        if dst != src and (assign_shard(dst, n_shards) != src_sid) == want_cross:
            return dst
    for off in range(spec.n_accounts):  # give up on the cross/same constraint
        dst = account_name((start + off) % spec.n_accounts)
        if dst != src:
            return dst
    raise ValueError("need at least two accounts")


def random_script_batch(seed: int, max_txs: int = 8, max_keys: int = 4,
                        max_ops: int = 4,
                        client: str = "fuzz") -> tuple[list[Transaction],
                                                       dict[str, int]]:
    """Small contended batch of straight-line scripts plus a fitting
    snapshot; the staple diet of the scheduler fuzzer.

    Few keys and mixed read/write/read-modify-write ops maximize the rate
    of genuine conflicts per batch.  Blind writes are kept in the mix on
    purpose: they are what separates a correct read-ordering rule from one
    that only orders writes."""
    rng = random.Random(seed)
    keys = [f"k{i}/c" for i in range(rng.randint(1, max_keys))]
    snapshot = {k: rng.randint(0, 9) for k in keys}
    txs = []
    for seq in range(rng.randint(1, max_txs)):
        ops = []
        for _ in range(rng.randint(1, max_ops)):
            key = rng.choice(keys)
            ops.append(rng.choice((
                ("r", key),
                ("w", key, rng.randint(0, 99)),
                ("rmw", key, rng.randint(1, 9)),
            )))
        txs.append(make_tx(client, seq, Procedure("script", (tuple(ops),)),
                           {0}))
    return txs, snapshot


# ---------------------------------------------------------------------------
# Serial replay oracle


@dataclass
class ReplayTrace:
    order: tuple[str, ...]
    reads: dict[str, dict[str, tuple[int, int]]]
    writes: dict[str, dict[str, int]]
    results: dict[str, Any]
    final_state: dict[str, int]


def serial_replay(txs: Iterable[Transaction], state: dict[str, int],
                  default: int = 0) -> ReplayTrace:
    """Execute transactions one after another against a copy of state.

    Records, per transaction, every first read of a key with the order index
    of the transaction whose write supplied the value (-1 when it came from
    the initial state), the final per-key writes, and the procedure result."""
    from .model import ProcRun

    st = dict(state)
    last_writer: dict[str, int] = {}
    reads: dict[str, dict[str, tuple[int, int]]] = {}
    writes: dict[str, dict[str, int]] = {}
    results: dict[str, Any] = {}
    order: list[str] = []
    for idx, tx in enumerate(txs):
        r: dict[str, tuple[int, int]] = {}
        w: dict[str, int] = {}
        run = ProcRun(tx)
        item = run.next_op()
        while item[0] != "done":
            if item[0] == "r":
                key = item[1]
                if key in w:
                    value = w[key]
                else:
                    value = st.get(key, default)
                    if key not in r:
                        r[key] = (value, last_writer.get(key, -1))
                item = run.next_op(value)
            else:
                _, key, value = item
                w[key] = value
                item = run.next_op(None)
        for key, value in w.items():
            st[key] = value
            last_writer[key] = idx
        d = tx.digest
        order.append(d)
        reads[d] = r
        writes[d] = w
        results[d] = item[1]
    return ReplayTrace(tuple(order), reads, writes, results, st)


def oracle_check(order: tuple[str, ...], txs: Iterable[Transaction],
                 reads, writes, results, snapshot: dict[str, int]) -> list[str]:
    """Compare a recorded schedule against its serial replay.

    Returns human-readable mismatch descriptions; empty means the schedule is
    serializable as recorded (reads saw the serial values, writes and results
    match, and read sources agree)."""
    by_digest = {t.digest: t for t in txs}
    trace = serial_replay([by_digest[d] for d in order], snapshot)
    problems: list[str] = []
    for d in order:
        if trace.reads[d] != reads.get(d, {}):
            problems.append(
                f"tx {d[:8]} reads {reads.get(d, {})} != serial {trace.reads[d]}")
        if trace.writes[d] != writes.get(d, {}):
            problems.append(
                f"tx {d[:8]} writes {writes.get(d, {})} != serial {trace.writes[d]}")
        if trace.results[d] != results.get(d):
            problems.append(
                f"tx {d[:8]} result {results.get(d)!r} != serial {trace.results[d]!r}")
    return problems


# ---------------------------------------------------------------------------
# Line-oriented workload files


def dump_workload(txs: Iterable[Transaction], path: str) -> None:
    """One transaction per line: client|seq|proc|args|sids|class."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for tx in txs:
            fh.write("|".join([
                tx.client,
                str(tx.seq),
                tx.proc.name,
                json.dumps(list(tx.proc.args)),
                ",".join(str(s) for s in sorted(tx.sids)),
                tx.klass.value,
            ]) + "\n")


def load_workload(path: str) -> list[Transaction]:
    import json

    txs: list[Transaction] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            client, seq, name, args, sids, _klass = line.split("|")
            txs.append(make_tx(
                client, int(seq), Procedure(name, tuple(json.loads(args))),
                frozenset(int(s) for s in sids.split(",")),
            ))
    return txs
