"""Command-line front end: benchmark runs, canned scenarios, and the
scheduler fuzzer.

`run` drives either the full replicated harness (protocols thunderbolt,
tusk-serial) or a standalone execution engine on one generated batch
(protocols ce, occ, tpl-nowait) and emits one metrics row per run:

    protocol,replicas,f,executors,batch,theta,pr,cross_pct,k,k_rotate,
    seed,committed,tps,avg_latency_s,reexec,reconfigs

With --out the row lands in metrics.csv next to report.json and one
event log per replica; without it everything prints to stdout.  A JSON
config file supplies defaults that explicit flags override.  --scenario
selects a canned topology-and-fault script instead of a plain benchmark;
"fig5" is the halt-then-rotate handover trace.

`fuzz` hammers the concurrency controller with small contended script
batches and replays every extracted schedule against the serial oracle,
shrinking the first counterexample to a minimal reproduction.  The
--skip-read-guard flag disables the read-path ordering rule on purpose
so the pipeline can prove it still catches the resulting violations.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import Any, Optional

from .baselines import run_occ, run_tpl_nowait
from .executor import preplay_batch
from .sim import AdversarySpec, SimConfig, run_sim
from .workload import (
    SmallBankSpec,
    dump_workload,
    generate,
    initial_state,
    oracle_check,
    random_script_batch,
)

CSV_FIELDS = ("protocol", "replicas", "f", "executors", "batch", "theta",
              "pr", "cross_pct", "k", "k_rotate", "seed", "committed", "tps",
              "avg_latency_s", "reexec", "reconfigs")
SIM_PROTOCOLS = ("thunderbolt", "tusk-serial")
EXEC_PROTOCOLS = ("ce", "occ", "tpl-nowait")

RUN_DEFAULTS: dict[str, Any] = {
    "protocol": "thunderbolt",
    "replicas": 4,
    "faults": None,
    "executors": 4,
    "batch": 100,
    "theta": 0.85,
    "pr": 0.5,
    "cross_pct": 0,
    "k": 2,
    "k_rotate": 0,
    "seed": 0,
    "txs": 300,
    "accounts": 256,
    "arrival_rate": 0.0,
    "horizon": 60.0,
    "bench": False,
    "skip_recovery": False,
    "op_delay": 0.0,
    "format": "csv",
    "out": None,
    "scenario": None,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="thunderbolt",
        description="sharded-DAG ledger benchmarks and scenario runs")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="one benchmark or scenario run")
    r.add_argument("--protocol", choices=SIM_PROTOCOLS + EXEC_PROTOCOLS)
    r.add_argument("--replicas", type=int)
    r.add_argument("--faults", type=int)
    r.add_argument("--executors", type=int, help="executor worker threads")
    r.add_argument("--batch", type=int, help="proposal batch size cap")
    r.add_argument("--theta", type=float, help="Zipf skew over accounts")
    r.add_argument("--pr", type=float, help="fraction of balance probes")
    r.add_argument("--cross-pct", type=int, dest="cross_pct")
    r.add_argument("--k", type=int, help="silence window (rounds)")
    r.add_argument("--k-rotate", type=int, dest="k_rotate",
                   help="rotation period in own proposals; 0 disables")
    r.add_argument("--seed", type=int)
    r.add_argument("--txs", type=int, help="workload size")
    r.add_argument("--accounts", type=int)
    r.add_argument("--arrival-rate", type=float, dest="arrival_rate",
                   help="tx/s; 0 submits everything at t=0")
    r.add_argument("--horizon", type=float, help="simulated seconds")
    r.add_argument("--bench", action="store_const", const=True,
                   help="charge measured wall time instead of model costs")
    r.add_argument("--skip-recovery", action="store_const", const=True,
                   dest="skip_recovery",
                   help="emit skip blocks instead of converting when blocked")
    r.add_argument("--op-delay", type=float, dest="op_delay",
                   help="per-op pause in the ce/occ/tpl-nowait engines")
    r.add_argument("--scenario", help="canned scenario id (fig5)")
    r.add_argument("--format", choices=("csv", "jsonl"))
    r.add_argument("--config", help="JSON file with defaults for any flag")
    r.add_argument("--out", help="directory for metrics, report, and logs")
    r.set_defaults(fn=cmd_run)

    z = sub.add_parser("fuzz", help="oracle-check random scheduler batches")
    z.add_argument("--count", type=int, default=1000)
    z.add_argument("--seed", type=int, default=0)
    z.add_argument("--workers", type=int, default=2)
    z.add_argument("--max-txs", type=int, default=8, dest="max_txs")
    z.add_argument("--max-keys", type=int, default=4, dest="max_keys")
    z.add_argument("--skip-read-guard", action="store_true",
                   dest="skip_read_guard",
                   help="fault injection: drop the read ordering rule")
    z.add_argument("--out", default="fuzz-repro.txt",
                   help="where to dump a minimized counterexample")
    z.set_defaults(fn=cmd_fuzz)
    return p


# -- run ---------------------------------------------------------------------


def _effective(args: argparse.Namespace,
               parser: argparse.ArgumentParser) -> dict[str, Any]:
    eff = dict(RUN_DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        unknown = set(overrides) - set(RUN_DEFAULTS)
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        eff.update(overrides)
    for key in RUN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            eff[key] = value
    return eff


def _scenario_fig5(eff: dict[str, Any]) -> tuple[dict[str, Any],
                                                 AdversarySpec]:
    """One shard proposer halts mid-round; the rest shift, rotate, and the
    stuck submissions commit under the new assignment."""
    eff = dict(eff, protocol="thunderbolt", replicas=4, faults=1, k=2,
               k_rotate=6, txs=24, accounts=64, arrival_rate=40.0,
               horizon=30.0, batch=20)
    adv = AdversarySpec(kind="halt", targets=(1,), halt_round=2, halt_dag=0,
                        halt_recipients=(0,))
    return eff, adv


SCENARIOS = {"fig5": _scenario_fig5}


def _sim_row(eff: dict[str, Any],
             adversary: Optional[AdversarySpec]) -> tuple[dict, Any]:
    cfg = SimConfig(
        protocol=eff["protocol"], n=eff["replicas"], f=eff["faults"],
        workers=eff["executors"], batch_size=eff["batch"],
        skip_recovery=eff["skip_recovery"], bench=eff["bench"],
        k=eff["k"], k_rotate=eff["k_rotate"], seed=eff["seed"],
        horizon=eff["horizon"], n_accounts=eff["accounts"],
        theta=eff["theta"], pr=eff["pr"], cross_pct=eff["cross_pct"],
        total_txs=eff["txs"], arrival_rate=eff["arrival_rate"],
        retry_every=0.5)
    report = run_sim(cfg, adversary=adversary)
    row = _row_base(eff)
    row.update(committed=report.committed, tps=round(report.tps, 3),
               avg_latency_s=round(report.avg_latency_s, 6),
               reexec=report.reexec, reconfigs=report.reconfigs)
    return row, report


def _exec_row(eff: dict[str, Any]) -> dict:
    spec = SmallBankSpec(n_accounts=eff["accounts"], theta=eff["theta"],
                         pr=eff["pr"], cross_pct=0, n_txs=eff["txs"])
    txs = generate(spec, 1, eff["seed"], client="bench")
    snapshot = initial_state(eff["accounts"])
    started = time.perf_counter()
    if eff["protocol"] == "ce":
        # bench batches must commit fully even under heavy contention, so
        # the retry cap is far above the protocol default
        result = preplay_batch(txs, snapshot, batch_id=f"ce{eff['seed']}",
                               workers=eff["executors"], seed=eff["seed"],
                               threaded=True, max_aborts=200,
                               op_delay=eff["op_delay"])
    elif eff["protocol"] == "occ":
        result = run_occ(txs, snapshot, workers=eff["executors"],
                         seed=eff["seed"], threaded=True,
                         op_delay=eff["op_delay"])
    else:
        result = run_tpl_nowait(txs, snapshot, workers=eff["executors"],
                                seed=eff["seed"], threaded=True,
                                op_delay=eff["op_delay"])
    elapsed = time.perf_counter() - started
    row = _row_base(eff)
    row.update(committed=len(result.order),
               tps=round(len(result.order) / elapsed, 3) if elapsed else 0.0,
               avg_latency_s=0.0, reexec=result.reexec_count, reconfigs=0)
    return row


def _row_base(eff: dict[str, Any]) -> dict:
    return {
        "protocol": eff["protocol"], "replicas": eff["replicas"],
        "f": eff["faults"], "executors": eff["executors"],
        "batch": eff["batch"], "theta": eff["theta"], "pr": eff["pr"],
        "cross_pct": eff["cross_pct"], "k": eff["k"],
        "k_rotate": eff["k_rotate"], "seed": eff["seed"],
    }


def _emit(row: dict, fmt: str, out) -> None:
    if fmt == "jsonl":
        out.write(json.dumps(row, sort_keys=True) + "\n")
    else:
        out.write(",".join(CSV_FIELDS) + "\n")
        out.write(",".join(str(row[k]) for k in CSV_FIELDS) + "\n")


def cmd_run(args: argparse.Namespace,
            parser: argparse.ArgumentParser) -> int:
    eff = _effective(args, parser)
    adversary = None
    if eff["scenario"] is not None:
        maker = SCENARIOS.get(eff["scenario"])
        if maker is None:
            parser.error(f"unknown scenario {eff['scenario']!r}; "
                         f"known: {sorted(SCENARIOS)}")
        eff, adversary = maker(eff)
    if eff["protocol"] not in SIM_PROTOCOLS + EXEC_PROTOCOLS:
        parser.error(f"unknown protocol {eff['protocol']!r}")
    if eff["faults"] is None:
        eff["faults"] = (eff["replicas"] - 1) // 3
    elif eff["replicas"] != 3 * eff["faults"] + 1:
        parser.error(f"replicas={eff['replicas']} inconsistent with "
                     f"faults={eff['faults']} (need replicas = 3*faults+1)")

    report = None
    if eff["protocol"] in SIM_PROTOCOLS:
        row, report = _sim_row(eff, adversary)
    else:
        row = _exec_row(eff)

    if eff["out"]:
        os.makedirs(eff["out"], exist_ok=True)
        name = "metrics.jsonl" if eff["format"] == "jsonl" else "metrics.csv"
        with open(os.path.join(eff["out"], name), "w",
                  encoding="utf-8") as fh:
            _emit(row, eff["format"], fh)
        if report is not None:
            with open(os.path.join(eff["out"], "report.json"), "w",
                      encoding="utf-8") as fh:
                fh.write(report.to_json() + "\n")
            for snap in report.replicas:
                path = os.path.join(eff["out"], f"replica-{snap['rid']}.log")
                with open(path, "w", encoding="utf-8") as fh:
                    fh.write("\n".join(snap["events"]) + "\n")
    _emit(row, eff["format"], sys.stdout)
    return 0


# -- fuzz --------------------------------------------------------------------


def _schedule_problems(txs, snapshot, seed: int, workers: int,
                       skip_read_guard: bool) -> list[str]:
    result = preplay_batch(txs, snapshot, batch_id=f"fuzz{seed}", seed=seed,
                           workers=workers, skip_read_guard=skip_read_guard)
    return oracle_check(result.order, result.txs, result.reads,
                        result.writes, result.results, snapshot)


def _shrink(txs, snapshot, seed, workers, skip_read_guard):
    """Greedy delta-debugging: drop one tx at a time while the oracle
    still complains."""
    current = list(txs)
    changed = True
    while changed and len(current) > 1:
        changed = False
        for i in range(len(current)):
            candidate = current[:i] + current[i + 1:]
            if _schedule_problems(candidate, snapshot, seed, workers,
                                  skip_read_guard):
                current = candidate
                changed = True
                break
    return current


def cmd_fuzz(args: argparse.Namespace,
             parser: argparse.ArgumentParser) -> int:
    for i in range(args.count):
        seed = args.seed + i
        txs, snapshot = random_script_batch(seed, args.max_txs,
                                            args.max_keys)
        problems = _schedule_problems(txs, snapshot, seed, args.workers,
                                      args.skip_read_guard)
        if problems:
            minimal = _shrink(txs, snapshot, seed, args.workers,
                              args.skip_read_guard)
            dump_workload(minimal, args.out)
            print(f"fuzz FAIL seed={seed} txs={len(txs)} "
                  f"minimized={len(minimal)} repro={args.out}")
            for line in problems[:5]:
                print(f"  {line}")
            print(f"  snapshot={json.dumps(snapshot, sort_keys=True)}")
            return 1
    print(f"fuzz ok count={args.count} seed={args.seed} "
          f"workers={args.workers}")
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.fn(args, parser)


if __name__ == "__main__":
    sys.exit(main())
