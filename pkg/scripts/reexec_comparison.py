"""Re-execution counts of the three execution engines under contention.

Same batches, same seeds, real worker threads: the dependency-graph
scheduler orders conflicting transactions instead of aborting them, so
its re-execution count should sit at or below optimistic validation and
well below no-wait locking as contention rises.
"""

import argparse
from statistics import fmean

from thunderbolt.baselines import run_occ, run_tpl_nowait
from thunderbolt.executor import preplay_batch
from thunderbolt.workload import SmallBankSpec, generate, initial_state


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--batch", type=int, default=300)
    ap.add_argument("--workers", type=int, default=16)
    ap.add_argument("--theta", type=float, default=0.85)
    ap.add_argument("--accounts", type=int, default=1000)
    # per-op pause; at 0 the interpreter lock serialises the tiny procedures
    # and no engine ever sees a concurrent conflict
    ap.add_argument("--op-delay", type=float, default=0.001)
    args = ap.parse_args()

    spec = SmallBankSpec(n_accounts=args.accounts, theta=args.theta,
                         pr=0.5, cross_pct=0, n_txs=args.batch)
    snapshot = initial_state(args.accounts)
    totals = {"ce": [], "occ": [], "tpl-nowait": []}
    print("engine,seed,reexec")
    for seed in range(args.seeds):
        txs = generate(spec, 1, seed, client="bench")
        runs = {
            "ce": preplay_batch(txs, snapshot, workers=args.workers,
                                seed=seed, threaded=True, max_aborts=200,
                                op_delay=args.op_delay),
            "occ": run_occ(txs, snapshot, workers=args.workers, seed=seed,
                           threaded=True, op_delay=args.op_delay),
            "tpl-nowait": run_tpl_nowait(txs, snapshot,
                                         workers=args.workers, seed=seed,
                                         threaded=True,
                                         op_delay=args.op_delay),
        }
        for name, result in runs.items():
            totals[name].append(result.reexec_count)
            print(f"{name},{seed},{result.reexec_count}")
    for name, counts in totals.items():
        print(f"# {name} mean reexec={fmean(counts):.1f}")


if __name__ == "__main__":
    main()
