"""Throughput as the cross-shard share of the workload grows.

Cross-shard transactions execute at commit on every replica and block
same-shard preplay while pending, so raising their share shifts work
from the parallel preplay path onto the serialized post-commit path and
throughput falls toward the all-cross floor.
"""

import argparse
from statistics import fmean

from thunderbolt.sim import SimConfig, run_sim


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ratios", type=int, nargs="+",
                    default=[0, 10, 25, 50, 75, 100])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--replicas", type=int, default=4)
    ap.add_argument("--txs", type=int, default=300)
    args = ap.parse_args()

    print("cross_pct,seed,committed,tps")
    for pct in args.ratios:
        tpss = []
        for seed in range(args.seeds):
            cfg = SimConfig(n=args.replicas, f=(args.replicas - 1) // 3,
                            total_txs=args.txs, batch_size=50,
                            cross_pct=pct, seed=seed)
            rep = run_sim(cfg)
            tpss.append(rep.tps)
            print(f"{pct},{seed},{rep.committed},{rep.tps:.1f}")
        print(f"# cross_pct={pct} mean tps={fmean(tpss):.1f}")


if __name__ == "__main__":
    main()
