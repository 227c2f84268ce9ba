"""Throughput of the sharded protocol against serial post-order execution.

Runs both protocols on identical workloads across replica counts and
seeds, printing one CSV row per run plus per-protocol means.  The single
workload knob that matters here is cross_pct=0: every transaction stays
on one shard, so the comparison isolates where execution happens
(preplayed on proposers vs serially after commit).
"""

import argparse
from statistics import fmean

from thunderbolt.sim import SimConfig, run_sim


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--replicas", type=int, nargs="+", default=[4, 8])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--txs", type=int, default=600)
    ap.add_argument("--batch", type=int, default=100)
    args = ap.parse_args()

    print("protocol,replicas,seed,committed,tps")
    for n in args.replicas:
        means = {}
        for proto in ("thunderbolt", "tusk-serial"):
            tpss = []
            for seed in range(args.seeds):
                cfg = SimConfig(protocol=proto, n=n, f=(n - 1) // 3,
                                total_txs=args.txs, batch_size=args.batch,
                                cross_pct=0, seed=seed)
                rep = run_sim(cfg)
                tpss.append(rep.tps)
                print(f"{proto},{n},{seed},{rep.committed},{rep.tps:.1f}")
            means[proto] = fmean(tpss)
        ratio = means["thunderbolt"] / means["tusk-serial"]
        print(f"# n={n} mean thunderbolt={means['thunderbolt']:.1f} "
              f"tusk-serial={means['tusk-serial']:.1f} ratio={ratio:.2f}")


if __name__ == "__main__":
    main()
