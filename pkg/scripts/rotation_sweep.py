"""Cost of periodic proposer rotation.

Short rotation periods force frequent DAG handovers; every handover
discards in-flight speculative work and stalls the affected clients
until retransmission, so throughput drops against a run where rotation
is effectively disabled.
"""

import argparse
from statistics import fmean

from thunderbolt.sim import SimConfig, run_sim


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--periods", type=int, nargs="+",
                    default=[10, 20, 50, 1000])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--txs", type=int, default=900)
    args = ap.parse_args()

    print("k_rotate,seed,committed,tps,reconfigs")
    for period in args.periods:
        tpss = []
        for seed in range(args.seeds):
            cfg = SimConfig(n=4, f=1, total_txs=args.txs, batch_size=100,
                            cross_pct=0, seed=seed, k_rotate=period,
                            arrival_rate=300.0, retry_every=0.5)
            rep = run_sim(cfg)
            tpss.append(rep.tps)
            print(f"{period},{seed},{rep.committed},{rep.tps:.1f},"
                  f"{rep.reconfigs}")
        print(f"# k_rotate={period} mean tps={fmean(tpss):.1f}")


if __name__ == "__main__":
    main()
