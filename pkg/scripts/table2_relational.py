"""Desk-scale analogue of the system comparison: video-only, concatenation and FBP
fusion, FBP with mean-pooled video, and 4-model FBP ensembles.

    python scripts/table2_relational.py --seeds 5 --out results/table2
"""

import argparse
import csv
import time
from pathlib import Path

import numpy as np

from fbpfusion.data import SyntheticSpec
from fbpfusion.experiments import DESK_TRAIN, mean_accuracy, run_systems, synthetic_samples, with_epochs
from fbpfusion.model import ensemble_mean


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=DESK_TRAIN.epochs)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--ensembles", type=int, default=3, help="number of 4-seed ensemble trials")
    ap.add_argument("--out", default="results/table2")
    args = ap.parse_args()

    spec = SyntheticSpec(seed=args.data_seed)
    train_set, test_set = synthetic_samples(spec, "train"), synthetic_samples(spec, "test")
    tc = with_epochs(DESK_TRAIN, args.epochs)
    t0 = time.time()

    def progress(r):
        print(f"{r.system:15s} seed {r.seed}: test accuracy {r.accuracy:.3f} ({time.time() - t0:.0f}s)", flush=True)

    systems = ["video", "concat", "fbp", "fbp_mean_video"]
    runs = run_systems(train_set, test_set, systems, range(args.seeds), tc, progress)
    fbp_seeds = range(4 * args.ensembles)
    extra = [s for s in fbp_seeds if s >= args.seeds]
    if extra:
        runs["fbp"] += run_systems(train_set, test_set, ["fbp"], extra, tc, progress)["fbp"]
    by_seed = {r.seed: r for r in runs["fbp"]}
    ens = [ensemble_mean([by_seed[4 * t + i].report for i in range(4)]).accuracy for t in range(args.ensembles)]
    members = [np.mean([by_seed[4 * t + i].accuracy for i in range(4)]) for t in range(args.ensembles)]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(name, mean_accuracy(runs[name][: args.seeds]), args.seeds) for name in systems]
    if args.ensembles:
        rows.append(("fbp_ensemble_of_4", float(np.mean(ens)), args.ensembles))
        rows.append(("fbp_ensemble_members", float(np.mean(members)), 4 * args.ensembles))
    with open(out / "table2.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system", "mean_test_accuracy", "n"])
        w.writerows(rows)
    print()
    for name, acc, n in rows:
        print(f"{name:22s} {100 * acc:6.2f}%  (n={n})")
    print(f"written {out / 'table2.csv'}")


if __name__ == "__main__":
    main()
