"""Learning-rate sweep for the single-scene overfitting run.

Trains the thin network (widths / 16) on the default box room for a fixed
number of steps at each learning rate and reports final/initial loss.

    python3 scripts/overfit_toy.py --lrs 4e-4 3e-3 1e-2 --steps 200
"""

import argparse
import csv
import time

from spheredepth.network import build_network
from spheredepth.training import LossConfig, SyntheticScene, TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lrs", type=float, nargs="+", default=[4e-4, 3e-3, 1e-2])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--mr", type=int, default=5)
    ap.add_argument("--tr", type=int, default=1)
    ap.add_argument("--width-divisor", type=int, default=16)
    ap.add_argument("--loss", default="log")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", help="write per-step histories here")
    args = ap.parse_args()

    histories = {}
    for lr in args.lrs:
        net = build_network(args.mr, args.tr, seed=args.seed, width_divisor=args.width_divisor)
        cfg = TrainConfig(steps=args.steps, lr=lr, seed=args.seed, loss=LossConfig(args.loss))
        start = time.perf_counter()
        _, hist = train(net, [SyntheticScene()], cfg)
        histories[lr] = hist
        print(f"lr={lr:g}: loss {hist[0]:.4f} -> {hist[-1]:.4f} "
              f"(ratio {hist[-1] / hist[0]:.4f}) in {time.perf_counter() - start:.1f} s")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + [f"lr={lr:g}" for lr in args.lrs])
            for step in range(args.steps):
                w.writerow([step] + [histories[lr][step] for lr in args.lrs])


if __name__ == "__main__":
    main()
