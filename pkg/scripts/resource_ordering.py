"""Forward-pass wall time and peak traced memory per (MR, TR) setting.

    python3 scripts/resource_ordering.py --configs 5,1 5,2 6,1 --repeats 10
"""

import argparse
import time
import tracemalloc

import numpy as np

from spheredepth.network import build_network, forward


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--configs", nargs="+", default=["5,1", "5,2", "6,1"])
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--width-divisor", type=int, default=1)
    args = ap.parse_args()

    configs = [tuple(int(v) for v in c.split(",")) for c in args.configs]
    runs = {}
    for m, t in configs:
        net = build_network(m, t, width_divisor=args.width_divisor)
        x = np.random.default_rng(0).normal(size=(1, 20 * 4 ** m, 3 * 4 ** t)).astype(np.float32)
        forward(net, x)
        runs[m, t] = (net, x)

    times = {c: [] for c in configs}
    for _ in range(args.repeats):
        for c in configs:                 # interleaved so drift hits every setting
            start = time.perf_counter()
            forward(*runs[c])
            times[c].append(time.perf_counter() - start)

    print(f"{'MR,TR':>6} {'faces':>7} {'min ms':>8} {'median ms':>10} {'peak MiB':>9}")
    for c in configs:
        tracemalloc.start()
        forward(*runs[c])
        peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
        t = np.array(times[c]) * 1000
        print(f"{c[0]:>4},{c[1]} {20 * 4 ** c[0]:>7} {t.min():>8.1f} {np.median(t):>10.1f} "
              f"{peak / 2 ** 20:>9.1f}")


if __name__ == "__main__":
    main()
