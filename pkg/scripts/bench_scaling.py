"""Sampling wall-time scaling in the number of filtration steps and in n.

Times rollouts at a list of T values and two graph sizes, fits the T curve
with a quadratic, and prints the per-point medians. Attention over the
(node, step) grid makes a causal-attention model quadratic in T while the
markovian variant stays flat.
"""

import argparse

import numpy as np

from anfm.evaluation import bench_sampling, quadratic_fit
from anfm.model import ModelConfig, init_params


def bench(temporal, n, t_list, rollouts, rng):
    mc = ModelConfig(n_max=2 * n, hidden=32, layers=2, mixture=2,
                     steps=max(t_list), temporal=temporal)
    params = init_params(mc, rng)
    points = bench_sampling(params, mc, n, t_list, rollouts=rollouts, rng=rng)
    for p in points:
        print(f"  T={p.steps:3d}  median {p.median * 1e3:8.2f} ms  "
              f"mad {p.mad * 1e3:6.2f} ms")
    if len(points) >= 3:
        const, lin, quad = quadratic_fit(points)
        print(f"  fit: {quad:.3e}*T^2 + {lin:.3e}*T + {const:.3e}")
    return points


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=24)
    ap.add_argument("--t-list", default="2,4,8,16")
    ap.add_argument("--rollouts", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    t_list = [int(t) for t in args.t_list.split(",")]
    rng = np.random.default_rng(args.seed)

    for temporal in ("causal", "first_order"):
        print(f"{temporal}, n={args.n}:")
        bench(temporal, args.n, t_list, args.rollouts, rng)
    print(f"causal, n={2 * args.n} (doubled):")
    bench("causal", 2 * args.n, t_list, args.rollouts, rng)


if __name__ == "__main__":
    main()
