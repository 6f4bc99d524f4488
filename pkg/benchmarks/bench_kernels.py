"""Time every hot kernel under numba and under the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Both paths get identical inputs; the script also checks their outputs agree.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from tatu import _accel, kernels
from tatu.envs import make_tabular_mdp, random_policy
from tatu.theory import perturb_rows
from tatu.truncation import build_pessimistic_tabular


def _cases(scale: float):
    rng = np.random.default_rng(0)
    m = make_tabular_mdp(8, 4, 0.9, 1.0, seed=0)
    pi = random_policy(8, 4, rng)
    cP, cpi, crho = np.cumsum(m.P, -1), np.cumsum(pi, -1), np.cumsum(m.rho0)
    n_roll = int(1_000_000 * scale)
    unif = rng.random((n_roll, 3))
    P_hat = perturb_rows(m.P, 0.2, rng)
    mp, mh = build_pessimistic_tabular(m, P_hat, m.rho0, 1.0, 0.5, 0.3, resolution=1000)
    n_ep = int(20_000 * scale)
    starts, mc_unif = rng.random(n_ep), rng.random((n_ep, 120, 2))
    u = rng.random((int(200_000 * scale), 10)) * 0.1
    return {
        "tabular_rollout": (kernels.tabular_rollout, (cP, cpi, crho, 10, unif)),
        "budget_mc_returns": (kernels.budget_mc_returns,
                              (np.cumsum(mh.P, -1), cpi, np.cumsum(mh.rho0), mh.r_pen, mh.u, 0.5, 0.9, 0.3,
                               starts, mc_unif)),
        "budget_reachable": (kernels.budget_reachable, (mp.nxt, mp.P > 0, mp.rho0 > 0, mp.grid.start_bin)),
        "truncation_scan": (kernels.truncation_scan, (u, np.ones(10), 0.45)),
    }


def _time(fn, args, impl, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(*args, impl=impl)
        best = min(best, time.perf_counter() - t)
    return best, out


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--scale", type=float, default=1.0, help="multiply the problem sizes")
    args = p.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':<20} {'numba (s)':>10} {'numpy (s)':>10} {'speedup':>8}  match")
    for name, (fn, fargs) in _cases(args.scale).items():
        fn(*fargs, impl="numba")  # compile outside the timed region
        t_nb, o_nb = _time(fn, fargs, "numba", args.repeat)
        t_np, o_np = _time(fn, fargs, "numpy", args.repeat)
        print(f"{name:<20} {t_nb:>10.4f} {t_np:>10.4f} {t_np / t_nb:>7.1f}x  {_same(o_nb, o_np)}")


if __name__ == "__main__":
    main()
