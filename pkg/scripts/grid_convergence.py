"""Grid thresholds and values against the closed form over a sequence of resolutions.

Run: python3 scripts/grid_convergence.py [--n 500 1000 2000 4000 8000 16000]
"""

import argparse

import numpy as np

from regime_stop import extraction as ex
from regime_stop.model import PAPER_EXAMPLE
from regime_stop.verify import interior_mask, local_spacing
from regime_stop.vi import extraction_problem, richardson_threshold, single_regime_problem, solve_vi


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[500, 1000, 2000, 4000, 8000, 16000])
    args = ap.parse_args()
    m = PAPER_EXAMPLE
    domain = (0.01, 200.0)
    sol = ex.solve(m)
    problem = extraction_problem(m, domain)
    print(f"closed form thresholds ({sol.thresholds[0]:.6f}, {sol.thresholds[1]:.6f})")
    print(f"{'n':>6} {'p1*':>10} {'gap1/h':>7} {'p2*':>10} {'gap2/h':>7} {'value err':>10}")
    for n in args.n:
        g = solve_vi(problem, n)
        inner = interior_mask(g.grid, domain)
        err = max(np.max(np.abs(g.v[i, inner] - ex.evaluate_value(sol, i, g.grid[inner]))
                         / (1 + np.abs(g.v[i, inner]))) for i in (0, 1))
        ratios = [abs(g.thresholds[i] - sol.thresholds[i]) / local_spacing(g.grid, sol.thresholds[i])
                  for i in (0, 1)]
        print(f"{n:>6} {g.thresholds[0]:>10.6f} {ratios[0]:>7.2f} {g.thresholds[1]:>10.6f} {ratios[1]:>7.2f} "
              f"{err:>10.2e}")
    if len(args.n) >= 3:
        r = richardson_threshold(problem, args.n[-3:])
        print(f"Richardson over {r.n_sequence}: ({r.estimate[0]:.5f} +- {r.spread[0]:.5f}, "
              f"{r.estimate[1]:.5f} +- {r.spread[1]:.5f})")
    target = ex.single_regime_threshold(0.01, 0.25, 0.08, 20, 5).p_star
    r = richardson_threshold(single_regime_problem(0.01, 0.25, 0.08, 20, 5), (4000, 8000, 16000))
    print(f"isolated mu=0.01 regime: grid Richardson {r.estimate[0]:.5f} +- {r.spread[0]:.5f}, "
          f"closed form {target:.5f}")


if __name__ == "__main__":
    main()
