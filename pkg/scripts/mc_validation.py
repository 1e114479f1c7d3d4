"""Monte Carlo policy values against the closed form, and the dominance check.

Run: python3 scripts/mc_validation.py [--n-paths 200000] [--seed 2024]
"""

import argparse
import time

from regime_stop import extraction as ex
from regime_stop import mc
from regime_stop.model import PAPER_EXAMPLE


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-paths", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--dt-obs", type=float, default=mc.DEFAULT_DT_OBS)
    args = ap.parse_args()
    m = PAPER_EXAMPLE
    sol = ex.solve(m)
    pol = mc.ThresholdPolicy(sol.thresholds)
    print(f"{'p0':>6} {'regime':>6} {'closed':>12} {'mc':>12} {'stderr':>9} {'bias':>9} {'z':>6}  ok")
    t0 = time.perf_counter()
    for p0 in (0.5, 1.5, 5.0, 10.0, 50.0):
        for i in (0, 1):
            est = mc.estimate_policy_value(m, p0, i, pol, args.n_paths, seed=args.seed, dt_obs=args.dt_obs)
            exact = ex.evaluate_value(sol, i, p0)
            z = (est.mean - exact) / est.stderr if est.stderr else 0.0
            print(f"{p0:>6g} {i + 1:>6} {exact:>12.5f} {est.mean:>12.5f} {est.stderr:>9.2e} "
                  f"{est.truncation_bias_bound:>9.2e} {z:>6.2f}  {est.agrees_with(exact)}")
    print(f"({time.perf_counter() - t0:.1f}s)")
    perts = [(1.25, 1.0), (0.75, 1.0), (1.0, 1.25), (1.0, 0.75), mc.ThresholdPolicy.never()]
    for i in (0, 1):
        rep = mc.policy_dominance_check(m, 3.0, i, base=pol, perturbations=perts, n_paths=args.n_paths,
                                        seed=args.seed, dt_obs=args.dt_obs)
        print(f"dominance at p0=3, regime {i + 1}: passed={rep.passed}")
        for c in rep.comparisons:
            print(f"  vs ({c.policy.thresholds[0]:.4f}, {c.policy.thresholds[1]:.4f}): "
                  f"diff {c.diff:+.4f} +- {c.paired_stderr:.4f} strict={c.strict}")


if __name__ == "__main__":
    main()
