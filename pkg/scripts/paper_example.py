"""Worked two-regime example: closed form, grid cross-check and the isolated regimes.

Run: python3 scripts/paper_example.py
"""

import time

from regime_stop import extraction as ex
from regime_stop.model import PAPER_EXAMPLE
from regime_stop.regime import x_roots
from regime_stop.verify import local_spacing
from regime_stop.vi import extraction_problem, solve_vi


def main():
    m = PAPER_EXAMPLE
    x1, x2 = x_roots(m)
    print(f"x1 = {x1:.6f}  x2 = {x2:.6f}  r = {m.r}  rK = {m.r * m.K}")
    t0 = time.perf_counter()
    sol = ex.solve(m)
    print(f"{sol.classification.value} {sol.case.value}: thresholds "
          f"({sol.thresholds[0]:.6f}, {sol.thresholds[1]:.6f}) in {time.perf_counter() - t0:.3f}s")
    print("exponents z =", ", ".join(f"{z:.6f}" for z in sol.exponents.z))
    print(f"never-stop slopes k1 = {sol.k1:.6f}, k2 = {sol.k2:.6f}")
    for name, c in sol.coefficients.items():
        print(f"  {name:8s} {c: .10g}")

    t0 = time.perf_counter()
    grid = solve_vi(extraction_problem(m), 4000)
    print(f"grid n=4000 thresholds ({grid.thresholds[0]:.6f}, {grid.thresholds[1]:.6f}) "
          f"in {time.perf_counter() - t0:.3f}s")
    for i in (0, 1):
        h = local_spacing(grid.grid, sol.thresholds[i])
        print(f"  regime {i + 1}: gap {abs(grid.thresholds[i] - sol.thresholds[i]):.2e}, spacing {h:.2e}")

    print("isolated regimes (no switching):")
    for mu in (m.mu1, m.mu2):
        s = ex.single_regime_threshold(mu, m.sigma1, m.r, m.C, m.K)
        star = "" if s.p_star is None else f" threshold {s.p_star:.6f}"
        print(f"  mu = {mu:.2f}: {s.classification.value}{star}")


if __name__ == "__main__":
    main()
