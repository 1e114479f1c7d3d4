"""Data for the plot of Q(z) = w1(z) w2(z) - lambda1 lambda2 with its four roots.

Writes CSV (z, Q) to standard output or ``--out``; roots go to standard error.
Run: python3 scripts/plot_q_data.py [--n 801] [--out q.csv]
"""

import argparse
import csv
import sys

import numpy as np

from regime_stop import extraction as ex
from regime_stop.model import PAPER_EXAMPLE


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=801)
    ap.add_argument("--out")
    args = ap.parse_args()
    zs = ex.quartic_roots(PAPER_EXAMPLE)
    span = zs.z4 - zs.z1
    z = np.linspace(zs.z1 - 0.1 * span, zs.z4 + 0.1 * span, args.n)
    q = ex.quartic(PAPER_EXAMPLE, z)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh, lineterminator="\r\n")
    w.writerow(["z", "Q"])
    w.writerows(zip(map(repr, z.tolist()), map(repr, q.tolist())))
    if args.out:
        fh.close()
    print("roots: " + ", ".join(f"{r:.6f}" for r in zs.z), file=sys.stderr)


if __name__ == "__main__":
    main()
