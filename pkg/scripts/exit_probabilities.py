"""Sharp-flow escape fractions at the invariant law's deciles against the quadrature CDF."""

import argparse

import numpy as np

from ergoflow.coeffs import CATALOG, make_model, validate_recurrence
from ergoflow.estimators import exit_probability
from ergoflow.measures import build_measures


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--models", nargs="*", default=list(CATALOG))
    args = ap.parse_args()
    q = np.arange(0.05, 1.0, 0.1)
    for name in args.models:
        model, _ = validate_recurrence(make_model(name))
        table = build_measures(model)
        probes = table.x[np.searchsorted(table.pi_cdf, q)]
        print(f"{name}: x0, estimate, stderr, pi_cdf, z")
        for r in exit_probability(model, probes, args.n, table=table):
            d = r.diagnostics
            print(f"  {d['x0']:+.4f}  {r.value:.4f}  {r.std_error:.4f}  {d['pi_cdf']:.4f}  {d['z_score']:+.2f}")


if __name__ == "__main__":
    main()
