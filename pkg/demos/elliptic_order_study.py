"""Check the leftover orders of the estimates as the models converge.

We shrink the nonlinearity of the fine elliptic model by scaling alpha with
a homotopy parameter s. As s drops, the fine model approaches the coarse
one and the exact QoI error goes to zero. A first-order estimate should
leave a deficit that shrinks quadratically with the error itself (log-log
slope near 2); the second-order variants should never do worse than that
at any level. The study prints the per-level table and the fitted slopes.
"""

from goalcalib import EllipticFineParams, EllipticModelPair, build_mesh, order_study

mesh = build_mesh(50, 50)
base = EllipticFineParams(kappa=0.25, alpha=10.0)


def pair_at(s):
    return EllipticModelPair(mesh, fine=EllipticFineParams(base.kappa, s * base.alpha))


result = order_study(pair_at, levels=(1.0, 0.5, 0.25, 0.125))

print(f"{'s':>6s} {'exact error':>13s} {'1st-order deficit':>18s} {'2nd-order deficit':>18s}")
for k, s in enumerate(result.levels):
    print(
        f"{s:6.3f} {result.exact_errors[k]:+13.6f} "
        f"{result.deficits['error_qoi_first_order'][k]:18.2e} "
        f"{result.deficits['error_qoi_second_order'][k]:18.2e}"
    )

print("\nfitted log-log slopes (deficit vs exact error):")
for name, slope in sorted(result.slopes.items()):
    print(f"  {name:<24s} {slope:5.2f}")
