"""Moments of h-period earnings growth on a simulated T=10 panel.

    python scripts/growth_moments.py --transitory laplace
"""

import argparse

from lmp import experiments as ex


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=4)
    parser.add_argument("--households", type=int, default=10_000)
    parser.add_argument("--transitory", choices=["gaussian", "laplace"], default="laplace")
    parser.add_argument("--null", action="store_true", help="i.i.d. Gaussian panel (no persistent shocks)")
    args = parser.parse_args()

    if args.null:
        growth = ex.iid_null_panel(args.households, seed=args.seed)
    else:
        growth = ex.growth_panel(args.transitory, args.households, seed=args.seed)
    print("  h  variance  skewness  kurtosis  arch_slope  arch_se")
    for h, g in sorted(growth.items()):
        arch = "" if g.arch_slope is None else f"{g.arch_slope:+11.4f}  {g.arch_se:7.4f}"
        print(f"{h:3d} {g.variance:9.4f} {g.skewness:+9.3f} {g.kurtosis:9.3f} {arch}")


if __name__ == "__main__":
    main()
