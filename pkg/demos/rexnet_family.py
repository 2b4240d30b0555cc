"""Costs of the ReXNet family across width multipliers.

Run with ``python3 demos/rexnet_family.py``.
"""
from rexrank.archspec import build_rexnet, build_rexnet_lite, build_rexnet_plain, fit_linear
from rexrank.costmodel import model_cost


def main():
    print(f"{'model':20s} {'params':>12s} {'macs':>14s}  slope  first..last")
    for build in (build_rexnet, build_rexnet_lite, build_rexnet_plain):
        for m in (0.5, 1.0, 1.5, 2.0):
            spec = build(m)
            r = model_cost(spec)
            fit = fit_linear(spec.channels)
            print(f"{spec.name:20s} {r.params:12,d} {r.macs:14,d}  {fit.slope:5.1f}  "
                  f"{spec.channels[0]}..{spec.channels[-1]}")


if __name__ == "__main__":
    main()
