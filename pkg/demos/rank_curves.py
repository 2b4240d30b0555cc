"""Rank ratio against dimension ratio for a few nonlinearities.

Run with ``python3 demos/rank_curves.py``. Uses 50 trials per point so it
finishes in a few seconds; the CLI's ``rank-study`` runs the full sweep.
"""
from rexrank.numerics import Nonlinearity, RankSettings
from rexrank.randnet import LayerArch, LayerKind, SweepSpec, run_sweep


def main():
    for kind in (LayerKind.CONV1X1, LayerKind.IB_DW):
        print(f"\n{kind.value}")
        print("ratio  " + "  ".join(f"{n:>8s}" for n in ("identity", "relu", "relu6", "silu")))
        curves = {n: run_sweep(SweepSpec(LayerArch(kind), Nonlinearity.parse(n), trials=50), RankSettings())
                  for n in ("identity", "relu", "relu6", "silu")}
        for i, r in enumerate(curves["relu"].ratios):
            print(f"{r:5.2f}  " + "  ".join(f"{c.means[i]:8.3f}" for c in curves.values()))


if __name__ == "__main__":
    main()
