"""A small channel search at 5 blocks under 0.2M params and 30M MACs.

Run with ``python3 demos/small_search.py``. Scores are the random-network
rank surrogate, so the ranking says nothing about trained accuracy.
"""
from rexrank.archspec import fit_linear
from rexrank.costmodel import Budget
from rexrank.search import RankScore, SearchSpec, format_channels, run_search


def main():
    spec = SearchSpec(5, Budget(200_000, 30_000_000), num_candidates=40, fitness=RankScore(trials=8))
    run = run_search(spec)
    for name, bucket in run.deciles.items():
        fit = fit_linear(bucket.mean_channels)
        print(f"{name:8s} score={bucket.mean_score:.3f} channels="
              f"{format_channels(round(c) for c in bucket.mean_channels)} slope={fit.slope:.1f}")
    print(f"best {format_channels(run.best.channels)} params={run.best.cost.params} macs={run.best.cost.macs}")


if __name__ == "__main__":
    main()
