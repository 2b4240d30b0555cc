"""Budget-constrained random search over piecewise-linear channel configurations.

A candidate is a non-decreasing width sequence ``c_1..c_d`` drawn as a
piecewise-linear function of the block index, built into a small proxy
network (stride-1 stem of 16, expansion-6 inverted bottlenecks, a
penultimate 1x1 and a classifier at 32x32 input) and kept only if it fits
the budget. Scored candidates are ranked and summarized by top, middle and
bottom decile buckets.

Two fitness sources are available:

* :class:`RankScore`: mean rank ratio of the final feature of random-weight
  instantiations of the candidate's block chain. A cheap surrogate for
  trained accuracy, not a claim of equivalence.
* :class:`External`: a file exchange with an out-of-process evaluator.
  ``candidates.json`` is written, ``scores.json`` is awaited and joined by id.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .costmodel import Budget, CostReport, check_budget, model_cost
from .modelspec import BlockKind, BlockSpec, HeadSpec, ModelSpec, PenultimateSpec, Shortcut, StemSpec
from .numerics import Nonlinearity, RankSettings, round_half_away
from .randnet import LayerArch, LayerKind, default_batch, forward_and_rank, sample_network

__all__ = [
    "RankScore",
    "External",
    "SearchSpec",
    "Pieces",
    "Candidate",
    "Bucket",
    "SearchRun",
    "SearchInfeasible",
    "ScoreExchangeError",
    "proxy_strides",
    "proxy_spec",
    "sample_candidate",
    "sample_candidates",
    "score_candidates",
    "rank_score",
    "aggregate",
    "run_search",
    "emit_run",
    "serve_scores",
    "format_channels",
    "budget_sweep",
]

MIN_WIDTH = 8
MAX_ATTEMPTS = 10_000
# stage strides of the proxy skeleton, compressed to the candidate depth
PROXY_STAGE_STRIDES = (1, 1, 2, 2, 2)
ZERO_SLOPE_PROB = 0.25
REL_SLOPE_RANGE = (0.01, 1.0)


@dataclass(frozen=True)
class RankScore:
    """Surrogate fitness settings.

    The rank tolerance is looser than the analysis default: at ``1e-2``
    nearly every budget-filling candidate saturates at ratio 1.0 and the
    score stops discriminating. ``spatial=4`` matches the 4x4 final map of
    the 32x32 proxy skeleton.
    """

    trials: int = 16
    settings: RankSettings = RankSettings(0.3)
    nonlinearity: str = "relu6"
    spatial: int = 4

    def __post_init__(self):
        if self.trials < 8:
            raise ValueError(f"RankScore needs trials >= 8, got {self.trials}")


@dataclass(frozen=True)
class External:
    exchange_dir: str
    timeout: float = 3600.0
    poll_interval: float = 0.05


@dataclass(frozen=True)
class SearchSpec:
    depth_d: int
    budget: Budget
    num_candidates: int = 200
    max_pieces: int = 3
    stem: int = 16
    resolution: int = 32
    fitness: RankScore | External = RankScore()
    master_seed: int = 42
    penultimate: int = 512
    num_classes: int = 100
    min_fill: float = 0.9

    def __post_init__(self):
        if self.depth_d < 1:
            raise ValueError(f"depth must be positive, got {self.depth_d}")
        if self.num_candidates < 10:
            raise ValueError(f"num_candidates must be >= 10 so every decile is nonempty, got {self.num_candidates}")
        if self.max_pieces < 1:
            raise ValueError(f"max_pieces must be >= 1, got {self.max_pieces}")
        if self.stem < 1 or self.resolution < 1:
            raise ValueError("stem and resolution must be positive")
        if not 0.0 <= self.min_fill <= 1.0:
            raise ValueError(f"min_fill must be in [0, 1], got {self.min_fill}")
        if self.budget.max_params is None and self.budget.max_macs is None:
            raise ValueError("search needs at least one bounded budget dimension")


@dataclass(frozen=True)
class Pieces:
    """Piecewise-linear width function.

    ``c(1) = intercept`` and, on piece ``j`` (blocks after ``breakpoints[j-1]``
    up to ``breakpoints[j]``), the width grows by ``slopes[j]`` per block.
    """

    breakpoints: tuple[int, ...]
    slopes: tuple[float, ...]
    intercept: float

    def values(self, d: int) -> np.ndarray:
        out = np.empty(d)
        out[0] = self.intercept
        bounds = list(self.breakpoints) + [d]
        piece = 0
        for i in range(2, d + 1):
            while i > bounds[piece]:
                piece += 1
            out[i - 1] = out[i - 2] + self.slopes[piece]
        return out

    def to_dict(self) -> dict:
        return {"breakpoints": list(self.breakpoints), "slopes": list(self.slopes), "intercept": self.intercept}


@dataclass(frozen=True)
class Candidate:
    id: int
    channels: tuple[int, ...]
    pieces: Pieces
    cost: CostReport
    score: float | None = None


class SearchInfeasible(RuntimeError):
    """No budget-feasible candidate could be drawn; ``nearest`` holds the closest costs seen."""

    def __init__(self, message: str, nearest: CostReport | None = None):
        super().__init__(message)
        self.nearest = nearest


class ScoreExchangeError(RuntimeError):
    pass


# --- proxy skeleton ----------------------------------------------------------------


def proxy_strides(d: int) -> list[int]:
    """Split ``d`` blocks into at most five stages; each stage's first block takes the stage stride."""
    k = min(len(PROXY_STAGE_STRIDES), d)
    sizes = [d // k + (1 if i < d % k else 0) for i in range(k)]
    out = []
    for s, n in zip(PROXY_STAGE_STRIDES[:k], sizes):
        out += [s] + [1] * (n - 1)
    return out


def proxy_spec(channels: Sequence[int], *, stem: int = 16, penultimate: int | None = 512,
               classes: int = 100) -> ModelSpec:
    blocks = []
    c_in = stem
    for c, s in zip(channels, proxy_strides(len(channels))):
        shortcut = Shortcut.ZERO_PAD if s == 1 and c >= c_in else Shortcut.NONE
        blocks.append(BlockSpec(BlockKind.INVERTED_BOTTLENECK, int(c), s, 6.0, False, "relu6", "relu6", shortcut))
        c_in = c
    pen = None if penultimate is None else PenultimateSpec(penultimate, "relu6")
    return ModelSpec("proxy", StemSpec(stem, 1, "relu6"), blocks, pen, HeadSpec(classes))


def _cost(spec: SearchSpec, channels: Sequence[int]) -> CostReport:
    return model_cost(proxy_spec(channels, stem=spec.stem, penultimate=spec.penultimate, classes=spec.num_classes),
                      spec.resolution)


def _round(values: np.ndarray) -> tuple[int, ...]:
    out = []
    for v in values:
        c = round_half_away(float(v))
        out.append(max(c, out[-1]) if out else c)
    return tuple(out)


def _fills(spec: SearchSpec, r: CostReport) -> list[float]:
    b = spec.budget
    return [x / m for x, m in ((r.params, b.max_params), (r.macs, b.max_macs)) if m is not None]


# --- sampling ----------------------------------------------------------------------


def _max_constant_width(spec: SearchSpec) -> int:
    lo = MIN_WIDTH
    if not check_budget(_cost(spec, [lo] * spec.depth_d), spec.budget):
        return lo - 1
    hi = lo * 2
    while check_budget(_cost(spec, [hi] * spec.depth_d), spec.budget):
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        lo, hi = (mid, hi) if check_budget(_cost(spec, [mid] * spec.depth_d), spec.budget) else (lo, mid)
    return lo


def _max_line_slope(spec: SearchSpec) -> float:
    """Steepest feasible single line starting at the minimum width."""
    d = spec.depth_d

    def fits(a: float) -> bool:
        return check_budget(_cost(spec, _round(MIN_WIDTH + a * np.arange(d))), spec.budget)

    lo, hi = 0.0, 1.0
    while fits(hi):
        lo, hi = hi, hi * 2
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if fits(mid) else (lo, mid)
    return lo


def _draw_shape(spec: SearchSpec, rng: np.random.Generator, c_max: int) -> tuple[tuple[int, ...], np.ndarray, float]:
    d = spec.depth_d
    k = int(rng.integers(1, min(spec.max_pieces, d) + 1))
    breaks = tuple(sorted(int(x) for x in rng.choice(np.arange(2, d + 1), size=k - 1, replace=False))) \
        if k > 1 else ()
    lo, hi = np.log(REL_SLOPE_RANGE[0]), np.log(REL_SLOPE_RANGE[1])
    rel = np.array([0.0 if rng.random() < ZERO_SLOPE_PROB else float(np.exp(rng.uniform(lo, hi)))
                    for _ in range(k)])
    intercept = float(rng.uniform(MIN_WIDTH, c_max))
    return breaks, rel, intercept


def sample_candidate(spec: SearchSpec, seed, *, candidate_id: int = 0) -> Candidate:
    """Draw one budget-feasible candidate by bounded rejection sampling.

    Each attempt draws a piece count ``k`` in ``1..max_pieces``, ``k - 1``
    breakpoints from ``{2..d}``, relative per-piece slopes (zero with
    probability 1/4, otherwise log-uniform on ``[0.01, 1]``) and a base width
    uniform on ``[8, w_max]``, where ``w_max`` is the widest affordable
    constant configuration. A common slope scale is then pushed as far as the
    budget allows, but never past the point where the steepest piece matches
    the steepest feasible single line from width 8. The attempt is kept if
    every bounded cost reaches ``min_fill`` of its bound.

    Raises
    ------
    SearchInfeasible
        When even all-minimum widths break the budget, or after 10,000
        rejected attempts.
    """
    rng = np.random.default_rng(seed)
    c_max = _max_constant_width(spec)
    d = spec.depth_d
    if c_max < MIN_WIDTH:
        r = _cost(spec, [MIN_WIDTH] * d)
        raise SearchInfeasible(f"budget infeasible at depth {d}: minimum widths already cost "
                               f"params={r.params}, macs={r.macs}", r)
    slope_max = _max_line_slope(spec)
    nearest, nearest_fill = None, -1.0
    for _ in range(MAX_ATTEMPTS):
        breaks, rel, intercept = _draw_shape(spec, rng, c_max)

        def channels_at(scale: float) -> tuple[int, ...]:
            return _round(Pieces(breaks, tuple(rel * scale), intercept).values(d))

        def fits(scale: float) -> bool:
            return check_budget(_cost(spec, channels_at(scale)), spec.budget)

        if not fits(0.0):
            continue
        lo = 0.0
        if rel.any():
            cap = slope_max / float(rel.max())
            if fits(cap):
                lo, hi = cap, cap
            else:
                hi = cap
            for _ in range(30 if hi > lo else 0):
                mid = 0.5 * (lo + hi)
                lo, hi = (mid, hi) if fits(mid) else (lo, mid)
        scale = lo
        channels = channels_at(scale)
        report = _cost(spec, channels)
        fill = min(_fills(spec, report))
        if fill > nearest_fill:
            nearest, nearest_fill = report, fill
        if fill >= spec.min_fill:
            pieces = Pieces(breaks, tuple(float(s) for s in rel * scale), intercept)
            return Candidate(candidate_id, channels, pieces, report)
    raise SearchInfeasible(f"no candidate reached {spec.min_fill:.0%} of the budget in {MAX_ATTEMPTS} attempts; "
                           f"best seen params={nearest.params}, macs={nearest.macs}", nearest)


def _candidate_seed(master_seed: int, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(0, i))


def sample_candidates(spec: SearchSpec, *, workers: int = 1) -> list[Candidate]:
    def one(i: int) -> Candidate:
        return sample_candidate(spec, _candidate_seed(spec.master_seed, i), candidate_id=i)

    ids = range(spec.num_candidates)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, ids))
    return [one(i) for i in ids]


# --- scoring -----------------------------------------------------------------------


def rank_score(channels: Sequence[int], fitness: RankScore, *, stem: int = 16, master_seed: int = 42) -> float:
    """Mean final-feature rank ratio of random-weight IB-dw chains with the given widths.

    Trial ``t`` uses the same seeds for every candidate (common random
    numbers), so identical channel lists score identically.
    """
    arch = LayerArch(LayerKind.IB_DW, 6.0)
    f = Nonlinearity.parse(fitness.nonlinearity)
    d_out = channels[-1]
    batch = default_batch(arch.kind, d_out, fitness.spatial)
    total = 0.0
    for t in range(fitness.trials):
        chain = []
        d_in = min(stem, channels[0])
        for i, c in enumerate(channels):
            seed = np.random.SeedSequence(entropy=master_seed, spawn_key=(1, t, i))
            chain.append(sample_network(arch, d_in, c, seed))
            d_in = c
        x_seed = np.random.SeedSequence(entropy=master_seed, spawn_key=(2, t))
        total += forward_and_rank(chain, f, batch, fitness.settings, x_seed, spatial=fitness.spatial).rank_ratio
    return total / fitness.trials


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def _exchange(cands: Sequence[Candidate], fitness: External, run_id: str) -> dict[int, float]:
    root = Path(fitness.exchange_dir)
    root.mkdir(parents=True, exist_ok=True)
    scores_path = root / "scores.json"
    if scores_path.exists():
        scores_path.unlink()
    doc = {"run_id": run_id,
           "candidates": [{"id": c.id, "channels": list(c.channels), "params": c.cost.params, "macs": c.cost.macs}
                          for c in cands]}
    _atomic_write(root / "candidates.json", json.dumps(doc, indent=2) + "\n")
    deadline = time.monotonic() + fitness.timeout
    while not scores_path.exists():
        if time.monotonic() > deadline:
            raise TimeoutError(f"no {scores_path} after {fitness.timeout:g} s")
        time.sleep(fitness.poll_interval)
    try:
        reply = json.loads(scores_path.read_text(encoding="utf-8"))
        if reply.get("run_id") != run_id:
            raise ScoreExchangeError(f"{scores_path}: run_id {reply.get('run_id')!r} does not match {run_id!r}")
        entries = reply["scores"]
        scores = {}
        for e in entries:
            cid, s = e["id"], e["score"]
            if isinstance(cid, bool) or not isinstance(cid, int):
                raise ScoreExchangeError(f"{scores_path}: non-integer id {cid!r}")
            if isinstance(s, bool) or not isinstance(s, (int, float)) or not math.isfinite(s):
                raise ScoreExchangeError(f"{scores_path}: non-finite score for id {cid}: {s!r}")
            scores[cid] = float(s)
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise ScoreExchangeError(f"malformed {scores_path}: {exc}") from None
    missing = sorted({c.id for c in cands} - scores.keys())
    if missing:
        raise ScoreExchangeError(f"{scores_path} lacks scores for ids {missing[:10]}"
                                 + (" ..." if len(missing) > 10 else ""))
    return scores


def score_candidates(cands: Sequence[Candidate], fitness: RankScore | External, *, stem: int = 16,
                     master_seed: int = 42, run_id: str = "run", workers: int = 1) -> list[Candidate]:
    """Attach scores to candidates; results are keyed by candidate id, never completion order."""
    if isinstance(fitness, External):
        scores = _exchange(cands, fitness, run_id)
    else:
        # common random numbers make the score a pure function of the widths
        memo: dict[tuple[int, ...], float] = {}

        def one(c: Candidate) -> tuple[int, float]:
            if c.channels not in memo:
                memo[c.channels] = rank_score(c.channels, fitness, stem=stem, master_seed=master_seed)
            return c.id, memo[c.channels]

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                scores = dict(pool.map(one, cands))
        else:
            scores = dict(one(c) for c in cands)
    return [replace(c, score=scores[c.id]) for c in cands]


def serve_scores(exchange_dir: str | os.PathLike, scorer: Callable[[dict], float], *,
                 timeout: float = 60.0, poll_interval: float = 0.02) -> threading.Thread:
    """Start a background evaluator that answers one ``candidates.json`` with ``scores.json``.

    ``scorer`` receives each candidate record (id, channels, params, macs).
    Useful as a stand-in for an external trainer.
    """
    root = Path(exchange_dir)

    def work():
        path = root / "candidates.json"
        deadline = time.monotonic() + timeout
        while not path.exists():
            if time.monotonic() > deadline:
                return
            time.sleep(poll_interval)
        doc = json.loads(path.read_text(encoding="utf-8"))
        reply = {"run_id": doc["run_id"],
                 "scores": [{"id": c["id"], "score": float(scorer(c))} for c in doc["candidates"]]}
        _atomic_write(root / "scores.json", json.dumps(reply, indent=2) + "\n")

    th = threading.Thread(target=work, daemon=True)
    th.start()
    return th


# --- aggregation -------------------------------------------------------------------


@dataclass(frozen=True)
class Bucket:
    name: str
    members: tuple[int, ...]
    mean_channels: tuple[float, ...]
    std_channels: tuple[float, ...]
    mean_score: float
    std_score: float


@dataclass(frozen=True)
class SearchRun:
    spec: SearchSpec | None
    candidates: tuple[Candidate, ...]
    ranking: tuple[int, ...]
    deciles: dict[str, Bucket]
    best: Candidate
    worst: Candidate

    def by_id(self, cid: int) -> Candidate:
        return self._index[cid]

    @property
    def _index(self) -> dict[int, Candidate]:
        return {c.id: c for c in self.candidates}


def _bucket(name: str, members: Sequence[Candidate]) -> Bucket:
    ch = np.array([c.channels for c in members], dtype=np.float64)
    sc = np.array([c.score for c in members], dtype=np.float64)
    return Bucket(name, tuple(c.id for c in members), tuple(ch.mean(axis=0).tolist()), tuple(ch.std(axis=0).tolist()),
                  float(sc.mean()), float(sc.std()))


def aggregate(cands: Sequence[Candidate], spec: SearchSpec | None = None) -> SearchRun:
    """Rank scored candidates and form the decile buckets.

    Order is descending score, then fewer params, then lower id. With
    ``m = round(0.1 n)`` the buckets are ranks ``1..m`` (top10),
    ``floor(n/2)+1 .. floor(n/2)+m`` (mid10) and the last ``m`` (bottom10).
    """
    cands = list(cands)
    n = len(cands)
    if n == 0:
        raise ValueError("nothing to aggregate")
    unscored = [c.id for c in cands if c.score is None]
    if unscored:
        raise ValueError(f"unscored candidates: {unscored[:10]}")
    order = sorted(cands, key=lambda c: (-c.score, c.cost.params, c.id))
    m = max(1, round_half_away(0.1 * n))
    half = n // 2
    buckets = {
        "top10": _bucket("top10", order[:m]),
        "mid10": _bucket("mid10", order[half:half + m]),
        "bottom10": _bucket("bottom10", order[n - m:]),
    }
    return SearchRun(spec, tuple(cands), tuple(c.id for c in order), buckets, order[0], order[-1])


def run_search(spec: SearchSpec, *, workers: int = 1, run_id: str | None = None) -> SearchRun:
    cands = sample_candidates(spec, workers=workers)
    rid = run_id or f"seed{spec.master_seed}-d{spec.depth_d}-n{spec.num_candidates}"
    scored = score_candidates(cands, spec.fitness, stem=spec.stem, master_seed=spec.master_seed, run_id=rid,
                              workers=workers)
    return aggregate(scored, spec)


# --- output ------------------------------------------------------------------------


def format_channels(channels: Sequence[int]) -> str:
    return "-".join(str(int(c)) for c in channels)


def _fmt(x: float) -> str:
    return format(x, ".9g")


def _csv_text(rows: list[list], metadata: dict | None) -> str:
    buf = io.StringIO()
    if metadata:
        # one space-separated comment line, so values with spaces are joined by underscores
        buf.write("# " + " ".join(f"{k}={str(v).replace(' ', '_')}" for k, v in metadata.items()) + "\n")
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def emit_run(run: SearchRun, out_dir: str | os.PathLike, *, metadata: dict | None = None) -> None:
    """Write ``candidates.csv``, ``deciles.csv`` and ``summary.json`` into ``out_dir``."""
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        d = len(run.candidates[0].channels)
        rows = [["id"] + [f"c{i}" for i in range(1, d + 1)] + ["params", "macs", "score"]]
        for c in sorted(run.candidates, key=lambda c: c.id):
            rows.append([c.id, *c.channels, c.cost.params, c.cost.macs, _fmt(c.score)])
        (root / "candidates.csv").write_text(_csv_text(rows, metadata), encoding="utf-8", newline="\n")

        rows = [["bucket", "block_index", "mean_channel", "std_channel"]]
        for name, b in run.deciles.items():
            for i, (mu, sd) in enumerate(zip(b.mean_channels, b.std_channels), start=1):
                rows.append([name, i, _fmt(mu), _fmt(sd)])
        (root / "deciles.csv").write_text(_csv_text(rows, metadata), encoding="utf-8", newline="\n")

        def cand(c: Candidate) -> dict:
            return {"id": c.id, "config": format_channels(c.channels), "params": c.cost.params,
                    "macs": c.cost.macs, "score": c.score, "pieces": c.pieces.to_dict()}

        summary = {
            "metadata": metadata or {},
            "num_candidates": len(run.candidates),
            "best": cand(run.best),
            "worst": cand(run.worst),
            "deciles": {
                name: {
                    "size": len(b.members),
                    "members": list(b.members),
                    "mean_score": b.mean_score,
                    "std_score": b.std_score,
                    "mean_channels": list(b.mean_channels),
                    "std_channels": list(b.std_channels),
                    "mean_params": float(np.mean([run.by_id(i).cost.params for i in b.members])),
                    "mean_macs": float(np.mean([run.by_id(i).cost.macs for i in b.members])),
                }
                for name, b in run.deciles.items()
            },
        }
        (root / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8", newline="\n")
    except OSError as exc:
        raise OSError(f"cannot write search outputs to {root}: {exc}") from exc


# --- depth-fixed budget sweeps -----------------------------------------------------


@dataclass(frozen=True)
class SweepResult:
    macs: int
    run: SearchRun
    top_slope: float


def budget_sweep(depth: int, macs_budgets: Sequence[int], *, num_candidates: int = 100,
                 fitness: RankScore | External = RankScore(trials=8), master_seed: int = 42,
                 workers: int = 1, **spec_kw) -> list[SweepResult]:
    """Search the same depth under several MAC budgets (params unbounded).

    Returns, per budget, the run and the slope of a linear fit to the top
    decile's mean channel curve.
    """
    from .archspec import fit_linear

    out = []
    for macs in macs_budgets:
        spec = SearchSpec(depth, Budget(None, int(macs)), num_candidates, fitness=fitness,
                          master_seed=master_seed, **spec_kw)
        run = run_search(spec, workers=workers)
        out.append(SweepResult(int(macs), run, fit_linear(run.deciles["top10"].mean_channels).slope))
    return out
