"""Random-weight layers and blocks for the rank-expansion study.

A trial draws a random-sized layer (or inverted bottleneck), pushes i.i.d.
Gaussian inputs through it and measures how much of the output channel
dimension the resulting feature matrix actually spans. Averaging the rank
ratio over many trials per channel dimension ratio ``d_in / d_out`` gives a
rank curve.

Weights are He-style Gaussians (variance ``2 / fan_in``). Spatial layers run
on ``spatial x spatial`` inputs with zero padding, and their outputs are
flattened to ``d_out x (batch * spatial**2)`` before the rank is taken.
"""
from __future__ import annotations

import csv
import enum
import functools
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import (
    Nonlinearity,
    RankSettings,
    apply_nonlinearity,
    batch_standardize,
    rank_from_singular_values,
    round_half_away,
    singular_values,
)

__all__ = [
    "LayerKind",
    "LayerArch",
    "RandomNet",
    "RankSample",
    "SweepSpec",
    "CurvePoint",
    "RankCurve",
    "default_batch",
    "trial_seed",
    "sample_network",
    "forward_features",
    "forward_and_rank",
    "run_sweep",
    "run_sweep_tolerances",
    "emit_curve_csv",
    "read_curve_csv",
]


class LayerKind(str, enum.Enum):
    CONV1X1 = "conv1x1"
    CONV3X3 = "conv3x3"
    IB_CONV = "ib-conv"
    IB_DW = "ib-dw"

    @property
    def is_bottleneck(self) -> bool:
        return self in (LayerKind.IB_CONV, LayerKind.IB_DW)

    @property
    def is_spatial(self) -> bool:
        return self is not LayerKind.CONV1X1


@dataclass(frozen=True)
class LayerArch:
    kind: LayerKind
    expansion: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind.is_bottleneck and self.expansion < 1:
            raise ValueError(f"bottleneck expansion must be >= 1, got {self.expansion}")


@dataclass(frozen=True, eq=False)
class RandomNet:
    """One random instance of a :class:`LayerArch`.

    ``weights`` holds, in forward order:

    * conv1x1: ``(d_out, d_in)``
    * conv3x3: ``(d_out, d_in, 3, 3)``
    * ib-conv: expand ``(e, d_in)``, mid ``(e, e, 3, 3)``, project ``(d_out, e)``
    * ib-dw:   expand ``(e, d_in)``, mid ``(e, 3, 3)``, project ``(d_out, e)``
    """

    arch: LayerArch
    d_in: int
    d_out: int
    weights: tuple[np.ndarray, ...]
    shortcut: bool = True

    @property
    def expanded(self) -> int | None:
        if not self.arch.kind.is_bottleneck:
            return None
        return self.weights[0].shape[0]

    def scaled(self, factor: float) -> "RandomNet":
        return RandomNet(self.arch, self.d_in, self.d_out,
                         tuple(w * factor for w in self.weights), self.shortcut)


@dataclass(frozen=True)
class RankSample:
    rank_ratio: float
    nuclear_norm: float


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def sample_network(arch: LayerArch, d_in: int, d_out: int, seed: int, *, shortcut: bool = True) -> RandomNet:
    """Draw the weights of one random layer or block.

    ``shortcut`` only affects bottleneck kinds; when set, the input is added
    to the block output with its channels zero-padded up to ``d_out``.
    """
    if d_in < 1:
        raise ValueError(f"d_in must be >= 1, got {d_in}")
    if d_in > d_out:
        raise ValueError(f"d_in ({d_in}) must not exceed d_out ({d_out})")
    rng = np.random.default_rng(seed)
    kind = arch.kind
    if kind is LayerKind.CONV1X1:
        weights = (_he(rng, (d_out, d_in), d_in),)
    elif kind is LayerKind.CONV3X3:
        weights = (_he(rng, (d_out, d_in, 3, 3), 9 * d_in),)
    else:
        e = max(1, round_half_away(arch.expansion * d_in))
        expand = _he(rng, (e, d_in), d_in)
        if kind is LayerKind.IB_CONV:
            mid = _he(rng, (e, e, 3, 3), 9 * e)
        else:
            mid = _he(rng, (e, 3, 3), 9)
        project = _he(rng, (d_out, e), e)
        weights = (expand, mid, project)
    return RandomNet(arch, d_in, d_out, weights, shortcut)


def default_batch(kind: LayerKind, d_out: int, spatial: int = 7) -> int:
    """Smallest multiple of 32 whose flattened sample count reaches ``4 * d_out``."""
    per_item = spatial * spatial if LayerKind(kind).is_spatial else 1
    need = -(-4 * d_out // per_item)
    return max(32, -(-need // 32) * 32)


def _conv3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # x: (C, N, H, W), w: (O, C, 3, 3); stride 1, zero padding 1
    c, n, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 9, n, h, wd))
    for di in range(3):
        for dj in range(3):
            cols[:, 3 * di + dj] = xp[:, :, di:di + h, dj:dj + wd]
    out = w.reshape(w.shape[0], c * 9) @ cols.reshape(c * 9, n * h * wd)
    return out.reshape(w.shape[0], n, h, wd)


@functools.lru_cache(maxsize=8)
def _shift_operators(h: int, w: int) -> np.ndarray:
    # (9, h*w, h*w): tap (di, dj) of a zero-padded 3x3 kernel as a linear map on flattened pixels
    ops = np.zeros((3, 3, h * w, h * w))
    for di in range(3):
        for dj in range(3):
            for r in range(h):
                rr = r + di - 1
                if not 0 <= rr < h:
                    continue
                for c in range(w):
                    cc = c + dj - 1
                    if 0 <= cc < w:
                        ops[di, dj, r * w + c, rr * w + cc] = 1.0
    return ops.reshape(9, h * w * h * w)


def _dwconv3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # x: (C, N, H, W), w: (C, 3, 3); per-channel 3x3 conv as a batched (HW x HW) matmul
    c, n, h, wd = x.shape
    kernels = (w.reshape(c, 9) @ _shift_operators(h, wd)).reshape(c, h * wd, h * wd)
    return np.matmul(x.reshape(c, n, h * wd), kernels.transpose(0, 2, 1)).reshape(x.shape)


def _bn(x: np.ndarray) -> np.ndarray:
    c = x.shape[0]
    return batch_standardize(x.reshape(c, -1)).reshape(x.shape)


def _forward(net: RandomNet, x: np.ndarray, f: Nonlinearity) -> np.ndarray:
    kind = net.arch.kind
    n, h, wd = x.shape[1:]
    if kind is LayerKind.CONV1X1:
        (w,) = net.weights
        z = (w @ x.reshape(net.d_in, -1)).reshape(net.d_out, n, h, wd)
        return apply_nonlinearity(f, _bn(z))
    if kind is LayerKind.CONV3X3:
        (w,) = net.weights
        return apply_nonlinearity(f, _bn(_conv3x3(x, w)))
    expand, mid, project = net.weights
    e = expand.shape[0]
    z = (expand @ x.reshape(net.d_in, -1)).reshape(e, n, h, wd)
    z = apply_nonlinearity(f, _bn(z))
    z = _conv3x3(z, mid) if kind is LayerKind.IB_CONV else _dwconv3x3(z, mid)
    z = apply_nonlinearity(f, _bn(z))
    out = _bn((project @ z.reshape(e, -1)).reshape(net.d_out, n, h, wd))
    if net.shortcut:
        out[: net.d_in] += x
    return out


def forward_features(nets: RandomNet | Sequence[RandomNet], nonlinearity: Nonlinearity, batch: int,
                     seed: int, *, spatial: int = 7) -> np.ndarray:
    """Run i.i.d. standard-normal inputs through one net (or a chain of nets).

    Returns the output feature as a ``d_out x samples`` matrix.
    """
    chain = [nets] if isinstance(nets, RandomNet) else list(nets)
    if not chain:
        raise ValueError("empty network chain")
    hw = spatial if any(n.arch.kind.is_spatial for n in chain) else 1
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((chain[0].d_in, batch, hw, hw))
    for net in chain:
        if x.shape[0] != net.d_in:
            raise ValueError(f"chain mismatch: {x.shape[0]} channels into a block expecting {net.d_in}")
        x = _forward(net, x, nonlinearity)
    return x.reshape(x.shape[0], -1)


def forward_and_rank(net: RandomNet | Sequence[RandomNet], nonlinearity: Nonlinearity, batch: int,
                     settings: RankSettings, seed: int, *, spatial: int = 7) -> RankSample:
    chain = [net] if isinstance(net, RandomNet) else list(net)
    d_out = chain[-1].d_out
    hw = spatial if any(n.arch.kind.is_spatial for n in chain) else 1
    samples = batch * hw * hw
    if samples <= d_out:
        raise ValueError(f"sample dimension {samples} must exceed d_out={d_out}; increase the batch")
    feats = forward_features(chain, nonlinearity, batch, seed, spatial=spatial)
    sv = singular_values(feats)
    return RankSample(rank_from_singular_values(sv, settings) / d_out, float(sv.sum()))


@dataclass(frozen=True)
class SweepSpec:
    arch: LayerArch
    nonlinearity: Nonlinearity
    ratio_grid: tuple[float, ...] = tuple(np.round(np.linspace(0.1, 1.0, 10), 10))
    trials: int = 200
    d_out_range: tuple[int, int] = (32, 128)
    spatial: int = 7
    master_seed: int = 42

    def __post_init__(self):
        grid = tuple(float(r) for r in self.ratio_grid)
        object.__setattr__(self, "ratio_grid", grid)
        if not grid:
            raise ValueError("ratio_grid is empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("ratio_grid must be strictly increasing")
        if grid[0] < 0.1 - 1e-12 or grid[-1] > 1.0 + 1e-12:
            raise ValueError("ratio_grid must lie within [0.1, 1.0]")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        lo, hi = self.d_out_range
        if lo < 8 or hi < lo:
            raise ValueError(f"bad d_out_range {self.d_out_range}: need 8 <= min <= max")
        if self.spatial < 1:
            raise ValueError("spatial must be >= 1")


@dataclass(frozen=True)
class CurvePoint:
    ratio: float
    mean_rank_ratio: float
    std_rank_ratio: float
    mean_nuclear_norm: float


@dataclass(frozen=True)
class RankCurve:
    spec: SweepSpec
    points: tuple[CurvePoint, ...]

    def at(self, ratio: float) -> CurvePoint:
        for p in self.points:
            if abs(p.ratio - ratio) < 1e-9:
                return p
        raise KeyError(ratio)

    @property
    def ratios(self) -> np.ndarray:
        return np.array([p.ratio for p in self.points])

    @property
    def means(self) -> np.ndarray:
        return np.array([p.mean_rank_ratio for p in self.points])


def trial_seed(master_seed: int, *key: int) -> np.random.SeedSequence:
    """Splittable per-trial seed; independent of execution order."""
    return np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(key))


def _run_trial(spec: SweepSpec, ratio_index: int, trial: int) -> tuple[int, np.ndarray]:
    ss = trial_seed(spec.master_seed, ratio_index, trial)
    rng = np.random.default_rng(ss)
    lo, hi = spec.d_out_range
    d_out = int(rng.integers(lo, hi + 1))
    d_in = max(1, round_half_away(spec.ratio_grid[ratio_index] * d_out))
    net_seed, input_seed = (int(s) for s in rng.integers(0, 2**63, size=2))
    net = sample_network(spec.arch, d_in, d_out, net_seed)
    batch = default_batch(spec.arch.kind, d_out, spec.spatial)
    feats = forward_features(net, spec.nonlinearity, batch, input_seed, spatial=spec.spatial)
    return d_out, singular_values(feats)


def run_sweep_tolerances(spec: SweepSpec, tolerances: Sequence[RankSettings], *,
                         workers: int = 1) -> list[RankCurve]:
    """Like :func:`run_sweep` for several rank tolerances, sharing every forward pass and SVD."""
    jobs = [(i, t) for i in range(len(spec.ratio_grid)) for t in range(spec.trials)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: _run_trial(spec, *job), jobs))
    else:
        results = [_run_trial(spec, i, t) for i, t in jobs]
    nuclear = np.array([sv.sum() for _, sv in results])
    curves = []
    for settings in tolerances:
        ratios = np.array([rank_from_singular_values(sv, settings) / d_out for d_out, sv in results])
        points = []
        for i, ratio in enumerate(spec.ratio_grid):
            sl = slice(i * spec.trials, (i + 1) * spec.trials)
            rr, nn = ratios[sl], nuclear[sl]
            points.append(CurvePoint(ratio, float(rr.mean()), float(rr.std()), float(nn.mean())))
        curves.append(RankCurve(spec, tuple(points)))
    return curves


def run_sweep(spec: SweepSpec, settings: RankSettings = RankSettings(), *, workers: int = 1) -> RankCurve:
    """Average rank ratio and nuclear norm over ``spec.trials`` random nets per grid ratio.

    Trial ``t`` at grid index ``i`` is seeded from ``(master_seed, i, t)`` and
    results are gathered by that index, so ``workers`` never changes the output.
    """
    return run_sweep_tolerances(spec, [settings], workers=workers)[0]


CURVE_HEADER = ("ratio", "mean_rank_ratio", "std_rank_ratio", "mean_nuclear_norm")


def emit_curve_csv(curve: RankCurve, path: str | os.PathLike, *, metadata: dict | None = None) -> None:
    """Write one CSV row per grid point, 9 significant digits.

    ``metadata`` goes into a single leading ``#`` comment line.
    """
    buf = io.StringIO()
    if metadata:
        buf.write("# " + " ".join(f"{k}={v}" for k, v in metadata.items()) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    for p in curve.points:
        writer.writerow([f"{p.ratio:.9g}", f"{p.mean_rank_ratio:.9g}",
                         f"{p.std_rank_ratio:.9g}", f"{p.mean_nuclear_norm:.9g}"])
    try:
        Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"cannot write curve CSV to {path}: {exc}") from exc


def read_curve_csv(path: str | os.PathLike) -> list[CurvePoint]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [CurvePoint(*(float(r[k]) for k in CURVE_HEADER)) for r in rows]
