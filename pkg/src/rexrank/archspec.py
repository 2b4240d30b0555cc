"""ReXNet-family builders on top of a linear channel parameterization.

Block widths follow ``c_i = round(a * i + b)`` for block index ``i = 1..d``.
The per-model endpoints are not hard-coded: :func:`calibrate_linear` picks
``(a, b)`` so the built network lands on a parameter/MAC budget, and the
builders use the calibrated line by default.

Three families are provided:

* :func:`build_rexnet`: 17 inverted bottlenecks in the MobileNetV2 stage
  layout, SE, SiLU after the expansion 1x1 and ReLU6 after the depthwise conv.
* :func:`build_rexnet_plain`: 13 depthwise-separable blocks in the
  MobileNetV1 layout, no shortcuts, no SE.
* :func:`build_rexnet_lite`: the ReXNet skeleton without SE, ReLU6
  everywhere and an extra dense layer before the classifier.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .costmodel import Budget, CostReport, model_cost
from .modelspec import (
    BlockKind,
    BlockSpec,
    HeadSpec,
    ModelSpec,
    PenultimateSpec,
    Shortcut,
    StemSpec,
    export_spec,
    import_spec,
)
from .numerics import round_half_away

__all__ = [
    "MIN_WIDTH",
    "LinearParam",
    "LinearFit",
    "Layout",
    "Calibration",
    "CalibrationError",
    "channels_from_linear",
    "fit_linear",
    "rexnet_layout",
    "plain_layout",
    "lite_layout",
    "calibrate_linear",
    "default_rexnet_linear",
    "default_plain_linear",
    "build_rexnet",
    "build_rexnet_plain",
    "build_rexnet_lite",
    "export_spec",
    "import_spec",
]

MIN_WIDTH = 8
MULTIPLIER_RANGE = (0.5, 3.0)

# MobileNetV2 stage layout: repeats per stage, stride of each stage's first block
REXNET_REPEATS = (1, 2, 3, 4, 3, 3, 1)
REXNET_STAGE_STRIDES = (1, 2, 2, 2, 1, 2, 1)
# MobileNetV1 depthwise-separable strides
PLAIN_STRIDES = (1, 2, 1, 2, 1, 2, 1, 1, 1, 1, 1, 2, 1)

REXNET_TARGET = Budget(4_800_000, 400_000_000)
PLAIN_TARGET = Budget(4_200_000, 560_000_000)


@dataclass(frozen=True)
class LinearParam:
    slope_a: float
    intercept_b: float
    depth_d: int

    def __post_init__(self):
        if self.depth_d < 1:
            raise ValueError(f"depth must be positive, got {self.depth_d}")
        if not (math.isfinite(self.slope_a) and math.isfinite(self.intercept_b)):
            raise ValueError("slope and intercept must be finite")
        if self.slope_a < 0:
            raise ValueError(f"slope must be non-negative, got {self.slope_a}")

    def scaled(self, m: float) -> "LinearParam":
        return LinearParam(self.slope_a * m, self.intercept_b * m, self.depth_d)


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    rms_residual: float


def channels_from_linear(p: LinearParam) -> list[int]:
    """Widths ``round(a*i + b)`` for ``i = 1..d``, rounded half away from zero.

    The sequence is clamped to be non-decreasing; with ``a >= 0`` the clamp
    only guards against floating-point ties.
    """
    out: list[int] = []
    for i in range(1, p.depth_d + 1):
        c = round_half_away(p.slope_a * i + p.intercept_b)
        if c < MIN_WIDTH:
            raise ValueError(f"block {i} width {c} is below the minimum of {MIN_WIDTH} "
                             f"(a={p.slope_a:g}, b={p.intercept_b:g})")
        out.append(max(c, out[-1]) if out else c)
    return out


def fit_linear(channels: Sequence[float]) -> LinearFit:
    """Ordinary least squares of ``c_i`` on the 1-based block index."""
    c = np.asarray(channels, dtype=np.float64)
    if c.ndim != 1 or c.size < 2:
        raise ValueError(f"need at least 2 channel widths, got {c.size}")
    i = np.arange(1, c.size + 1, dtype=np.float64)
    design = np.column_stack([i, np.ones_like(i)])
    (slope, intercept), *_ = np.linalg.lstsq(design, c, rcond=None)
    resid = c - (slope * i + intercept)
    return LinearFit(float(slope), float(intercept), float(np.sqrt(np.mean(resid ** 2))))


# --- skeletons ---------------------------------------------------------------------


def _check_multiplier(m: float) -> None:
    lo, hi = MULTIPLIER_RANGE
    if not lo <= m <= hi:
        raise ValueError(f"width multiplier must be in [{lo}, {hi}], got {m}")


def _rexnet_strides() -> list[int]:
    strides = []
    for reps, s in zip(REXNET_REPEATS, REXNET_STAGE_STRIDES):
        strides += [s] + [1] * (reps - 1)
    return strides


def _ib_blocks(channels: Sequence[int], stem: int, *, use_se: bool, se_first: bool, expand_act: str,
               dw_act: str, se_reduction: int) -> list[BlockSpec]:
    blocks = []
    c_in = stem
    for i, (c, s) in enumerate(zip(channels, _rexnet_strides())):
        first = i == 0
        shortcut = Shortcut.ZERO_PAD if s == 1 and c >= c_in else Shortcut.NONE
        blocks.append(BlockSpec(
            BlockKind.INVERTED_BOTTLENECK, c, s,
            expansion=1.0 if first else 6.0,
            use_se=use_se and (se_first or not first),
            act_after_expand="identity" if first else expand_act,
            act_after_dw=dw_act,
            shortcut=shortcut,
            se_reduction=se_reduction,
        ))
        c_in = c
    return blocks


@dataclass(frozen=True)
class Layout:
    """A network family with its block widths left open.

    ``build(channels)`` returns the full :class:`ModelSpec` for ``depth``
    block widths.
    """

    name: str
    depth: int
    build: Callable[[Sequence[int]], ModelSpec]


def rexnet_layout(*, stem: int = 32, penultimate: int = 1280, classes: int = 1000, use_se: bool = True,
                  se_first: bool = False, se_reduction: int = 12) -> Layout:
    def build(channels):
        blocks = _ib_blocks(channels, stem, use_se=use_se, se_first=se_first, expand_act="silu",
                            dw_act="relu6", se_reduction=se_reduction)
        return ModelSpec("rexnet", StemSpec(stem, 2, "relu6"), blocks, PenultimateSpec(penultimate, "silu"),
                         HeadSpec(classes))
    return Layout("rexnet", sum(REXNET_REPEATS), build)


def lite_layout(*, stem: int = 32, penultimate: int = 1280, hidden: int = 1280, classes: int = 1000) -> Layout:
    def build(channels):
        blocks = _ib_blocks(channels, stem, use_se=False, se_first=False, expand_act="relu6",
                            dw_act="relu6", se_reduction=12)
        return ModelSpec("rexnet-lite", StemSpec(stem, 2, "relu6"), blocks, PenultimateSpec(penultimate, "relu6"),
                         HeadSpec(classes, hidden, "relu6"))
    return Layout("rexnet-lite", sum(REXNET_REPEATS), build)


def plain_layout(*, stem: int = 32, penultimate: int = 1024, classes: int = 1000) -> Layout:
    def build(channels):
        blocks = [BlockSpec(BlockKind.DEPTHWISE_SEPARABLE, c, s, expansion=1.0, use_se=False,
                            act_after_expand="silu", act_after_dw="relu", shortcut=Shortcut.NONE)
                  for c, s in zip(channels, PLAIN_STRIDES)]
        return ModelSpec("rexnet-plain", StemSpec(stem, 2, "relu"), blocks, PenultimateSpec(penultimate, "silu"),
                         HeadSpec(classes))
    return Layout("rexnet-plain", len(PLAIN_STRIDES), build)


# --- calibration -------------------------------------------------------------------


class CalibrationError(ValueError):
    """No linear configuration meets the budget; carries the closest costs seen."""

    def __init__(self, message: str, nearest: CostReport | None = None):
        super().__init__(message)
        self.nearest = nearest


@dataclass(frozen=True)
class Calibration:
    param: LinearParam
    report: CostReport


# acceptance window for each bounded dimension, as a fraction of its target
WINDOW = (0.90, 1.02)


def _bounded(budget: Budget) -> list[tuple[str, int]]:
    dims = [(k, v) for k, v in (("params", budget.max_params), ("macs", budget.max_macs)) if v is not None]
    if not dims:
        raise ValueError("calibration needs at least one bounded dimension")
    return dims


def calibrate_linear(layout: Layout, budget: Budget, resolution: int = 224, *, grid: int = 33,
                     refine_steps: int = 40) -> Calibration:
    """Choose ``(a, b)`` so ``layout`` hits ``budget`` as tightly as possible.

    Every bounded cost must land within ``[0.90, 1.02]`` of its target; among
    such lines the one with the smallest worst-case relative deviation from
    the targets wins (ties go to the smaller slope, then smaller intercept).
    Search is a coarse grid over the feasible box followed by pattern
    refinement with halving step sizes. Deterministic.

    Raises
    ------
    CalibrationError
        If no line lands in the window; the message reports the closest costs.
    """
    dims = _bounded(budget)
    d = layout.depth
    cache: dict[tuple[int, ...], CostReport] = {}

    def cost(a: float, b: float) -> CostReport | None:
        try:
            ch = tuple(channels_from_linear(LinearParam(a, b, d)))
        except ValueError:
            return None
        if ch not in cache:
            cache[ch] = model_cost(layout.build(ch), resolution)
        return cache[ch]

    def ratios(r: CostReport) -> list[float]:
        return [getattr(r, k) / v for k, v in dims]

    def key(a: float, b: float):
        r = cost(a, b)
        if r is None:
            return None
        q = ratios(r)
        inside = all(WINDOW[0] <= x <= WINDOW[1] for x in q)
        # outside-window points rank after every inside point, by how far out they are
        excess = max(max(WINDOW[0] - x, x - WINDOW[1], 0.0) for x in q)
        return (not inside, excess, max(abs(x - 1.0) for x in q), a, b)

    def over(a: float, b: float) -> bool:
        r = cost(a, b)
        return r is not None and max(ratios(r)) > WINDOW[1]

    def bisect(fn: Callable[[float], bool], lo: float, hi: float) -> float:
        # grow hi until fn(hi) is true, then bisect to the boundary
        for _ in range(60):
            if fn(hi):
                break
            lo, hi = hi, hi * 2
        for _ in range(50):
            mid = 0.5 * (lo + hi)
            lo, hi = (lo, mid) if fn(mid) else (mid, hi)
        return hi

    b_lo = float(MIN_WIDTH)
    if over(0.0, b_lo):
        r = cost(0.0, b_lo)
        raise CalibrationError(f"budget infeasible: the narrowest {layout.name} (all widths {MIN_WIDTH}) "
                               f"already costs params={r.params}, macs={r.macs}", r)
    b_hi = bisect(lambda b: over(0.0, b), b_lo, 64.0)
    a_hi = bisect(lambda a: over(a, max(0.0, MIN_WIDTH - a)), 0.0, 4.0)

    best, best_key = None, None

    def consider(a: float, b: float):
        nonlocal best, best_key
        a, b = max(a, 0.0), b
        if a + b < MIN_WIDTH - 0.5:
            return
        k = key(a, b)
        if k is not None and (best_key is None or k < best_key):
            best, best_key = (a, b), k

    # constant lines first, so an exact a=0 hit is found even off the grid
    for b in range(MIN_WIDTH, int(math.ceil(b_hi)) + 1):
        consider(0.0, float(b))
    for a in np.linspace(0.0, a_hi, grid):
        for b in np.linspace(0.0, b_hi, grid):
            consider(float(a), float(b))
    step_a, step_b = a_hi / (grid - 1), b_hi / (grid - 1)
    for _ in range(refine_steps):
        a0, b0 = best
        for da in (-step_a, 0.0, step_a):
            for db in (-step_b, 0.0, step_b):
                consider(a0 + da, b0 + db)
        if best == (a0, b0):
            step_a, step_b = step_a / 2, step_b / 2
    if best is None or best_key[0]:
        near = None if best is None else cost(*best)
        desc = "none" if near is None else f"params={near.params}, macs={near.macs}"
        raise CalibrationError(f"budget infeasible for {layout.name}: no linear configuration lands within "
                               f"{WINDOW[0]:.2f}-{WINDOW[1]:.2f} of the targets; nearest costs {desc}", near)
    a, b = best
    return Calibration(LinearParam(a, b, d), cost(a, b))


@functools.lru_cache(maxsize=None)
def default_rexnet_linear() -> LinearParam:
    """ReXNet x1.0 line calibrated to 4.8M params / 0.40B MACs at 224x224."""
    return calibrate_linear(rexnet_layout(), REXNET_TARGET).param


@functools.lru_cache(maxsize=None)
def default_plain_linear() -> LinearParam:
    """ReXNet-plain x1.0 line calibrated to the MobileNetV1 baseline cost (4.2M / 0.56B)."""
    return calibrate_linear(plain_layout(), PLAIN_TARGET).param


# --- builders ----------------------------------------------------------------------


def _scaled_channels(p: LinearParam, m: float) -> list[int]:
    q = p.scaled(m)
    # blocks a small multiplier would push under the minimum are held at it
    return [max(MIN_WIDTH, round_half_away(q.slope_a * i + q.intercept_b)) for i in range(1, q.depth_d + 1)]


def _resolve(linear: LinearParam | None, default: Callable[[], LinearParam], depth: int) -> LinearParam:
    p = default() if linear is None else linear
    if p.depth_d != depth:
        raise ValueError(f"linear parameterization has depth {p.depth_d}, family needs {depth}")
    return p


def build_rexnet(width_multiplier: float = 1.0, *, linear: LinearParam | None = None, use_se: bool = True,
                 se_first: bool = False, se_reduction: int = 12, penultimate: int | None = None,
                 classes: int = 1000) -> ModelSpec:
    """ReXNet at a width multiplier.

    Parameters
    ----------
    width_multiplier
        Scale in ``[0.5, 3.0]`` applied to the stem, the block line and the
        penultimate width (which never drops below 1280).
    linear
        Block line at x1.0; defaults to the calibrated 4.8M / 0.40B line.
    use_se, se_first
        SE in the inverted bottlenecks; the leading expansion-1 block only
        gets one when ``se_first`` is set.
    """
    _check_multiplier(width_multiplier)
    p = _resolve(linear, default_rexnet_linear, sum(REXNET_REPEATS))
    m = width_multiplier
    pen = max(1280, round_half_away(1280 * m)) if penultimate is None else penultimate
    layout = rexnet_layout(stem=round_half_away(32 * m), penultimate=pen, classes=classes, use_se=use_se,
                           se_first=se_first, se_reduction=se_reduction)
    spec = layout.build(_scaled_channels(p, m))
    return _renamed(spec, f"rexnet-x{m:g}")


def build_rexnet_lite(width_multiplier: float = 1.0, *, linear: LinearParam | None = None, hidden: int = 1280,
                      penultimate: int | None = None, classes: int = 1000) -> ModelSpec:
    """ReXNet-lite: ReXNet channels, no SE, ReLU6 only, dense layer of ``hidden`` before the classifier."""
    _check_multiplier(width_multiplier)
    p = _resolve(linear, default_rexnet_linear, sum(REXNET_REPEATS))
    m = width_multiplier
    pen = max(1280, round_half_away(1280 * m)) if penultimate is None else penultimate
    layout = lite_layout(stem=round_half_away(32 * m), penultimate=pen, hidden=hidden, classes=classes)
    return _renamed(layout.build(_scaled_channels(p, m)), f"rexnet-lite-x{m:g}")


def build_rexnet_plain(width_multiplier: float = 1.0, *, linear: LinearParam | None = None,
                       penultimate: int = 1024, classes: int = 1000) -> ModelSpec:
    """ReXNet-plain: MobileNetV1 depth with linearly assigned 1x1 widths and no shortcuts.

    The stem and the penultimate width are those of MobileNetV1 (32 and 1024),
    and only the stem scales with the multiplier.
    """
    _check_multiplier(width_multiplier)
    p = _resolve(linear, default_plain_linear, len(PLAIN_STRIDES))
    m = width_multiplier
    layout = plain_layout(stem=round_half_away(32 * m), penultimate=penultimate, classes=classes)
    return _renamed(layout.build(_scaled_channels(p, m)), f"rexnet-plain-x{m:g}")


def _renamed(spec: ModelSpec, name: str) -> ModelSpec:
    return ModelSpec(name, spec.stem, spec.blocks, spec.penultimate, spec.head, spec.in_channels)
