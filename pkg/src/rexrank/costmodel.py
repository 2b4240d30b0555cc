"""Parameter and multiply-accumulate (MAC) accounting.

"FLOPs" throughout follows the lightweight-model convention: one
multiply-accumulate counts once (MobileNetV2 at 224x224 comes to ~0.30B).
Convolutions carry no bias. BatchNorm and activations cost no MACs.
BatchNorm affine parameters (2 per channel) are only counted when
``bn_params=True``; the default leaves them out, which is what reproduces
the published MobileNetV2 total of 3.4M.

The module also reads and writes stage-wise channel configuration
strings such as ``"32 / 16(×1)-24(×2)-32(×3)"``.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Iterable, NamedTuple

from .modelspec import BlockKind, BlockSpec, HeadSpec, ModelSpec, PenultimateSpec, Shortcut, StemSpec
from .numerics import round_half_away

__all__ = [
    "Cost",
    "LayerCost",
    "CostReport",
    "Budget",
    "BlockConfig",
    "ChannelConfig",
    "ConfigParseError",
    "conv_cost",
    "dense_cost",
    "se_cost",
    "block_cost",
    "model_cost",
    "check_budget",
    "parse_config_string",
    "format_config_string",
    "config_to_spec",
    "expanded_width",
]


class Cost(NamedTuple):
    params: int
    macs: int


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    macs: int


@dataclass(frozen=True)
class CostReport:
    params: int
    macs: int
    per_layer: tuple[LayerCost, ...]

    @classmethod
    def from_layers(cls, layers: Iterable[LayerCost]) -> "CostReport":
        layers = tuple(layers)
        return cls(sum(l.params for l in layers), sum(l.macs for l in layers), layers)

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "macs": self.macs,
            "per_layer": [{"name": l.name, "params": l.params, "macs": l.macs} for l in self.per_layer],
        }

    def to_json(self, **extra) -> str:
        doc = self.to_dict()
        doc.update(extra)
        return json.dumps(doc, indent=2) + "\n"


@dataclass(frozen=True)
class Budget:
    """Upper bounds on params and MACs; ``None`` means unbounded."""

    max_params: int | None = None
    max_macs: int | None = None

    def __post_init__(self):
        for name in ("max_params", "max_macs"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive when bounded, got {v}")


def check_budget(report: CostReport, b: Budget) -> bool:
    if b.max_params is not None and report.params > b.max_params:
        return False
    if b.max_macs is not None and report.macs > b.max_macs:
        return False
    return True


def conv_cost(k: int, c_in: int, c_out: int, h: int, w: int, groups: int = 1, *, bn: bool = True) -> Cost:
    """Cost of a bias-free ``k x k`` convolution producing an ``h x w`` map.

    With ``bn`` the following BatchNorm's scale and shift (``2 * c_out``)
    are included in ``params``.
    """
    if groups < 1 or c_in % groups or c_out % groups:
        raise ValueError(f"channels {c_in}->{c_out} are not divisible by groups={groups}")
    if h < 1 or w < 1:
        raise ValueError(f"output resolution must be positive, got {h}x{w}")
    weights = k * k * c_in * c_out // groups
    return Cost(weights + (2 * c_out if bn else 0), weights * h * w)


def dense_cost(c_in: int, c_out: int) -> Cost:
    return Cost(c_in * c_out + c_out, c_in * c_out)


def se_cost(c_exp: int, h: int, w: int, reduction: int = 12) -> Cost:
    """Squeeze-and-excitation on ``c_exp`` channels: pool, FC down, FC up (with biases)."""
    r = math.ceil(c_exp / reduction)
    fc = c_exp * r
    return Cost(2 * fc + c_exp + r, 2 * fc + c_exp * h * w)


def expanded_width(block: BlockSpec, in_channels: int) -> int:
    if block.kind is BlockKind.DEPTHWISE_SEPARABLE or block.expansion == 1:
        return in_channels
    return round_half_away(block.expansion * in_channels)


class BlockCost(NamedTuple):
    params: int
    macs: int
    out_resolution: int
    layers: tuple[LayerCost, ...]


def block_cost(block: BlockSpec, in_channels: int, in_resolution: int, *, bn_params: bool = False,
               name: str = "block") -> BlockCost:
    """Cost of one inverted bottleneck or depthwise-separable block.

    The expansion 1x1 runs at the input resolution; the depthwise 3x3
    carries the stride, so it and everything after it run at the output
    resolution.
    """
    if in_resolution % block.stride:
        raise ValueError(f"{name}: resolution {in_resolution} is not divisible by stride {block.stride}")
    out_res = in_resolution // block.stride
    layers = []
    c_exp = expanded_width(block, in_channels)
    if block.kind is BlockKind.INVERTED_BOTTLENECK and block.expansion != 1:
        layers.append(LayerCost(f"{name}.expand", *conv_cost(1, in_channels, c_exp, in_resolution,
                                                             in_resolution, bn=bn_params)))
    layers.append(LayerCost(f"{name}.dw", *conv_cost(3, c_exp, c_exp, out_res, out_res, groups=c_exp,
                                                     bn=bn_params)))
    if block.use_se:
        layers.append(LayerCost(f"{name}.se", *se_cost(c_exp, out_res, out_res, block.se_reduction)))
    layers.append(LayerCost(f"{name}.project", *conv_cost(1, c_exp, block.out_channels, out_res, out_res,
                                                          bn=bn_params)))
    return BlockCost(sum(l.params for l in layers), sum(l.macs for l in layers), out_res, tuple(layers))


def model_cost(spec: ModelSpec, input_resolution: int = 224, num_classes: int | None = None, *,
               bn_params: bool = False) -> CostReport:
    """Exact params/MACs for a whole :class:`ModelSpec` at a square input resolution."""
    if input_resolution < 1 or input_resolution % spec.total_stride:
        raise ValueError(f"input resolution {input_resolution} is not divisible by the total "
                         f"stride {spec.total_stride}")
    classes = spec.head.classes if num_classes is None else num_classes
    res = input_resolution // spec.stem.stride
    layers = [LayerCost("stem", *conv_cost(3, spec.in_channels, spec.stem.out_channels, res, res,
                                           bn=bn_params))]
    c = spec.stem.out_channels
    for i, block in enumerate(spec.blocks, start=1):
        bc = block_cost(block, c, res, bn_params=bn_params, name=f"block{i}")
        layers.extend(bc.layers)
        res, c = bc.out_resolution, block.out_channels
    if spec.penultimate is not None:
        layers.append(LayerCost("penultimate", *conv_cost(1, c, spec.penultimate.out_channels, res, res,
                                                          bn=bn_params)))
        c = spec.penultimate.out_channels
    if spec.head.hidden is not None:
        layers.append(LayerCost("head.hidden", *dense_cost(c, spec.head.hidden)))
        c = spec.head.hidden
    layers.append(LayerCost("classifier", *dense_cost(c, classes)))
    return CostReport.from_layers(layers)


# --- channel configuration strings -------------------------------------------------


@dataclass(frozen=True)
class BlockConfig:
    out_channels: int
    stride: int = 1
    expansion: float = 6.0
    use_se: bool = False

    def __post_init__(self):
        if self.out_channels < 8:
            raise ValueError(f"out_channels must be >= 8, got {self.out_channels}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")


@dataclass(frozen=True)
class ChannelConfig:
    stem: int
    blocks: tuple[BlockConfig, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.stem < 1:
            raise ValueError("stem width must be positive")

    @property
    def channels(self) -> list[int]:
        return [b.out_channels for b in self.blocks]


class ConfigParseError(ValueError):
    """Malformed configuration string; ``offset`` is the UTF-8 byte offset of the problem."""

    def __init__(self, text: str, char_pos: int, message: str):
        self.offset = len(text[:char_pos].encode("utf-8"))
        super().__init__(f"{message} at byte {self.offset}")


# first block of these 1-based stage (group) indices downsamples, as in MobileNetV2
_STRIDE2_STAGES = {2, 3, 4, 6}
_TOKEN = re.compile(r"\s*(?:(?P<int>\d+)|(?P<sym>[/()\-×xX]))")


def parse_config_string(s: str) -> ChannelConfig:
    """Parse ``"<stem> / <c>(×<n>)-<c>(×<n>)-..."`` into a :class:`ChannelConfig`.

    Groups expand to ``n`` consecutive blocks of width ``c``. Strides and
    expansions follow the MobileNetV2 conventions; ``x`` is accepted for ``×``.
    """
    pos = 0

    def nxt(expect: str):
        nonlocal pos
        m = _TOKEN.match(s, pos)
        if m is None:
            at = len(s) - len(s[pos:].lstrip())
            found = repr(s[at]) if at < len(s) else "end of input"
            raise ConfigParseError(s, at, f"expected {expect if expect == 'integer' else repr(expect)}, found {found}")
        tok_start = m.start("int") if m.group("int") else m.start("sym")
        if expect == "integer":
            if m.group("int") is None:
                raise ConfigParseError(s, tok_start, f"expected integer, found {m.group('sym')!r}")
            pos = m.end()
            return int(m.group("int"))
        sym = m.group("sym")
        ok = sym in ("×", "x", "X") if expect == "×" else sym == expect
        if not ok:
            raise ConfigParseError(s, tok_start, f"expected {expect!r}, found {m.group(0).strip()!r}")
        pos = m.end()
        return sym

    stem = nxt("integer")
    nxt("/")
    groups: list[tuple[int, int]] = []
    while True:
        width = nxt("integer")
        nxt("(")
        nxt("×")
        start = pos
        repeat = nxt("integer")
        if repeat < 1:
            raise ConfigParseError(s, start, "repeat count must be >= 1")
        nxt(")")
        groups.append((width, repeat))
        if not s[pos:].strip():
            break
        nxt("-")

    blocks = []
    for g, (width, repeat) in enumerate(groups, start=1):
        for j in range(repeat):
            stride = 2 if (j == 0 and g in _STRIDE2_STAGES) else 1
            leading = not blocks and width <= stem
            blocks.append(BlockConfig(width, stride, 1.0 if leading else 6.0))
    return ChannelConfig(stem, tuple(blocks))


def format_config_string(cfg: ChannelConfig) -> str:
    groups: list[list[int]] = []
    for c in cfg.channels:
        if groups and groups[-1][0] == c:
            groups[-1][1] += 1
        else:
            groups.append([c, 1])
    return f"{cfg.stem} / " + "-".join(f"{c}(×{n})" for c, n in groups)


def _shortcut(stride: int, c_in: int, c_out: int) -> Shortcut:
    if stride != 1 or c_out < c_in:
        return Shortcut.NONE
    return Shortcut.IDENTITY if c_out == c_in else Shortcut.ZERO_PAD


def config_to_spec(cfg: ChannelConfig, *, name: str = "config", penultimate: int | None = 1280,
                   classes: int = 1000, nonlinearity: str = "relu6") -> ModelSpec:
    """MobileNetV2-style network (inverted bottlenecks, one activation everywhere) for a config."""
    blocks = []
    c_in = cfg.stem
    for b in cfg.blocks:
        blocks.append(BlockSpec(BlockKind.INVERTED_BOTTLENECK, b.out_channels, b.stride, b.expansion, b.use_se,
                                "identity" if b.expansion == 1 else nonlinearity, nonlinearity,
                                _shortcut(b.stride, c_in, b.out_channels)))
        c_in = b.out_channels
    pen = None if penultimate is None else PenultimateSpec(penultimate, nonlinearity)
    return ModelSpec(name, StemSpec(cfg.stem, 2, nonlinearity), tuple(blocks), pen, HeadSpec(classes))
