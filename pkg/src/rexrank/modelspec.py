"""Layer-by-layer architecture descriptions and their JSON form.

A :class:`ModelSpec` is a plain, immutable description: stem, a sequence of
blocks, an optional penultimate 1x1 expansion and a classifier head. It
carries no weights. The JSON layout is versioned as ``rexrank-spec/1``; the
JSON Schema ships with the package (see :func:`json_schema`).
"""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .numerics import Nonlinearity

__all__ = [
    "SCHEMA_ID",
    "BlockKind",
    "Shortcut",
    "StemSpec",
    "BlockSpec",
    "PenultimateSpec",
    "HeadSpec",
    "ModelSpec",
    "SpecFormatError",
    "spec_to_dict",
    "spec_from_dict",
    "export_spec",
    "import_spec",
    "json_schema",
]

SCHEMA_ID = "rexrank-spec/1"


class BlockKind(str, enum.Enum):
    INVERTED_BOTTLENECK = "inverted_bottleneck"
    DEPTHWISE_SEPARABLE = "depthwise_separable"


class Shortcut(str, enum.Enum):
    NONE = "none"
    IDENTITY = "identity"
    ZERO_PAD = "zero_pad"


class SpecFormatError(ValueError):
    """A ModelSpec document does not match the schema; ``path`` names the field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _act(name: str) -> str:
    return Nonlinearity.parse(name).name


@dataclass(frozen=True)
class StemSpec:
    out_channels: int
    stride: int = 2
    nonlinearity: str = "relu6"

    def __post_init__(self):
        object.__setattr__(self, "nonlinearity", _act(self.nonlinearity))


@dataclass(frozen=True)
class BlockSpec:
    kind: BlockKind
    out_channels: int
    stride: int = 1
    expansion: float = 6.0
    use_se: bool = False
    act_after_expand: str = "relu6"
    act_after_dw: str = "relu6"
    shortcut: Shortcut = Shortcut.NONE
    se_reduction: int = 12

    def __post_init__(self):
        object.__setattr__(self, "kind", BlockKind(self.kind))
        object.__setattr__(self, "shortcut", Shortcut(self.shortcut))
        object.__setattr__(self, "act_after_expand", _act(self.act_after_expand))
        object.__setattr__(self, "act_after_dw", _act(self.act_after_dw))
        object.__setattr__(self, "expansion", float(self.expansion))
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be positive, got {self.out_channels}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")
        if self.se_reduction < 1:
            raise ValueError(f"se_reduction must be >= 1, got {self.se_reduction}")
        if self.stride == 2 and self.shortcut is not Shortcut.NONE:
            raise ValueError("stride-2 blocks cannot carry a shortcut")


@dataclass(frozen=True)
class PenultimateSpec:
    out_channels: int
    nonlinearity: str = "relu6"

    def __post_init__(self):
        object.__setattr__(self, "nonlinearity", _act(self.nonlinearity))


@dataclass(frozen=True)
class HeadSpec:
    classes: int = 1000
    hidden: int | None = None
    hidden_nonlinearity: str = "relu6"

    def __post_init__(self):
        object.__setattr__(self, "hidden_nonlinearity", _act(self.hidden_nonlinearity))
        if self.classes < 1:
            raise ValueError("classes must be positive")
        if self.hidden is not None and self.hidden < 1:
            raise ValueError("hidden width must be positive")


@dataclass(frozen=True)
class ModelSpec:
    """Whole-network description.

    Block widths must be non-decreasing over the block index.
    """

    name: str
    stem: StemSpec
    blocks: tuple[BlockSpec, ...]
    penultimate: PenultimateSpec | None = None
    head: HeadSpec = field(default_factory=HeadSpec)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise ValueError("a model needs at least one block")
        widths = self.channels
        for i, (a, b) in enumerate(zip(widths, widths[1:]), start=2):
            if b < a:
                raise ValueError(f"block {i} narrows from {a} to {b}; widths must be non-decreasing")

    @property
    def channels(self) -> list[int]:
        return [b.out_channels for b in self.blocks]

    @property
    def total_stride(self) -> int:
        s = self.stem.stride
        for b in self.blocks:
            s *= b.stride
        return s


def spec_to_dict(spec: ModelSpec) -> dict[str, Any]:
    return {
        "schema": SCHEMA_ID,
        "name": spec.name,
        "in_channels": spec.in_channels,
        "stem": {
            "out_channels": spec.stem.out_channels,
            "stride": spec.stem.stride,
            "nonlinearity": spec.stem.nonlinearity,
        },
        "blocks": [
            {
                "kind": b.kind.value,
                "out_channels": b.out_channels,
                "stride": b.stride,
                "expansion": b.expansion,
                "use_se": b.use_se,
                "se_reduction": b.se_reduction,
                "act_after_expand": b.act_after_expand,
                "act_after_dw": b.act_after_dw,
                "shortcut": b.shortcut.value,
            }
            for b in spec.blocks
        ],
        "penultimate": None if spec.penultimate is None else {
            "out_channels": spec.penultimate.out_channels,
            "nonlinearity": spec.penultimate.nonlinearity,
        },
        "head": {
            "hidden": spec.head.hidden,
            "hidden_nonlinearity": spec.head.hidden_nonlinearity,
            "classes": spec.head.classes,
        },
    }


_MISSING = object()


def _get(d: dict, key: str, path: str, kind, *, optional=False, default=_MISSING):
    where = f"{path}.{key}" if path else key
    if key not in d:
        if default is not _MISSING:
            return default
        raise SpecFormatError(where, "missing required field")
    value = d[key]
    if value is None and optional:
        return None
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise SpecFormatError(where, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def _build(path: str, ctor, **kwargs):
    try:
        return ctor(**kwargs)
    except SpecFormatError:
        raise
    except ValueError as exc:
        raise SpecFormatError(path, str(exc)) from None


def spec_from_dict(doc: dict[str, Any]) -> ModelSpec:
    """Inverse of :func:`spec_to_dict`; schema violations raise :class:`SpecFormatError`."""
    if not isinstance(doc, dict):
        raise SpecFormatError("$", "expected a JSON object")
    schema = _get(doc, "schema", "", str)
    if schema != SCHEMA_ID:
        raise SpecFormatError("schema", f"unsupported schema {schema!r}, expected {SCHEMA_ID!r}")
    stem_d = _get(doc, "stem", "", dict)
    stem = _build("stem", StemSpec,
                  out_channels=_get(stem_d, "out_channels", "stem", int),
                  stride=_get(stem_d, "stride", "stem", int),
                  nonlinearity=_get(stem_d, "nonlinearity", "stem", str))
    blocks = []
    for i, bd in enumerate(_get(doc, "blocks", "", list)):
        p = f"blocks[{i}]"
        if not isinstance(bd, dict):
            raise SpecFormatError(p, "expected an object")
        blocks.append(_build(p, BlockSpec,
                             kind=_get(bd, "kind", p, str),
                             out_channels=_get(bd, "out_channels", p, int),
                             stride=_get(bd, "stride", p, int),
                             expansion=_get(bd, "expansion", p, float),
                             use_se=_get(bd, "use_se", p, bool),
                             se_reduction=_get(bd, "se_reduction", p, int, default=12),
                             act_after_expand=_get(bd, "act_after_expand", p, str),
                             act_after_dw=_get(bd, "act_after_dw", p, str),
                             shortcut=_get(bd, "shortcut", p, str)))
    pen_d = _get(doc, "penultimate", "", dict, optional=True)
    pen = None
    if pen_d is not None:
        pen = _build("penultimate", PenultimateSpec,
                     out_channels=_get(pen_d, "out_channels", "penultimate", int),
                     nonlinearity=_get(pen_d, "nonlinearity", "penultimate", str))
    head_d = _get(doc, "head", "", dict)
    head = _build("head", HeadSpec,
                  classes=_get(head_d, "classes", "head", int),
                  hidden=_get(head_d, "hidden", "head", int, optional=True),
                  hidden_nonlinearity=_get(head_d, "hidden_nonlinearity", "head", str, default="relu6"))
    return _build("$", ModelSpec,
                  name=_get(doc, "name", "", str),
                  stem=stem, blocks=tuple(blocks), penultimate=pen, head=head,
                  in_channels=_get(doc, "in_channels", "", int, default=3))


def export_spec(spec: ModelSpec, path: str | os.PathLike) -> None:
    text = json.dumps(spec_to_dict(spec), indent=2) + "\n"
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def import_spec(path: str | os.PathLike) -> ModelSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SpecFormatError("$", f"invalid JSON in {path}: {exc}") from None
    return spec_from_dict(doc)


def json_schema() -> dict[str, Any]:
    """The published JSON Schema for ``rexrank-spec/1`` documents."""
    text = resources.files("rexrank").joinpath("schema/rexrank-spec-1.json").read_text(encoding="utf-8")
    return json.loads(text)
