import json

import jsonschema
import pytest
from hypothesis import given, settings, strategies as st

from rexrank.archspec import build_rexnet, build_rexnet_lite, build_rexnet_plain
from rexrank.modelspec import (
    SCHEMA_ID,
    BlockKind,
    BlockSpec,
    HeadSpec,
    ModelSpec,
    PenultimateSpec,
    Shortcut,
    SpecFormatError,
    StemSpec,
    export_spec,
    import_spec,
    json_schema,
    spec_from_dict,
    spec_to_dict,
)

BUILT = [build_rexnet(), build_rexnet(2.0, se_first=True), build_rexnet_lite(), build_rexnet_plain(0.5)]


@pytest.mark.parametrize("spec", BUILT, ids=lambda s: s.name)
def test_export_import_round_trip(spec, tmp_path):
    path = tmp_path / "m.json"
    export_spec(spec, path)
    assert import_spec(path) == spec
    assert json.loads(path.read_text())["schema"] == SCHEMA_ID


@pytest.mark.parametrize("spec", BUILT, ids=lambda s: s.name)
def test_exports_validate_against_schema(spec):
    jsonschema.validate(spec_to_dict(spec), json_schema())


def test_schema_rejects_extra_keys():
    doc = spec_to_dict(build_rexnet())
    doc["extra"] = 1
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(doc, json_schema())


def test_missing_blocks_named():
    doc = spec_to_dict(build_rexnet())
    del doc["blocks"]
    with pytest.raises(SpecFormatError, match="blocks") as info:
        spec_from_dict(doc)
    assert info.value.path == "blocks"


def test_bad_field_type_named_with_path():
    doc = spec_to_dict(build_rexnet())
    doc["blocks"][3]["out_channels"] = "wide"
    with pytest.raises(SpecFormatError) as info:
        spec_from_dict(doc)
    assert info.value.path == "blocks[3].out_channels"


def test_wrong_schema_and_invalid_json(tmp_path):
    doc = spec_to_dict(build_rexnet())
    doc["schema"] = "other/2"
    with pytest.raises(SpecFormatError, match="schema"):
        spec_from_dict(doc)
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(SpecFormatError):
        import_spec(bad)


def test_narrowing_widths_rejected():
    blocks = [BlockSpec(BlockKind.INVERTED_BOTTLENECK, 32), BlockSpec(BlockKind.INVERTED_BOTTLENECK, 16)]
    with pytest.raises(ValueError, match="non-decreasing"):
        ModelSpec("x", StemSpec(16), blocks)
    doc = spec_to_dict(build_rexnet())
    doc["blocks"][5]["out_channels"] = 8
    with pytest.raises(SpecFormatError):
        spec_from_dict(doc)


def test_stride_two_has_no_shortcut():
    with pytest.raises(ValueError):
        BlockSpec(BlockKind.INVERTED_BOTTLENECK, 32, stride=2, shortcut=Shortcut.ZERO_PAD)


def test_activation_names_are_canonical():
    b = BlockSpec(BlockKind.INVERTED_BOTTLENECK, 32, act_after_expand="swish")
    assert b.act_after_expand == "silu"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(8, 64), st.sampled_from([1, 2]), st.sampled_from([1.0, 4.0, 6.0]),
                          st.booleans()), min_size=1, max_size=8),
       st.integers(8, 64), st.one_of(st.none(), st.integers(64, 2048)), st.one_of(st.none(), st.integers(8, 512)))
def test_random_specs_round_trip(rows, stem, pen, hidden):
    widths = sorted(r[0] for r in rows)
    blocks = tuple(BlockSpec(BlockKind.INVERTED_BOTTLENECK, w, s, e, se,
                             shortcut=Shortcut.NONE if s == 2 else Shortcut.ZERO_PAD)
                   for w, (_, s, e, se) in zip(widths, rows))
    spec = ModelSpec("r", StemSpec(stem), blocks, None if pen is None else PenultimateSpec(pen),
                     HeadSpec(10, hidden))
    doc = spec_to_dict(spec)
    jsonschema.validate(doc, json_schema())
    assert spec_from_dict(json.loads(json.dumps(doc))) == spec
