import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rexrank.archspec import (
    PLAIN_STRIDES,
    REXNET_TARGET,
    Budget,
    CalibrationError,
    LinearParam,
    build_rexnet,
    build_rexnet_lite,
    build_rexnet_plain,
    calibrate_linear,
    channels_from_linear,
    default_plain_linear,
    default_rexnet_linear,
    fit_linear,
    plain_layout,
    rexnet_layout,
)
from rexrank.costmodel import model_cost
from rexrank.modelspec import BlockKind, Shortcut

SEARCHED_BEST = [24, 33, 42, 50, 59, 68, 77, 85, 94]


def _lstsq_oracle(c):
    # closed-form simple regression, independent of the lstsq path
    c = np.asarray(c, float)
    i = np.arange(1, len(c) + 1, dtype=float)
    slope = ((i - i.mean()) * (c - c.mean())).sum() / ((i - i.mean()) ** 2).sum()
    return slope, c.mean() - slope * i.mean()


def _body_params(spec):
    return sum(l.params for l in model_cost(spec).per_layer if l.name.startswith("block"))


# --- linear parameterization -------------------------------------------------------


def test_channels_from_linear_examples():
    assert channels_from_linear(LinearParam(0, 36, 5)) == [36] * 5
    assert channels_from_linear(LinearParam(10.5, 5, 3)) == [16, 26, 37]
    got = channels_from_linear(LinearParam(8.75, 15.25, 9))
    assert np.max(np.abs(np.array(got) - SEARCHED_BEST)) <= 1


def test_channels_below_minimum_rejected():
    with pytest.raises(ValueError, match="minimum"):
        channels_from_linear(LinearParam(1.0, 2.0, 4))


def test_linear_param_validation():
    with pytest.raises(ValueError):
        LinearParam(-1.0, 10, 3)
    with pytest.raises(ValueError):
        LinearParam(1.0, 10, 0)


def test_fit_linear_examples():
    f = fit_linear(SEARCHED_BEST)
    slope, intercept = _lstsq_oracle(SEARCHED_BEST)
    assert f.slope == pytest.approx(slope) and f.intercept == pytest.approx(intercept)
    assert f.slope == pytest.approx(8.73, abs=0.01) and f.intercept == pytest.approx(15.4, abs=0.1)
    assert f.rms_residual < 0.6
    z = fit_linear([36, 36, 36, 36])
    assert z.slope == pytest.approx(0, abs=1e-12) and z.rms_residual == pytest.approx(0, abs=1e-12)
    e = fit_linear([10, 20, 30])
    assert (e.slope, e.intercept, e.rms_residual) == pytest.approx((10, 0, 0), abs=1e-9)
    with pytest.raises(ValueError):
        fit_linear([10])


@settings(max_examples=500, deadline=None)
@given(st.floats(0, 20), st.floats(8, 60), st.integers(5, 30))
def test_fit_recovers_line(a, b, d):
    f = fit_linear(channels_from_linear(LinearParam(a, b, d)))
    assert abs(f.slope - a) <= 0.5
    assert abs(f.intercept - b) <= 1.5


# --- builders ----------------------------------------------------------------------


def test_rexnet_structure():
    spec = build_rexnet()
    assert len(spec.blocks) == 17
    assert spec.name == "rexnet-x1"
    assert spec.blocks[0].expansion == 1.0
    assert all(b.expansion == 6.0 for b in spec.blocks[1:])
    assert [i for i, b in enumerate(spec.blocks) if b.stride == 2] == [1, 3, 6, 13]
    assert spec.stem.out_channels == 32 and spec.stem.nonlinearity == "relu6"
    assert spec.penultimate.out_channels == 1280
    assert fit_linear(spec.channels).rms_residual < 1.0
    assert spec.channels == sorted(spec.channels)


def test_rexnet_activation_rule():
    for m in (0.5, 1.0, 2.0):
        for b in build_rexnet(m).blocks:
            assert b.act_after_dw in ("relu6", "relu")
            if b.expansion != 1:
                assert b.act_after_expand == "silu"


def test_rexnet_shortcuts():
    spec = build_rexnet()
    c_in = spec.stem.out_channels
    for b in spec.blocks:
        if b.stride == 2 or b.out_channels < c_in:
            assert b.shortcut is Shortcut.NONE
        else:
            assert b.shortcut in (Shortcut.IDENTITY, Shortcut.ZERO_PAD)
        c_in = b.out_channels


def test_rexnet_se_default_and_first_block():
    spec = build_rexnet()
    assert not spec.blocks[0].use_se and all(b.use_se for b in spec.blocks[1:])
    assert build_rexnet(se_first=True).blocks[0].use_se
    assert not any(b.use_se for b in build_rexnet(use_se=False).blocks)


def test_multiplier_doubles_widths():
    one, two = build_rexnet(1.0), build_rexnet(2.0)
    assert all(abs(w2 - 2 * w1) <= 1 for w1, w2 in zip(one.channels, two.channels))
    assert two.stem.out_channels == 64 and two.penultimate.out_channels == 2560
    assert build_rexnet(0.5).penultimate.out_channels == 1280


@pytest.mark.parametrize("builder", [build_rexnet, build_rexnet_lite, build_rexnet_plain])
@pytest.mark.parametrize("m", [0.49, 3.01])
def test_multiplier_range(builder, m):
    with pytest.raises(ValueError):
        builder(m)


@pytest.mark.parametrize("m", [0.5, 0.75, 1.5, 2.0, 3.0])
def test_body_params_scale_quadratically(m):
    ratio = _body_params(build_rexnet(m)) / _body_params(build_rexnet(1.0))
    assert ratio == pytest.approx(m * m, rel=0.05)


def test_plain_structure():
    for m in (0.5, 1.0, 2.0):
        spec = build_rexnet_plain(m)
        assert len(spec.blocks) == len(PLAIN_STRIDES) == 13
        assert all(b.kind is BlockKind.DEPTHWISE_SEPARABLE for b in spec.blocks)
        assert all(b.shortcut is Shortcut.NONE and not b.use_se for b in spec.blocks)
        assert all(b.act_after_expand == "silu" and b.act_after_dw == "relu" for b in spec.blocks)
        assert spec.stem.nonlinearity == "relu"
    assert build_rexnet_plain().channels == channels_from_linear(default_plain_linear())


def test_lite_structure():
    spec = build_rexnet_lite()
    assert len(spec.blocks) == 17
    assert not any(b.use_se for b in spec.blocks)
    acts = [spec.stem.nonlinearity, spec.penultimate.nonlinearity, spec.head.hidden_nonlinearity]
    acts += [a for b in spec.blocks for a in (b.act_after_expand, b.act_after_dw)]
    assert "silu" not in acts
    assert spec.head.hidden == 1280
    names = [l.name for l in model_cost(spec).per_layer]
    assert "head.hidden" in names and "head.hidden" not in [l.name for l in model_cost(build_rexnet()).per_layer]


def test_lite_smaller_at_equal_head():
    # Oracle: recompute both from per-layer reports. Lite drops SE; the heads match.
    full = model_cost(build_rexnet(use_se=True))
    lite = model_cost(build_rexnet_lite(hidden=None))
    se = sum(l.params for l in full.per_layer if l.name.endswith(".se"))
    assert se > 0
    assert lite.params == full.params - se
    assert lite.params < full.params


def test_builders_satisfy_monotone_widths():
    for builder, depth in ((build_rexnet, 17), (build_rexnet_lite, 17), (build_rexnet_plain, 13)):
        for m in (0.5, 1.0, 1.3, 3.0):
            spec = builder(m)
            assert len(spec.blocks) == depth
            assert spec.channels == sorted(spec.channels)
            assert min(spec.channels) >= 8


# --- calibration -------------------------------------------------------------------


def test_rexnet_calibration_hits_targets():
    cal = calibrate_linear(rexnet_layout(), REXNET_TARGET)
    assert abs(cal.report.params / 4.8e6 - 1) <= 0.05
    assert abs(cal.report.macs / 0.40e9 - 1) <= 0.05
    again = model_cost(rexnet_layout().build(channels_from_linear(cal.param)))
    assert (again.params, again.macs) == (cal.report.params, cal.report.macs)
    assert cal.param == default_rexnet_linear()
    assert calibrate_linear(rexnet_layout(), REXNET_TARGET) == cal


def test_calibration_optimum_against_grid_oracle():
    cal = calibrate_linear(rexnet_layout(), REXNET_TARGET)
    layout = rexnet_layout()
    best = cal_score = max(abs(cal.report.params / 4.8e6 - 1), abs(cal.report.macs / 0.40e9 - 1))
    for a in np.linspace(8.0, 13.0, 11):
        for b in np.linspace(-2.0, 6.0, 9):
            try:
                r = model_cost(layout.build(channels_from_linear(LinearParam(a, b, 17))))
            except ValueError:
                continue
            ratios = (r.params / 4.8e6, r.macs / 0.40e9)
            if all(0.90 <= x <= 1.02 for x in ratios):
                best = min(best, max(abs(x - 1) for x in ratios))
    assert cal_score <= best + 1e-12


def test_calibration_infeasible():
    with pytest.raises(CalibrationError) as info:
        calibrate_linear(rexnet_layout(), Budget(1000, None))
    assert info.value.nearest is not None


def test_calibration_constant_optimum():
    layout = plain_layout()
    target = model_cost(layout.build([40] * 13))
    cal = calibrate_linear(layout, Budget(target.params, target.macs))
    assert cal.param.slope_a == 0
    assert channels_from_linear(cal.param) == [40] * 13
