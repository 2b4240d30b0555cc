"""Acceptance checks, one per criterion; each prints a single PASS/FAIL line with its runtime."""
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from rexrank.archspec import REXNET_TARGET, calibrate_linear, channels_from_linear, fit_linear, rexnet_layout
from rexrank.cli import EXIT_OK, main
from rexrank.costmodel import Budget, check_budget, model_cost
from rexrank.numerics import Nonlinearity, RankSettings
from rexrank.randnet import LayerArch, LayerKind, SweepSpec, run_sweep, run_sweep_tolerances
from rexrank.search import External, SearchSpec, budget_sweep, proxy_spec, run_search, serve_scores

MOBILENET_V2 = "32 / 16(×1)-24(×2)-32(×3)-64(×4)-96(×3)-160(×3)-320(×1)"
TESTS = Path(__file__).parent


def report(capsys, number, ok, elapsed, limit, detail):
    status = "PASS" if ok and elapsed < limit else "FAIL"
    with capsys.disabled():
        print(f"\ncriterion {number}: {status} ({elapsed:.1f}s, limit {limit:g}s) {detail}")
    assert ok, detail
    assert elapsed < limit, f"runtime {elapsed:.1f}s exceeds {limit:g}s"


def test_criterion_1_cost_model_fidelity(capsys, tmp_path):
    t = time.perf_counter()
    code = main(["cost", "--config", MOBILENET_V2, "--resolution", "224", "--classes", "1000",
                 "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t
    doc = json.loads((tmp_path / "cost.json").read_text())
    dp, dm = doc["params"] / 3.4e6 - 1, doc["macs"] / 0.30e9 - 1
    ok = code == EXIT_OK and abs(dp) <= 0.03 and abs(dm) <= 0.03
    capsys.readouterr()
    report(capsys, 1, ok, elapsed, 1.0,
           f"params={doc['params']} ({dp:+.2%}) macs={doc['macs']} ({dm:+.2%})")


def test_criterion_2_drastic_expansion_harms_rank(capsys):
    t = time.perf_counter()
    spec = SweepSpec(LayerArch(LayerKind.IB_DW), Nonlinearity.parse("silu"), ratio_grid=(0.1, 0.8), trials=200)
    tols = (1e-1, 1e-2, 1e-3)
    curves = run_sweep_tolerances(spec, [RankSettings(x) for x in tols])
    elapsed = time.perf_counter() - t
    parts, ok = [], True
    for tol, c in zip(tols, curves):
        lo, hi = c.at(0.1).mean_rank_ratio, c.at(0.8).mean_rank_ratio
        ok &= hi - lo >= 0.03
        parts.append(f"tol={tol:g}: r0.1={lo:.4f} r0.8={hi:.4f} margin={hi - lo:.4f}")
    report(capsys, 2, ok, elapsed, 180.0, "; ".join(parts))


def test_criterion_3_nonlinearities_expand_rank(capsys):
    t = time.perf_counter()
    relu = run_sweep(SweepSpec(LayerArch(LayerKind.CONV1X1), Nonlinearity.parse("relu"), trials=200))
    ident = run_sweep(SweepSpec(LayerArch(LayerKind.CONV1X1), Nonlinearity.parse("identity"), trials=200))
    elapsed = time.perf_counter() - t
    low = relu.ratios <= 0.5 + 1e-9
    expand = relu.means[low] - relu.ratios[low]
    ident_dev = np.abs(ident.means - ident.ratios).max()
    ok = bool(np.all(expand >= 0.02)) and ident_dev <= 1 / 32
    report(capsys, 3, ok, elapsed, 120.0,
           f"min(relu - r) over r<=0.5 = {expand.min():.4f} (need >= 0.02); "
           f"max|identity - r| = {ident_dev:.4f} (need <= {1 / 32:.4f})")


def test_criterion_4_smooth_nonlinearities_at_low_ratio(capsys):
    t = time.perf_counter()
    means = {}
    for name in ("relu6", "silu", "elu"):
        c = run_sweep(SweepSpec(LayerArch(LayerKind.CONV1X1), Nonlinearity.parse(name), ratio_grid=(0.1,),
                                trials=200))
        means[name] = c.at(0.1).mean_rank_ratio
    elapsed = time.perf_counter() - t
    d_silu, d_elu = means["silu"] - means["relu6"], means["elu"] - means["relu6"]
    ok = d_silu >= 0 and d_elu >= 0
    strict = "strict" if d_silu > 0 and d_elu > 0 else "not strict"
    report(capsys, 4, ok, elapsed, 120.0,
           f"relu6={means['relu6']:.4f} silu={means['silu']:.4f} ({d_silu:+.4f}) "
           f"elu={means['elu']:.4f} ({d_elu:+.4f}); {strict}")


def test_criterion_5_search_soundness(capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    argv = ["search", "--depth", "5", "--max-params", "200000", "--max-macs", "30000000", "--n", "200",
            "--trials", "16", "--seed", "42", "--out", "run"]
    t = time.perf_counter()
    assert main(argv) == EXIT_OK
    first = {p.name: p.read_bytes() for p in sorted((tmp_path / "run").iterdir())}
    assert main(argv) == EXIT_OK
    second = {p.name: p.read_bytes() for p in sorted((tmp_path / "run").iterdir())}
    elapsed = time.perf_counter() - t
    capsys.readouterr()

    rows = [ln for ln in first["candidates.csv"].decode().splitlines() if not ln.startswith("#")][1:]
    budget = Budget(200_000, 30_000_000)
    feasible = 0
    for row in rows:
        f = row.split(",")
        channels = [int(x) for x in f[1:6]]
        replay = model_cost(proxy_spec(channels), 32, 100)
        feasible += (channels == sorted(channels) and check_budget(replay, budget)
                     and (replay.params, replay.macs) == (int(f[6]), int(f[7])))
    summary = json.loads(first["summary.json"])
    sizes = [summary["deciles"][k]["size"] for k in ("top10", "mid10", "bottom10")]

    ex = tmp_path / "ex"
    serve_scores(ex, lambda c: -fit_linear(c["channels"]).rms_residual)
    echo = run_search(SearchSpec(5, budget, 200, fitness=External(str(ex), timeout=120)))
    best = fit_linear(echo.best.channels).rms_residual
    oracle = all(best <= fit_linear(echo.by_id(i).channels).rms_residual for i in echo.deciles["bottom10"].members)

    ok = len(rows) == 200 and feasible == 200 and sizes == [20, 20, 20] and first == second and oracle
    report(capsys, 5, ok, elapsed, 300.0,
           f"feasible={feasible}/{len(rows)} buckets={sizes} identical={first == second} "
           f"echo_oracle={oracle} (runtime covers both runs)")


def test_criterion_6_rexnet_calibration(capsys):
    t = time.perf_counter()
    cal = calibrate_linear(rexnet_layout(), REXNET_TARGET)
    elapsed = time.perf_counter() - t
    channels = channels_from_linear(cal.param)
    dp, dm = cal.report.params / 4.8e6 - 1, cal.report.macs / 0.40e9 - 1
    rms = fit_linear(channels).rms_residual
    ok = abs(dp) <= 0.05 and abs(dm) <= 0.05 and channels == sorted(channels) and rms < 1.0
    report(capsys, 6, ok, elapsed, 30.0,
           f"a={cal.param.slope_a:.4f} b={cal.param.intercept_b:.4f} params={cal.report.params} ({dp:+.2%}) "
           f"macs={cal.report.macs} ({dm:+.2%}) rms={rms:.3f}")


PROPERTY_TESTS = [
    "test_archspec.py::test_fit_recovers_line",
    "test_archspec.py::test_body_params_scale_quadratically",
    "test_archspec.py::test_rexnet_activation_rule",
    "test_archspec.py::test_builders_satisfy_monotone_widths",
    "test_modelspec.py::test_export_import_round_trip",
    "test_modelspec.py::test_random_specs_round_trip",
    "test_search.py::test_decile_score_ordering",
    "test_search.py::test_accepted_candidates_feasible",
    "test_numerics.py::test_rank_and_norm_bounds",
    "test_numerics.py::test_rank_of_product_bounded",
    "test_numerics.py::test_closed_form_values",
    "test_numerics.py::test_silu_one_matches_known_digits",
    "test_costmodel.py::test_totals_are_sums_of_layers",
    "test_costmodel.py::test_widening_never_lowers_cost",
    "test_costmodel.py::test_config_round_trip",
    "test_randnet.py::test_identity_conv1x1_ratio_is_exact",
    "test_randnet.py::test_identity_conv1x1_ratio_is_exact_at_default_tolerance",
]


def test_criterion_7_property_suites(capsys):
    t = time.perf_counter()
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                          *(str(TESTS / n) for n in PROPERTY_TESTS)], capture_output=True, text=True)
    elapsed = time.perf_counter() - t
    tail = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr.strip()[-200:]
    report(capsys, 7, res.returncode == 0, elapsed, 120.0, tail)


def test_criterion_8_depth_fixed_sweep(capsys):
    t = time.perf_counter()
    results = budget_sweep(18, [30_000_000, 50_000_000, 70_000_000])
    elapsed = time.perf_counter() - t
    slopes = [r.top_slope for r in results]
    ok = all(b >= a for a, b in zip(slopes, slopes[1:]))
    report(capsys, 8, ok, elapsed, 600.0,
           "top-decile slopes " + ", ".join(f"{r.macs // 1_000_000}M={r.top_slope:.4f}" for r in results))
