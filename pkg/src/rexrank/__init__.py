"""Rank-expansion analysis of random networks, budget-constrained channel search
and ReXNet-family architecture construction with exact cost accounting."""
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .numerics import Nonlinearity, RankSettings, batch_standardize, matmul, nuclear_norm, numerical_rank
from .randnet import LayerArch, LayerKind, RankCurve, SweepSpec, run_sweep
from .modelspec import ModelSpec, export_spec, import_spec
from .costmodel import Budget, CostReport, check_budget, model_cost, parse_config_string
from .archspec import LinearParam, build_rexnet, build_rexnet_lite, build_rexnet_plain, calibrate_linear, fit_linear
from .search import External, RankScore, SearchSpec, aggregate, run_search

__all__ = [
    "__version__",
    "Nonlinearity", "RankSettings", "batch_standardize", "matmul", "nuclear_norm", "numerical_rank",
    "LayerArch", "LayerKind", "RankCurve", "SweepSpec", "run_sweep",
    "ModelSpec", "export_spec", "import_spec",
    "Budget", "CostReport", "check_budget", "model_cost", "parse_config_string",
    "LinearParam", "build_rexnet", "build_rexnet_lite", "build_rexnet_plain", "calibrate_linear", "fit_linear",
    "External", "RankScore", "SearchSpec", "aggregate", "run_search",
]
