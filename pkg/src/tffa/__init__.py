"""Temporal functional factor analysis for spatio-temporal imaging data."""

__version__ = "0.1.0"

from .tensorio import ScanTensor, SpatialGrid, read_tensor, write_tensor  # noqa: E402
from .loadings import LoadingSet  # noqa: E402
from .simgen import SimConfig, simulate_dataset  # noqa: E402
from .covassembly import build_band_mask, empirical_spatial_cov  # noqa: E402
from .completion import CompletionOptions, complete_rank, extract_loadings, rank_path, select_rank  # noqa: E402
from .rotation import rotate  # noqa: E402
from .scores import build_basis, factor_cov_diagnostic, fosr_scores, pwls_scores  # noqa: E402

__all__ = [
    "ScanTensor", "SpatialGrid", "read_tensor", "write_tensor", "LoadingSet", "SimConfig",
    "simulate_dataset", "build_band_mask", "empirical_spatial_cov", "CompletionOptions",
    "complete_rank", "extract_loadings", "rank_path", "select_rank", "rotate", "build_basis",
    "factor_cov_diagnostic", "fosr_scores", "pwls_scores",
]
