"""Blockwise functional regression with smooth recombination.

Fit intensively measured longitudinal outcomes by partitioning the time
axis into blocks, fitting a low-degree polynomial model per block with a
quadratic-inference objective, and then combining the block estimates
into one smooth curve through a continuity-constrained, optionally
penalized GMM step.  Standard errors come from a sandwich covariance of
the stacked block scores.
"""

from .combine import (
    CombinedFit,
    GcvCandidate,
    GcvSelection,
    StackedMoments,
    combined_fit,
    covariance,
    curve_and_bands,
    eta_and_bands,
    gcv,
    gmm_iterative,
    reevaluate,
    scm_one_step,
    select_gcv,
    stack,
)
from .constraint import (
    ConstraintMap,
    ParamLayout,
    Smoothness,
    build_constraints,
    build_D,
    build_H,
    build_Rtilde,
)
from .errors import ConfigurationError, DataError, NumericError, PipelineError
from .model import BasisSpec, BlockModel, Link
from .partition import (
    BlockData,
    LongData,
    Partition,
    from_balanced_arrays,
    make_partition,
    read_long_csv,
    split,
    write_long_csv,
)
from .pipeline import FitSettings, RunResult, fit_pipeline
from .qif import (
    BlockFit,
    Correlation,
    block_fit_from_json,
    block_fit_to_json,
    fit_block,
    qif_objective,
)
from .simulate import (
    McReport,
    Scenario,
    generate,
    make_scenario,
    run_mc,
    run_replicate,
    truth_theta,
)

__version__ = "0.1.0"

__all__ = [
    "BasisSpec",
    "BlockData",
    "BlockFit",
    "BlockModel",
    "CombinedFit",
    "ConfigurationError",
    "ConstraintMap",
    "Correlation",
    "DataError",
    "FitSettings",
    "GcvCandidate",
    "GcvSelection",
    "Link",
    "LongData",
    "McReport",
    "NumericError",
    "ParamLayout",
    "Partition",
    "PipelineError",
    "RunResult",
    "Scenario",
    "Smoothness",
    "StackedMoments",
    "block_fit_from_json",
    "block_fit_to_json",
    "build_D",
    "build_H",
    "build_Rtilde",
    "build_constraints",
    "combined_fit",
    "covariance",
    "curve_and_bands",
    "eta_and_bands",
    "fit_block",
    "fit_pipeline",
    "from_balanced_arrays",
    "gcv",
    "generate",
    "gmm_iterative",
    "make_partition",
    "make_scenario",
    "qif_objective",
    "read_long_csv",
    "reevaluate",
    "run_mc",
    "run_replicate",
    "scm_one_step",
    "select_gcv",
    "split",
    "stack",
    "truth_theta",
    "write_long_csv",
    "__version__",
]
