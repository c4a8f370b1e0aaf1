"""End-to-end orchestration: block fits, combination, selection, curves.

The distributed step fits all blocks (concurrently when workers are
granted).  Smoothing-weight selection then runs under one of two
schemas: (1) score all lambda candidates concurrently, each candidate
re-evaluating its blocks serially, or (2) walk the lambda grid serially
and parallelize the per-block re-evaluation inside each candidate.  Both
assemble results in fixed (lambda, block) order, so the schema and the
worker count never change any number.
"""

from __future__ import annotations

import functools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .combine import (
    CombinedFit,
    combined_fit,
    curve_and_bands,
    gcv,
    reevaluate,
    stack,
)
from .constraint import ConstraintMap, Smoothness, build_constraints
from .errors import ConfigurationError
from .model import BasisSpec, BlockModel, Link
from .partition import BlockData, LongData, Partition, split
from .qif import BlockFit, Correlation, fit_block

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitSettings:
    """Everything the pipeline needs besides the data itself."""

    part: Partition
    basis: BasisSpec
    link: Link
    n_scalar: int
    corr: Correlation
    smoothness: Smoothness
    lambda_grid: tuple[float, ...] = (0.0,)
    schema: int = 1
    workers: int = 1
    alpha: float = 0.05
    grid_step: float | None = None
    qif_tol: float = 1e-8
    qif_max_iter: int = 50

    def __post_init__(self) -> None:
        if self.schema not in (1, 2):
            raise ConfigurationError(f"schema must be 1 or 2, got {self.schema}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        if not self.lambda_grid:
            raise ConfigurationError("lambda grid must be non-empty")
        if any(lam < 0 for lam in self.lambda_grid):
            raise ConfigurationError("lambda values must be >= 0")


@dataclass
class RunResult:
    """Pipeline output: the combined fit, curves per covariate, timings."""

    fit: CombinedFit
    cmap: ConstraintMap
    model: BlockModel
    block_fits: list[BlockFit]
    curve_grid: np.ndarray
    curves: list[dict]
    timings: dict[str, float] = field(default_factory=dict)


def _fit_task(args) -> BlockFit:
    block, corr, model, tol, max_iter = args
    return fit_block(block, corr, model, tol=tol, max_iter=max_iter)


def default_curve_grid(data: LongData, settings: FitSettings) -> np.ndarray:
    """Every observed time, or a uniform grid when grid_step is set."""
    if settings.grid_step is None:
        return np.unique(data.times)
    lo, hi = settings.part.edges[0], settings.part.edges[-1]
    if settings.grid_step <= 0:
        raise ConfigurationError("grid step must be positive")
    count = int(np.floor((hi - lo) / settings.grid_step + 1e-9)) + 1
    return lo + settings.grid_step * np.arange(count)


def fit_pipeline(data: LongData, settings: FitSettings) -> RunResult:
    """Run the full estimation on long-format data."""
    if data.q != settings.basis.q:
        raise ConfigurationError(
            f"data has {data.q} functional covariates but {settings.basis.q} degrees declared"
        )
    if data.p != settings.n_scalar:
        raise ConfigurationError(
            f"data has {data.p} scalar covariates but n_scalar={settings.n_scalar}"
        )
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    blocks = split(data, settings.part)
    model = BlockModel(basis=settings.basis, link=settings.link, n_scalar=settings.n_scalar)
    cmap = build_constraints(settings.part, settings.basis, settings.n_scalar, settings.smoothness)
    timings["split"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tasks = [(b, settings.corr, model, settings.qif_tol, settings.qif_max_iter) for b in blocks]
    block_fits = _pmap(_fit_task, tasks, settings.workers)
    timings["distributed"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sm0 = stack(block_fits, cmap)
    timings["stack"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    dispersions = tuple(f.dispersion for f in block_fits)
    selection = _run_gcv(settings, blocks, model, cmap, sm0, dispersions)
    timings["gcv"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fit = combined_fit(selection, cmap, block_fits, alpha=settings.alpha)
    timings["covariance"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    grid = default_curve_grid(data, settings)
    curves = []
    for u in range(settings.basis.q):
        beta, se, lower, upper = curve_and_bands(
            fit.theta_star, fit.cov, cmap, u, grid, settings.alpha
        )
        curves.append(
            {"u": u + 1, "t": grid, "beta_hat": beta, "se": se, "lower": lower, "upper": upper}
        )
    timings["curves"] = time.perf_counter() - t0

    logger.info(
        "fit: N=%d, J=%d, lambda=%g, timings %s",
        fit.n_subjects,
        settings.part.n_blocks,
        fit.lam,
        {k: round(v, 4) for k, v in timings.items()},
    )
    return RunResult(
        fit=fit,
        cmap=cmap,
        model=model,
        block_fits=block_fits,
        curve_grid=grid,
        curves=curves,
        timings=timings,
    )


def _run_gcv(settings, blocks, model, cmap, sm0, dispersions):
    """Run selection under the configured schema.

    Schema 1 parallelizes over lambda candidates; schema 2 parallelizes
    the per-block re-evaluation inside each lambda.
    """
    serial_reeval = functools.partial(
        reevaluate,
        blocks=blocks,
        corr=settings.corr,
        model=model,
        dispersions=dispersions,
        cmap=cmap,
    )
    if settings.workers <= 1:
        return gcv(settings.lambda_grid, sm0, cmap, serial_reeval)
    if settings.schema == 1:
        with ProcessPoolExecutor(max_workers=min(settings.workers, len(settings.lambda_grid))) as ex:
            return gcv(settings.lambda_grid, sm0, cmap, serial_reeval, map_fn=ex.map)
    with ProcessPoolExecutor(max_workers=min(settings.workers, len(blocks))) as ex:
        parallel_reeval = functools.partial(
            reevaluate,
            blocks=blocks,
            corr=settings.corr,
            model=model,
            dispersions=dispersions,
            cmap=cmap,
            map_fn=ex.map,
        )
        return gcv(settings.lambda_grid, sm0, cmap, parallel_reeval)


def _pmap(fn, items, workers: int) -> list:
    """Order-preserving map, pooled across processes when workers > 1."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


def make_reevaluator(
    blocks: list[BlockData],
    settings: FitSettings,
    dispersions: tuple[float, ...],
    cmap: ConstraintMap,
):
    """Picklable re-evaluation closure for the reference GMM solver."""
    model = BlockModel(basis=settings.basis, link=settings.link, n_scalar=settings.n_scalar)
    return functools.partial(
        reevaluate,
        blocks=blocks,
        corr=settings.corr,
        model=model,
        dispersions=dispersions,
        cmap=cmap,
    )


def result_payload(result: RunResult, config_hash: str, version: str) -> dict:
    """JSON-ready result bundle; deliberately free of timing fields so
    identical runs produce identical bytes."""
    fit = result.fit
    return {
        "version": version,
        "config_hash": config_hash,
        "n_subjects": fit.n_subjects,
        "alpha": fit.alpha,
        "lambda_selected": fit.lam,
        "gcv_table": fit.gcv_table,
        "constraints": {
            "smoothness": result.cmap.smoothness.value,
            "dim_theta": result.cmap.dim_theta,
            "dim_theta_star": result.cmap.dim_theta_star,
            "rank_H": result.cmap.rank_H,
        },
        "labels": list(fit.labels),
        "theta_star": fit.theta_star.tolist(),
        "theta_star_se": fit.theta_star_se.tolist(),
        "theta": fit.theta.tolist(),
        "eta": {
            "estimate": fit.eta.tolist(),
            "se": fit.eta_se.tolist(),
            "lower": fit.eta_lower.tolist(),
            "upper": fit.eta_upper.tolist(),
        },
        "blocks": fit.block_summaries,
    }


def write_curves_csv(path: str, result: RunResult, metadata: dict[str, str]) -> None:
    """Plot-ready curve table with '#' metadata lines before the header."""
    with open(path, "w", newline="") as fh:
        for key, value in metadata.items():
            fh.write(f"# {key}={value}\n")
        fh.write("u,t,beta_hat,lower,upper\n")
        for curve in result.curves:
            u = curve["u"]
            for t, b, lo, hi in zip(
                curve["t"], curve["beta_hat"], curve["lower"], curve["upper"]
            ):
                fh.write(f"{u},{float(t)!r},{float(b)!r},{float(lo)!r},{float(hi)!r}\n")
