"""Combination of block fits into one constrained estimate.

The per-block first-order conditions stack into

    Gbar_N(theta) = vec_j[ (dg_j)' C_j^{-1} gbar_j(E_j theta) ],

with per-subject analogues G_i whose sample second moment
V = (1/N) sum_i G_i G_i' is the plug-in weight.  The one-step combined
estimator solves a single linear system built from the block summaries:

    theta* = (R~' S' V^{-1} S R~ + lambda D~)^{-1} R~' S' V^{-1} bdiag(M_j) theta_all,

where S stacks the Gauss-Newton Jacobian blocks M_j = (dg_j)' C_j^{-1} (dg_j)
embedded by the selection maps E_j, and theta_all stacks the block
estimates.  A reference iterated GMM solver minimizes the same penalized
quadratic form directly (with V frozen at the block estimates) and is
used to check that the two agree asymptotically.

Smoothing weight selection is by generalized cross-validation with the
moments re-evaluated at each candidate solution; the covariance is the
sandwich B^{-1} M B^{-1} at the selected solution.

Scaling convention: the stored covariance is Sigma_hat / N, i.e. the
variance of theta*_hat itself (not of sqrt(N) times the error), so
confidence intervals use it directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.stats import norm

from .constraint import ConstraintMap
from .errors import ConfigurationError, DataError, NumericError
from .model import BlockModel, basis_deriv_row, basis_row
from .partition import BlockData
from .qif import BlockFit, Correlation, chol_ridge, evaluate_block

logger = logging.getLogger(__name__)

# V is a sample covariance of dimension sum_j dim(theta_j); at moderate N
# it can be ill-conditioned, so the ridge escalates until it factors.
V_RIDGE_SCALES = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass
class StackedMoments:
    """Stacked first-order moments of all blocks at one evaluation point.

    ``thetas`` row j is the block parameter the moments were evaluated
    at (the block estimates for the initial stack, E_j R~ theta* for
    re-evaluations).  ``Gi`` holds per-subject components row-wise;
    their mean is ``Gbar`` and V = Gi' Gi / N.
    """

    thetas: np.ndarray
    Gbar: np.ndarray
    Gi: np.ndarray
    S: np.ndarray
    V: np.ndarray
    M_blocks: list[np.ndarray]

    @property
    def n_subjects(self) -> int:
        return self.Gi.shape[0]


def _spd_solve(V: np.ndarray, label: str):
    """Cholesky-based solver for an SPD matrix with escalating ridge."""
    dim = V.shape[0]
    tr = float(np.trace(V))
    base = tr / dim if tr > 0 else 1.0
    for i, scale in enumerate(V_RIDGE_SCALES):
        try:
            cho = scipy.linalg.cho_factor(V + scale * base * np.eye(dim), lower=True)
        except scipy.linalg.LinAlgError:
            logger.warning(
                "%s: factorization failed at ridge %.1e, escalating", label, scale * base
            )
            continue
        if i > 0:
            logger.warning("%s: used escalated ridge %.1e", label, scale * base)
        return lambda rhs: scipy.linalg.cho_solve(cho, rhs)
    raise NumericError(f"{label}: singular even at ridge scale {V_RIDGE_SCALES[-1]:.1e}")


def _assemble(items: Sequence, cmap: ConstraintMap) -> StackedMoments:
    """Build stacked moments from per-block evaluations (fits or re-evals)."""
    layout = cmap.layout
    J = cmap.part.n_blocks
    if len(items) != J:
        raise DataError(f"expected {J} block evaluations, got {len(items)}")
    K = layout.dim_block
    n = items[0].scores.shape[0]
    thetas = np.empty((J, K))
    Gbar = np.empty(J * K)
    Gi = np.empty((n, J * K))
    S = np.zeros((J * K, layout.dim_theta))
    M_blocks: list[np.ndarray] = []
    for j, item in enumerate(items):
        if item.scores.shape[0] != n:
            raise DataError("blocks disagree on the subject count")
        cho, _ = chol_ridge(item.C)
        cinv_jac = scipy.linalg.cho_solve(cho, item.jac)
        rows = slice(j * K, (j + 1) * K)
        thetas[j] = item.theta
        Gbar[rows] = cinv_jac.T @ item.gbar
        Gi[:, rows] = item.scores @ cinv_jac
        M = item.jac.T @ cinv_jac
        M = (M + M.T) / 2.0
        M_blocks.append(M)
        S[np.ix_(range(j * K, (j + 1) * K), layout.block_indices(j))] = M
    V = Gi.T @ Gi / n
    return StackedMoments(thetas=thetas, Gbar=Gbar, Gi=Gi, S=S, V=V, M_blocks=M_blocks)


def stack(
    block_fits: Sequence[BlockFit],
    cmap: ConstraintMap,
    allow_unconverged: bool = False,
) -> StackedMoments:
    """Validate and stack block fits into combined moments.

    Every block must carry the complete subject set (the V plug-in has
    no rule for partial membership) and, unless overridden, must have
    converged.
    """
    fits = sorted(block_fits, key=lambda f: f.block_index)
    if [f.block_index for f in fits] != list(range(cmap.part.n_blocks)):
        raise DataError("block fits do not cover blocks 1..J exactly once")
    for f in fits:
        if not f.converged and not allow_unconverged:
            raise NumericError(
                f"block {f.block_index + 1} did not converge; refit or pass allow_unconverged"
            )
        n_total = f.n_subjects_total
        if f.n_present != n_total or not np.array_equal(
            f.subject_index, np.arange(n_total)
        ):
            raise DataError(
                f"block {f.block_index + 1} is missing "
                f"{n_total - f.n_present} of {n_total} subjects; the combination "
                "step requires every subject in every block"
            )
    return _assemble(fits, cmap)


def scm_one_step(
    sm: StackedMoments,
    cmap: ConstraintMap,
    lam: float,
    block_fits: Sequence[BlockFit] | None = None,
) -> np.ndarray:
    """One-step combined estimate at smoothing weight lambda.

    Solves (R~'S'V^{-1}SR~ + lambda D~) theta* = R~'S'V^{-1} w with
    w_j = M_j theta_j evaluated at the block estimates.
    """
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    thetas = sm.thetas
    if block_fits is not None:
        fits = sorted(block_fits, key=lambda f: f.block_index)
        thetas = np.stack([f.theta for f in fits])
    vsolve = _spd_solve(sm.V, "V")
    SR = sm.S @ cmap.Rtilde
    K = cmap.layout.dim_block
    w = np.empty(sm.Gbar.shape[0])
    for j, M in enumerate(sm.M_blocks):
        w[j * K : (j + 1) * K] = M @ thetas[j]
    bracket = SR.T @ vsolve(SR) + lam * cmap.Dtilde
    rhs = SR.T @ vsolve(w)
    try:
        cho = scipy.linalg.cho_factor(bracket, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericError(
            "combination bracket R~'S'V^{-1}SR~ + lambda D~ is singular; "
            "increase lambda or use fewer blocks"
        ) from exc
    return scipy.linalg.cho_solve(cho, rhs)


def _reeval_task(args) -> "object":
    block, theta_j, corr, model, dispersion = args
    return evaluate_block(theta_j, block, corr, model, dispersion)


def reevaluate(
    theta: np.ndarray,
    blocks: Sequence[BlockData],
    corr: Correlation,
    model: BlockModel,
    dispersions: Sequence[float],
    cmap: ConstraintMap,
    map_fn: Callable | None = None,
) -> StackedMoments:
    """Re-evaluate all block moments at a shared parameter theta.

    ``map_fn`` lets the caller parallelize the per-block evaluations;
    results are assembled in block order regardless of completion order,
    so the choice of map_fn never changes the numbers.
    """
    layout = cmap.layout
    tasks = [
        (block, np.asarray(theta)[layout.block_indices(block.index)], corr, model, disp)
        for block, disp in zip(blocks, dispersions)
    ]
    evals = list((map_fn or map)(_reeval_task, tasks))
    return _assemble(evals, cmap)


@dataclass
class GcvCandidate:
    """One smoothing-weight candidate with its re-evaluated moments."""

    lam: float
    theta_star: np.ndarray
    sm: StackedMoments
    numerator: float
    edf: float
    denominator: float
    valid: bool

    @property
    def gcv(self) -> float:
        return self.numerator / self.denominator if self.valid else float("inf")


def _gcv_denominator(Q: np.ndarray, lam: float, Dtilde: np.ndarray, n: int) -> tuple[float, float, bool]:
    """Effective-degrees-of-freedom denominator of the GCV score.

    Computes [1 - trace{(Q + lambda D~)^{-1} Q}/N]^2 in the reduced
    space.  This is the one place the denominator form lives, so it can
    be swapped if a different reading of the criterion is preferred.
    """
    try:
        cho = scipy.linalg.cho_factor(Q + lam * Dtilde, lower=True)
    except scipy.linalg.LinAlgError:
        return float("nan"), float("nan"), False
    edf = float(np.trace(scipy.linalg.cho_solve(cho, Q)))
    root = 1.0 - edf / n
    return edf, root * root, root > 0.0


def gcv_candidate(
    lam: float,
    sm0: StackedMoments,
    cmap: ConstraintMap,
    reevaluator: Callable[[np.ndarray], StackedMoments],
) -> GcvCandidate:
    """Solve at lambda, re-evaluate the moments there, and score the fit."""
    theta_star = scm_one_step(sm0, cmap, lam)
    sm = reevaluator(cmap.expand(theta_star))
    vsolve = _spd_solve(sm.V, f"V(lambda={lam:g})")
    numerator = float(sm.Gbar @ vsolve(sm.Gbar))
    SR = sm.S @ cmap.Rtilde
    Q = SR.T @ vsolve(SR)
    Q = (Q + Q.T) / 2.0
    edf, denominator, valid = _gcv_denominator(Q, lam, cmap.Dtilde, sm.n_subjects)
    if not valid:
        logger.warning("lambda=%g: invalid GCV denominator (edf=%s)", lam, edf)
    return GcvCandidate(
        lam=float(lam),
        theta_star=theta_star,
        sm=sm,
        numerator=numerator,
        edf=edf,
        denominator=denominator,
        valid=valid,
    )


@dataclass
class GcvSelection:
    lam: float
    candidate: GcvCandidate
    table: list[dict] = field(default_factory=list)


def select_gcv(candidates: Sequence[GcvCandidate]) -> GcvSelection:
    """Pick the valid candidate with minimal GCV, ties toward larger lambda."""
    valid = [c for c in candidates if c.valid]
    if not valid:
        raise NumericError(
            "no smoothing weight produced a valid GCV denominator; "
            "the effective degrees of freedom reach the subject count"
        )
    best = valid[0]
    for c in valid[1:]:
        if c.gcv < best.gcv or (c.gcv == best.gcv and c.lam > best.lam):
            best = c
    table = [
        {
            "lambda": c.lam,
            "gcv": (c.gcv if c.valid else None),
            "numerator": c.numerator,
            "edf": c.edf,
            "valid": c.valid,
            "selected": c is best,
        }
        for c in sorted(candidates, key=lambda c: c.lam)
    ]
    return GcvSelection(lam=best.lam, candidate=best, table=table)


def gcv(
    lambda_grid: Sequence[float],
    sm0: StackedMoments,
    cmap: ConstraintMap,
    reevaluator: Callable[[np.ndarray], StackedMoments],
    map_fn: Callable | None = None,
) -> GcvSelection:
    """Score every lambda on the grid and select one.

    ``map_fn`` may evaluate candidates concurrently; the table and the
    selection are assembled in grid order either way.
    """
    grid = list(lambda_grid)
    if not grid:
        raise ConfigurationError("empty lambda grid")
    if any(lam < 0 for lam in grid):
        raise ConfigurationError("lambda values must be >= 0")
    runner = map_fn or map
    candidates = list(runner(_gcv_task, [(lam, sm0, cmap, reevaluator) for lam in grid]))
    return select_gcv(candidates)


def _gcv_task(args) -> GcvCandidate:
    lam, sm0, cmap, reevaluator = args
    return gcv_candidate(lam, sm0, cmap, reevaluator)


def covariance(sm: StackedMoments, cmap: ConstraintMap, lam: float) -> np.ndarray:
    """Sandwich covariance of theta*_hat from re-evaluated moments.

    B^{-1} M B^{-1} / N with B = R~'S'V^{-1}SR~ + lambda D~ and M the
    same bracket without the penalty; at lambda = 0 this is the plain
    inverse (the optimally weighted form).  Divided by N so confidence
    intervals consume it directly.
    """
    vsolve = _spd_solve(sm.V, "V")
    SR = sm.S @ cmap.Rtilde
    M = SR.T @ vsolve(SR)
    M = (M + M.T) / 2.0
    B = M + lam * cmap.Dtilde
    try:
        cho = scipy.linalg.cho_factor(B, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericError("covariance bracket is singular; increase lambda") from exc
    inner = scipy.linalg.cho_solve(cho, M)
    cov = scipy.linalg.cho_solve(cho, inner.T).T / sm.n_subjects
    return (cov + cov.T) / 2.0


def gmm_iterative(
    reevaluator: Callable[[np.ndarray], StackedMoments],
    cmap: ConstraintMap,
    lam: float,
    sm0: StackedMoments,
    init: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> tuple[np.ndarray, int, bool, float]:
    """Reference iterated solver of the penalized GMM criterion.

    Minimizes Gbar(R~ theta*)' V0^{-1} Gbar(R~ theta*) + lambda theta*' D~ theta*
    by Gauss-Newton with the weight V0 frozen at the block estimates.
    Returns (theta*, iterations, converged, objective).  Exists to verify
    that the one-step estimate is asymptotically equivalent; the
    pipeline itself always uses the one-step form.
    """
    vsolve = _spd_solve(sm0.V, "V0")
    theta_star = (
        np.asarray(init, dtype=float).copy() if init is not None else scm_one_step(sm0, cmap, lam)
    )

    def objective(sm: StackedMoments, ts: np.ndarray) -> float:
        return float(sm.Gbar @ vsolve(sm.Gbar) + lam * ts @ cmap.Dtilde @ ts)

    sm = reevaluator(cmap.expand(theta_star))
    value = objective(sm, theta_star)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        SR = sm.S @ cmap.Rtilde
        half_grad = SR.T @ vsolve(sm.Gbar) + lam * cmap.Dtilde @ theta_star
        if np.max(np.abs(2.0 * half_grad)) < tol:
            converged = True
            iterations -= 1
            break
        B = SR.T @ vsolve(SR) + lam * cmap.Dtilde
        try:
            cho = scipy.linalg.cho_factor(B, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NumericError("GMM Gauss-Newton matrix is singular") from exc
        delta = scipy.linalg.cho_solve(cho, half_grad)
        step = 1.0
        accepted = False
        while step >= 2.0**-20:
            cand = theta_star - step * delta
            try:
                sm_c = reevaluator(cmap.expand(cand))
            except NumericError:
                step /= 2.0
                continue
            value_c = objective(sm_c, cand)
            if value_c <= value + 1e-12 * max(1.0, abs(value)):
                accepted = True
                break
            step /= 2.0
        if not accepted:
            break
        theta_star, sm, value = cand, sm_c, value_c
        if np.max(np.abs(step * delta)) < tol:
            converged = True
            break
    return theta_star, iterations, converged, value


def normal_quantile(alpha: float) -> float:
    """Two-sided z multiplier, e.g. 1.959964 at alpha = 0.05."""
    if not 0 < alpha < 1:
        raise ConfigurationError(f"alpha must be in (0, 1), got {alpha}")
    return float(norm.ppf(1.0 - alpha / 2.0))


def curve_rows(cmap: ConstraintMap, u: int, grid: np.ndarray) -> np.ndarray:
    """Zero-padded basis rows x~_u(t)' R~ mapping theta* to beta_u(t)."""
    part, basis = cmap.part, cmap.basis
    grid = np.asarray(grid, dtype=float)
    blocks = part.block_of(grid)
    rows = np.zeros((grid.shape[0], cmap.layout.dim_theta))
    d = basis.degrees[u]
    for r, (t, j) in enumerate(zip(grid, blocks)):
        left, right = part.block_bounds(int(j))
        start = cmap.layout.gamma_start(u, int(j))
        rows[r, start : start + d + 1] = basis_row(float(t), u, basis, left, right)
    return rows @ cmap.Rtilde


def curve_deriv_rows(cmap: ConstraintMap, u: int, grid: np.ndarray) -> np.ndarray:
    """Reduced-space rows of d beta_u / dt on a grid (for smoothness checks)."""
    part, basis = cmap.part, cmap.basis
    grid = np.asarray(grid, dtype=float)
    blocks = part.block_of(grid)
    rows = np.zeros((grid.shape[0], cmap.layout.dim_theta))
    d = basis.degrees[u]
    for r, (t, j) in enumerate(zip(grid, blocks)):
        left, right = part.block_bounds(int(j))
        start = cmap.layout.gamma_start(u, int(j))
        rows[r, start : start + d + 1] = basis_deriv_row(float(t), u, basis, left, right)
    return rows @ cmap.Rtilde


def curve_and_bands(
    theta_star: np.ndarray,
    cov: np.ndarray,
    cmap: ConstraintMap,
    u: int,
    grid: np.ndarray,
    alpha: float = 0.05,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Fitted coefficient curve and pointwise confidence bands.

    Returns (beta_hat, se, lower, upper) over the grid; the variance at
    each point is x~'R~ Cov R~'x~ with the stored (already /N) covariance.
    """
    xr = curve_rows(cmap, u, grid)
    beta = xr @ theta_star
    var = np.einsum("ti,ij,tj->t", xr, cov, xr)
    se = np.sqrt(np.maximum(var, 0.0))
    z = normal_quantile(alpha)
    return beta, se, beta - z * se, beta + z * se


def eta_and_bands(
    theta_star: np.ndarray,
    cov: np.ndarray,
    cmap: ConstraintMap,
    alpha: float = 0.05,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Scalar-covariate estimates with standard errors and intervals."""
    rows = cmap.eta_rows()
    est = rows @ theta_star
    var = np.einsum("ki,ij,kj->k", rows, cov, rows)
    se = np.sqrt(np.maximum(var, 0.0))
    z = normal_quantile(alpha)
    return est, se, est - z * se, est + z * se


@dataclass
class CombinedFit:
    """Final combined estimate with inference and selection diagnostics."""

    theta_star: np.ndarray
    theta: np.ndarray
    cov: np.ndarray
    lam: float
    gcv_table: list[dict]
    eta: np.ndarray
    eta_se: np.ndarray
    eta_lower: np.ndarray
    eta_upper: np.ndarray
    labels: tuple[str, ...]
    alpha: float
    n_subjects: int
    block_summaries: list[dict]

    @property
    def theta_star_se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))


def combined_fit(
    selection: GcvSelection,
    cmap: ConstraintMap,
    block_fits: Sequence[BlockFit],
    alpha: float = 0.05,
) -> CombinedFit:
    """Package the selected candidate with its covariance and eta intervals."""
    cand = selection.candidate
    cov = covariance(cand.sm, cmap, cand.lam)
    eta, eta_se, eta_lo, eta_hi = eta_and_bands(cand.theta_star, cov, cmap, alpha)
    summaries = [
        {
            "block": f.block_index + 1,
            "iterations": f.iterations,
            "converged": f.converged,
            "objective": f.objective,
            "dispersion": f.dispersion,
        }
        for f in sorted(block_fits, key=lambda f: f.block_index)
    ]
    return CombinedFit(
        theta_star=cand.theta_star,
        theta=cmap.expand(cand.theta_star),
        cov=cov,
        lam=cand.lam,
        gcv_table=selection.table,
        eta=eta,
        eta_se=eta_se,
        eta_lower=eta_lo,
        eta_upper=eta_hi,
        labels=cmap.labels,
        alpha=alpha,
        n_subjects=cand.sm.n_subjects,
        block_summaries=summaries,
    )
