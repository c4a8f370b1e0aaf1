"""Per-block estimation by quadratic inference functions.

For block j the extended score of subject i stacks, over the working
correlation basis matrices R_w,

    g_ij(theta_j) = stack_w  J' A^{-1/2} R_w A^{-1/2} (Y - mu),

where J = d mu / d theta_j and A is the diagonal marginal variance.  The
estimator minimizes the quadratic inference function

    N * gbar' C^{-1} gbar,     C = (1/N) sum_i g_ij g_ij',

which sidesteps estimating correlation nuisance parameters.  Minimization
is Gauss-Newton with step-halving on the objective, recomputing C at
every iterate.

Marginal variance convention (the mean model alone does not pin it down):
Identity link uses A = phi_hat * I with phi_hat the method-of-moments
residual variance from the initial independence fit; Log link uses the
canonical Poisson variance A = diag(mu).
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, DataError, NumericError
from .model import LOG_LINK_MAX_PREDICTOR, BlockModel, Link, link_mean_deriv
from .partition import BlockData

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50
# Relative ridge added to C before factorization; short blocks make the
# basis-matrix columns nearly collinear.
C_RIDGE_SCALE = 1e-8
_MIN_STEP = 2.0**-20


class Correlation(enum.Enum):
    """Working correlation family, encoded as 0/1 basis matrices.

    R_1 is always the identity.  AR1 adds the first super/sub-diagonal
    matrix; Exchangeable adds the all-ones-off-diagonal matrix.
    """

    INDEPENDENCE = "independence"
    AR1 = "ar1"
    EXCHANGEABLE = "exchangeable"

    @property
    def n_bases(self) -> int:
        return 1 if self is Correlation.INDEPENDENCE else 2

    @classmethod
    def parse(cls, text: str) -> "Correlation":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ConfigurationError(
                f"unknown correlation {text!r}; use independence, ar1 or exchangeable"
            ) from None


def correlation_basis_matrix(corr: Correlation, m: int, w: int) -> np.ndarray:
    """Dense R_w for inspection and tests (w is 1-based)."""
    if w == 1:
        return np.eye(m)
    if w != 2 or corr is Correlation.INDEPENDENCE:
        raise DataError(f"correlation {corr.value} has no basis matrix w={w}")
    if corr is Correlation.AR1:
        return np.eye(m, k=1) + np.eye(m, k=-1)
    return np.ones((m, m)) - np.eye(m)


def _r2_apply(corr: Correlation, v: np.ndarray) -> np.ndarray:
    """R_2 v along axis 0, for one subject's vector or (m, k) matrix."""
    if corr is Correlation.AR1:
        out = np.zeros_like(v)
        out[1:] += v[:-1]
        out[:-1] += v[1:]
        return out
    return v.sum(axis=0, keepdims=True) - v


def _r2_apply_batch(corr: Correlation, v: np.ndarray) -> np.ndarray:
    """R_2 v along axis 1, for batched (n, m) or (n, m, k) arrays."""
    if corr is Correlation.AR1:
        out = np.zeros_like(v)
        out[:, 1:] += v[:, :-1]
        out[:, :-1] += v[:, 1:]
        return out
    return v.sum(axis=1, keepdims=True) - v


def chol_ridge(C: np.ndarray, scale: float = C_RIDGE_SCALE):
    """Cholesky factor of C + ridge*I with ridge = scale*trace(C)/dim(C).

    A zero trace (all-zero scores, e.g. noiseless data) falls back to an
    absolute ridge so the factorization is still defined.
    """
    dim = C.shape[0]
    if not np.all(np.isfinite(C)):
        raise NumericError("score covariance C contains non-finite entries")
    tr = float(np.trace(C))
    ridge = scale * (tr / dim if tr > 0 else 1.0)
    try:
        return scipy.linalg.cho_factor(C + ridge * np.eye(dim), lower=True), ridge
    except scipy.linalg.LinAlgError as exc:
        raise NumericError(
            f"score covariance C is singular even with ridge {ridge:.3g}; "
            "increase the ridge or coarsen the partition"
        ) from exc


@dataclass
class BlockEval:
    """Score-level quantities of one block at a fixed theta_j."""

    theta: np.ndarray
    gbar: np.ndarray
    scores: np.ndarray
    jac: np.ndarray
    C: np.ndarray


def evaluate_block(
    theta_j: np.ndarray,
    block: BlockData,
    corr: Correlation,
    model: BlockModel,
    dispersion: float = 1.0,
) -> BlockEval:
    """Extended scores, their mean and Jacobian, and C at theta_j.

    The Jacobian follows the estimating-equation convention: the
    derivative acts on the residual only, giving
    -(1/N) sum_i stack_w( J' A^{-1/2} R_w A^{-1/2} J ).
    """
    theta_j = np.asarray(theta_j, dtype=float)
    if not np.all(np.isfinite(theta_j)):
        raise NumericError(f"block {block.index + 1}: non-finite parameter")
    design = block.design(model)
    lin = design @ theta_j
    mu, hprime = link_mean_deriv(model.link, lin)
    if model.link is Link.IDENTITY:
        if dispersion <= 0:
            raise NumericError(f"block {block.index + 1}: non-positive dispersion")
        rs = 1.0 / np.sqrt(dispersion)
        jt_flat = design * rs
        rt_flat = (block.y - mu) * rs
    else:
        if np.any(mu <= 0):
            raise NumericError(f"block {block.index + 1}: zero marginal variance")
        sq = np.sqrt(mu)
        jt_flat = sq[:, None] * design
        rt_flat = (block.y - mu) / sq
    n = block.n_present
    k = model.dim_block
    wn = corr.n_bases
    if block.balanced:
        m = int(block.counts[0])
        jt = jt_flat.reshape(n, m, k)
        rt = rt_flat.reshape(n, m)
        parts = [np.einsum("nmk,nm->nk", jt, rt)]
        jac_parts = [np.einsum("nmk,nml->kl", jt, jt)]
        if wn == 2:
            parts.append(np.einsum("nmk,nm->nk", jt, _r2_apply_batch(corr, rt)))
            jac_parts.append(np.einsum("nmk,nml->kl", jt, _r2_apply_batch(corr, jt)))
        scores = np.concatenate(parts, axis=1)
        jac = np.concatenate(jac_parts, axis=0)
    else:
        scores = np.empty((n, wn * k))
        jac = np.zeros((wn * k, k))
        for i in range(n):
            sl = block.rows(i)
            jt = jt_flat[sl]
            rt = rt_flat[sl]
            scores[i, :k] = jt.T @ rt
            jac[:k] += jt.T @ jt
            if wn == 2:
                scores[i, k:] = jt.T @ _r2_apply(corr, rt)
                jac[k:] += jt.T @ _r2_apply(corr, jt)
    jac = -jac / n
    gbar = scores.mean(axis=0)
    C = scores.T @ scores / n
    return BlockEval(theta=theta_j, gbar=gbar, scores=scores, jac=jac, C=C)


def qif_objective(
    theta_j: np.ndarray,
    block: BlockData,
    corr: Correlation,
    model: BlockModel,
    dispersion: float = 1.0,
    ridge_scale: float = C_RIDGE_SCALE,
) -> tuple[float, np.ndarray, np.ndarray]:
    """QIF value N*gbar'(C+ridge I)^{-1} gbar, its gradient, and C.

    The gradient treats C as fixed, the standard per-iteration
    convention: 2N * (d gbar)' (C + ridge I)^{-1} gbar.
    """
    ev = evaluate_block(theta_j, block, corr, model, dispersion)
    cho, _ = chol_ridge(ev.C, ridge_scale)
    cinv_g = scipy.linalg.cho_solve(cho, ev.gbar)
    n = block.n_present
    value = float(n * ev.gbar @ cinv_g)
    grad = 2.0 * n * ev.jac.T @ cinv_g
    return value, grad, ev.C


@dataclass
class BlockFit:
    """Converged per-block summary, the payload shipped to the combiner.

    ``scores`` is the N x (W * dim theta_j) matrix of per-subject
    extended scores at theta; ``jac`` and ``C`` are evaluated there too.
    ``objective`` is the QIF value N * Q_j(theta).
    """

    block_index: int
    theta: np.ndarray
    gbar: np.ndarray
    scores: np.ndarray
    jac: np.ndarray
    C: np.ndarray
    dispersion: float
    objective: float
    iterations: int
    converged: bool
    subject_index: np.ndarray
    n_subjects_total: int

    @property
    def n_present(self) -> int:
        return len(self.subject_index)


def _feasible(design: np.ndarray, theta: np.ndarray) -> bool:
    lin = design @ theta
    return bool(np.all(np.isfinite(lin)) and np.max(np.abs(lin)) <= LOG_LINK_MAX_PREDICTOR)


def _independence_init(block: BlockData, model: BlockModel) -> np.ndarray:
    """Independence-model fit: exact in one pass for the identity link,
    damped Fisher scoring for the log link.

    The log link starts from least squares on log(y + 1/2), which is
    already close for count-like outcomes, then polishes with at most 10
    Fisher passes.  Each step is halved until the candidate keeps the
    linear predictor inside the overflow guard; an infeasible direction
    just keeps the current iterate.
    """
    design = block.design(model)
    y = block.y
    if model.link is Link.IDENTITY:
        theta, *_ = np.linalg.lstsq(design, y, rcond=None)
        return theta
    z = np.log(np.clip(y, 0.0, None) + 0.5)
    theta, *_ = np.linalg.lstsq(design, z, rcond=None)
    if not _feasible(design, theta):
        theta = np.zeros(model.dim_block)
    for _ in range(10):
        mu, _ = link_mean_deriv(model.link, design @ theta)
        sq = np.sqrt(mu)
        jt = sq[:, None] * design
        rt = (y - mu) / sq
        delta, *_ = np.linalg.lstsq(jt, rt, rcond=None)
        step = 1.0
        for _ in range(30):
            if _feasible(design, theta + step * delta):
                break
            step *= 0.5
        else:
            break
        theta = theta + step * delta
        if step * np.max(np.abs(delta)) < 1e-6:
            break
    return theta


def estimate_dispersion(block: BlockData, model: BlockModel, theta: np.ndarray) -> float:
    """Method-of-moments residual variance at an independence fit."""
    resid = block.y - block.design(model) @ np.asarray(theta, dtype=float)
    dof = max(resid.size - model.dim_block, 1)
    phi = float(resid @ resid) / dof
    # Noiseless data: any positive scale works, all scores vanish.
    return phi if phi > 1e-12 else 1.0


def fit_block(
    block: BlockData,
    corr: Correlation,
    model: BlockModel,
    init: np.ndarray | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> BlockFit:
    """Minimize the block QIF by Gauss-Newton with step-halving.

    The step is
        theta <- theta - step * [ (dg)' C^{-1} (dg) ]^{-1} (dg)' C^{-1} gbar,
    with C recomputed at every iterate.  Step-halving accepts a candidate
    once it shrinks the estimating-function norm ||(dg)' C^{-1} gbar||
    (see the inline note for why the raw quadratic form is not the
    merit).  Convergence: parameter-step max-norm < tol or gradient
    max-norm < tol.  Non-convergence returns converged=False with a
    warning; downstream refuses such fits unless overridden.
    """
    if block.n_present < model.dim_block:
        raise DataError(
            f"block {block.index + 1}: {block.n_present} subjects < "
            f"{model.dim_block} parameters; C cannot reach full rank"
        )
    theta_indep = _independence_init(block, model)
    if model.link is Link.IDENTITY:
        dispersion = estimate_dispersion(block, model, theta_indep)
    else:
        dispersion = 1.0
    theta = np.asarray(init, dtype=float).copy() if init is not None else theta_indep
    n = block.n_present

    ev = evaluate_block(theta, block, corr, model, dispersion)
    cho, _ = chol_ridge(ev.C)
    cinv_g = scipy.linalg.cho_solve(cho, ev.gbar)
    value = float(n * ev.gbar @ cinv_g)
    estfun = ev.jac.T @ cinv_g
    fnorm = float(np.linalg.norm(estfun))
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        grad = 2.0 * n * estfun
        if np.max(np.abs(grad)) < tol:
            converged = True
            iterations -= 1
            break
        gn_mat = ev.jac.T @ scipy.linalg.cho_solve(cho, ev.jac)
        try:
            delta = scipy.linalg.cho_factor(gn_mat, lower=True)
            delta = scipy.linalg.cho_solve(delta, estfun)
        except scipy.linalg.LinAlgError as exc:
            raise NumericError(
                f"block {block.index + 1}: singular Gauss-Newton matrix "
                "(dg)' C^{-1} (dg); the block design is rank-deficient"
            ) from exc
        if not np.all(np.isfinite(delta)):
            raise NumericError(f"block {block.index + 1}: non-finite Newton step")
        # Damping targets the estimating function (dg)'C^{-1}gbar, whose
        # root defines the estimator; the raw quadratic form is not a
        # usable merit because its exact minimizer sits O(1/N) off the
        # root (the dC/dtheta term the gradient ignores) and no step
        # along the Newton direction can decrease it from there.
        step = 1.0
        accepted = False
        while step >= _MIN_STEP:
            cand = theta - step * delta
            try:
                ev_c = evaluate_block(cand, block, corr, model, dispersion)
                cho_c, _ = chol_ridge(ev_c.C)
            except NumericError:
                step /= 2.0
                continue
            cinv_g_c = scipy.linalg.cho_solve(cho_c, ev_c.gbar)
            estfun_c = ev_c.jac.T @ cinv_g_c
            fnorm_c = float(np.linalg.norm(estfun_c))
            if fnorm_c <= fnorm * (1.0 - 1e-4 * step) + 1e-15 or fnorm_c < tol:
                accepted = True
                break
            step /= 2.0
        if not accepted:
            break
        theta, ev, cho, cinv_g = cand, ev_c, cho_c, cinv_g_c
        estfun, fnorm = estfun_c, fnorm_c
        value = float(n * ev.gbar @ cinv_g)
        if np.max(np.abs(step * delta)) < tol:
            converged = True
            break
    if not converged:
        logger.warning(
            "block %d: no convergence in %d iterations (objective %.6g)",
            block.index + 1,
            iterations,
            value,
        )
    return BlockFit(
        block_index=block.index,
        theta=theta,
        gbar=ev.gbar,
        scores=ev.scores,
        jac=ev.jac,
        C=ev.C,
        dispersion=dispersion,
        objective=value,
        iterations=iterations,
        converged=converged,
        subject_index=block.subject_index,
        n_subjects_total=block.n_subjects_total,
    )


def block_fit_to_dict(fit: BlockFit) -> dict:
    return {
        "block_index": fit.block_index,
        "theta": fit.theta.tolist(),
        "gbar": fit.gbar.tolist(),
        "scores": fit.scores.tolist(),
        "jac": fit.jac.tolist(),
        "C": fit.C.tolist(),
        "dispersion": fit.dispersion,
        "objective": fit.objective,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "subject_index": fit.subject_index.tolist(),
        "n_subjects_total": fit.n_subjects_total,
    }


def block_fit_from_dict(payload: dict) -> BlockFit:
    return BlockFit(
        block_index=int(payload["block_index"]),
        theta=np.asarray(payload["theta"], dtype=float),
        gbar=np.asarray(payload["gbar"], dtype=float),
        scores=np.asarray(payload["scores"], dtype=float),
        jac=np.asarray(payload["jac"], dtype=float),
        C=np.asarray(payload["C"], dtype=float),
        dispersion=float(payload["dispersion"]),
        objective=float(payload["objective"]),
        iterations=int(payload["iterations"]),
        converged=bool(payload["converged"]),
        subject_index=np.asarray(payload["subject_index"], dtype=np.int64),
        n_subjects_total=int(payload["n_subjects_total"]),
    )


def block_fit_to_json(fit: BlockFit) -> str:
    """JSON text round-tripping bit-exactly (floats serialized via repr)."""
    return json.dumps(block_fit_to_dict(fit))


def block_fit_from_json(text: str) -> BlockFit:
    return block_fit_from_dict(json.loads(text))
