"""Mean models: canonical links, polynomial block bases, and Jacobians.

Within block j the mean of subject i at time t is

    mu_it = h( sum_u X_itu * beta_ju(t) + Z_it' eta ),

where each functional coefficient is a polynomial on the block,
beta_ju(t) = xi_ju(t)' gamma_ju, with xi_ju(t) = (s^0, s^1, ..., s^d_u)
and s = t - c_{j-1} (unscaled) or s = (t - c_{j-1}) / (c_j - c_{j-1})
(scaled).  The block parameter stacks gamma covariate-major and
degree-minor, followed by eta:

    theta_j = (gamma_j1', ..., gamma_jq', eta')'.

This ordering is a global contract relied on by every downstream module.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError

# Linear predictors beyond this magnitude overflow exp() in float64; the
# log link fails loudly rather than saturating, because saturated means
# corrupt Newton steps silently.
LOG_LINK_MAX_PREDICTOR = 700.0


class Link(enum.Enum):
    """Canonical link function h in mu = h(linear predictor)."""

    IDENTITY = "identity"
    LOG = "log"

    @classmethod
    def parse(cls, text: str) -> "Link":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ConfigurationError(f"unknown link {text!r}; use identity or log") from None


def link_mean_deriv(link: Link, lin: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate h and h' at the linear predictor values.

    Parameters
    ----------
    link : Link
        Identity (h(u)=u, h'=1) or Log (h(u)=exp(u), h'=h).
    lin : ndarray
        Linear predictor values, any shape.

    Returns
    -------
    mu, hprime : ndarray
        Mean values and derivative factors, same shape as ``lin``.

    Raises
    ------
    NumericError
        Log link with a non-finite linear predictor or |lin| > 700.
    """
    if link is Link.IDENTITY:
        return lin, np.ones_like(lin)
    if not np.all(np.isfinite(lin)):
        raise NumericError("log link: non-finite linear predictor")
    amax = float(np.max(np.abs(lin))) if lin.size else 0.0
    if amax > LOG_LINK_MAX_PREDICTOR:
        flat = int(np.argmax(np.abs(lin)))
        raise NumericError(
            f"log link: |linear predictor| = {amax:.3g} > {LOG_LINK_MAX_PREDICTOR:.0f} "
            f"at flat index {flat}; the mean model has diverged"
        )
    mu = np.exp(lin)
    return mu, mu


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial basis settings for the functional covariates.

    Parameters
    ----------
    degrees : tuple of int
        Polynomial degree d_u >= 1 per functional covariate, length q.
    scaled : bool
        If True, the within-block argument is rescaled to [0, 1],
        which improves conditioning on long blocks.
    """

    degrees: tuple[int, ...]
    scaled: bool = True

    def __post_init__(self) -> None:
        if any(int(d) < 1 for d in self.degrees):
            raise ConfigurationError(f"basis degrees must be >= 1, got {self.degrees}")
        object.__setattr__(self, "degrees", tuple(int(d) for d in self.degrees))

    @property
    def q(self) -> int:
        return len(self.degrees)


@dataclass(frozen=True)
class BlockModel:
    """Mean-model description shared by all blocks.

    Per-block parameter dimension is sum_u (d_u + 1) + p; this equals
    dim(theta_j) everywhere downstream.
    """

    basis: BasisSpec
    link: Link
    n_scalar: int = 0

    def __post_init__(self) -> None:
        if self.n_scalar < 0:
            raise ConfigurationError(f"n_scalar must be >= 0, got {self.n_scalar}")

    @property
    def q(self) -> int:
        return self.basis.q

    @property
    def p(self) -> int:
        return self.n_scalar

    @property
    def dim_block(self) -> int:
        return sum(d + 1 for d in self.basis.degrees) + self.n_scalar

    def gamma_slice(self, u: int) -> slice:
        """Columns of theta_j holding gamma_ju (0-based covariate index)."""
        start = sum(d + 1 for d in self.basis.degrees[:u])
        return slice(start, start + self.basis.degrees[u] + 1)

    @property
    def eta_slice(self) -> slice:
        g = sum(d + 1 for d in self.basis.degrees)
        return slice(g, g + self.n_scalar)


def _shifted_times(times: np.ndarray, left: float, right: float, scaled: bool) -> np.ndarray:
    s = np.asarray(times, dtype=float) - left
    if scaled:
        s = s / (right - left)
    return s


def basis_row(
    t: float,
    u: int,
    spec: BasisSpec,
    left: float,
    right: float,
) -> np.ndarray:
    """Basis vector xi_ju(t) = (s^0, ..., s^d_u) for covariate u in a block.

    The positive-part truncation of the underlying spline family is
    inactive inside the block (s >= 0), so plain powers are exact.

    Raises
    ------
    ConfigurationError
        t outside [left, right].
    """
    if not (left <= t <= right):
        raise ConfigurationError(f"time {t} outside block [{left}, {right}]")
    s = float(_shifted_times(np.array([t]), left, right, spec.scaled)[0])
    return s ** np.arange(spec.degrees[u] + 1, dtype=float)


def basis_deriv_row(
    t: float,
    u: int,
    spec: BasisSpec,
    left: float,
    right: float,
) -> np.ndarray:
    """d/dt of basis_row: (0, 1, 2s, ..., d s^{d-1}) times the chain factor."""
    if not (left <= t <= right):
        raise ConfigurationError(f"time {t} outside block [{left}, {right}]")
    d = spec.degrees[u]
    s = float(_shifted_times(np.array([t]), left, right, spec.scaled)[0])
    row = np.zeros(d + 1)
    powers = np.arange(1, d + 1, dtype=float)
    row[1:] = powers * s ** (powers - 1.0)
    if spec.scaled:
        row /= right - left
    return row


def block_design(
    model: BlockModel,
    X: np.ndarray,
    Z: np.ndarray,
    times: np.ndarray,
    left: float,
    right: float,
) -> np.ndarray:
    """Design matrix of the linear predictor for rows of one block.

    Parameters
    ----------
    X : ndarray, shape (m, q)
        Functional-covariate values.
    Z : ndarray, shape (m, p)
        Scalar-covariate values.
    times : ndarray, shape (m,)
        Observation times, all within [left, right].

    Returns
    -------
    ndarray, shape (m, dim_block)
        Row r holds (X_ru * xi_u(t_r) for u = 1..q, Z_r); the linear
        predictor is this matrix times theta_j.
    """
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    times = np.asarray(times, dtype=float)
    m = times.shape[0]
    if X.shape != (m, model.q):
        raise ConfigurationError(f"X shape {X.shape} != ({m}, {model.q})")
    if Z.shape != (m, model.p):
        raise ConfigurationError(f"Z shape {Z.shape} != ({m}, {model.p})")
    s = _shifted_times(times, left, right, model.basis.scaled)
    cols = []
    for u, d in enumerate(model.basis.degrees):
        powers = s[:, None] ** np.arange(d + 1, dtype=float)[None, :]
        cols.append(X[:, u : u + 1] * powers)
    cols.append(Z)
    return np.concatenate(cols, axis=1) if cols else np.empty((m, 0))


def mean_and_jacobian(
    theta_j: np.ndarray,
    X: np.ndarray,
    Z: np.ndarray,
    times: np.ndarray,
    model: BlockModel,
    left: float,
    right: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector mu and Jacobian d mu / d theta_j for rows of one block.

    The Jacobian column for gamma_jud is h'(.) * X_u * s^d and for eta_k
    is h'(.) * Z_k, following the covariate-major, degree-minor ordering.
    """
    theta_j = np.asarray(theta_j, dtype=float)
    if theta_j.shape != (model.dim_block,):
        raise ConfigurationError(
            f"theta_j has length {theta_j.shape}, expected ({model.dim_block},)"
        )
    design = block_design(model, X, Z, times, left, right)
    lin = design @ theta_j
    mu, hprime = link_mean_deriv(model.link, lin)
    return mu, hprime[:, None] * design
