"""Continuity constraints across partition edges and their null-space map.

For each functional covariate the blockwise polynomial coefficients gamma
must agree at interior edges up to the requested differentiability class:
C0 matches values, C1 additionally matches first derivatives.  The
constraints are linear, H gamma = 0.  Estimation works in a reduced
parameter theta* through a full-column-rank map R~ with theta = R~ theta*,
built so that every image satisfies the constraints exactly: each block's
leading coefficients (intercept for C0; intercept and linear term for C1)
are regenerated from the previous block's value/derivative at the shared
edge instead of being free parameters.

Global parameter layout (a package-wide contract):

    theta = (gamma_1', ..., gamma_q', eta')',   gamma_u = (gamma_1u', ..., gamma_Ju')'

i.e. covariate-major, block-minor, degree-minor, with eta last.  The
reduced parameter theta* keeps each block's free coefficients in the same
order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .model import BasisSpec
from .partition import Partition


class Smoothness(enum.Enum):
    """Differentiability class enforced at interior partition edges."""

    NONE = "none"
    C0 = "c0"
    C1 = "c1"

    @property
    def order(self) -> int:
        """v such that the fitted curves are C^v at edges; -1 for NONE."""
        return {"none": -1, "c0": 0, "c1": 1}[self.value]

    @classmethod
    def parse(cls, text: str) -> "Smoothness":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ConfigurationError(
                f"unknown smoothness class {text!r}; use none, c0 or c1"
            ) from None


@dataclass(frozen=True)
class ParamLayout:
    """Index arithmetic for the global parameter over J blocks.

    dim(theta) = sum_u J (d_u + 1) + p.  Block j's parameter theta_j is
    theta restricted to ``block_indices(j)`` (the selection map E_j).
    """

    n_blocks: int
    degrees: tuple[int, ...]
    p: int

    @property
    def q(self) -> int:
        return len(self.degrees)

    @property
    def dim_gamma(self) -> int:
        return self.n_blocks * sum(d + 1 for d in self.degrees)

    @property
    def dim_theta(self) -> int:
        return self.dim_gamma + self.p

    @property
    def dim_block(self) -> int:
        return sum(d + 1 for d in self.degrees) + self.p

    def gamma_start(self, u: int, j: int) -> int:
        """Global index of gamma_{ju} degree 0."""
        return self.n_blocks * sum(d + 1 for d in self.degrees[:u]) + j * (self.degrees[u] + 1)

    def block_indices(self, j: int) -> np.ndarray:
        """Global theta indices of theta_j, in theta_j's own ordering."""
        idx: list[int] = []
        for u, d in enumerate(self.degrees):
            start = self.gamma_start(u, j)
            idx.extend(range(start, start + d + 1))
        idx.extend(range(self.dim_gamma, self.dim_gamma + self.p))
        return np.asarray(idx, dtype=np.int64)

    @property
    def eta_indices(self) -> np.ndarray:
        return np.arange(self.dim_gamma, self.dim_gamma + self.p, dtype=np.int64)


def _check_degrees(basis: BasisSpec, smoothness: Smoothness) -> None:
    v = smoothness.order
    bad = [d for d in basis.degrees if v >= d]
    if bad:
        raise ConfigurationError(
            f"smoothness {smoothness.value} needs degree > {v} for every functional "
            f"covariate (degrees {basis.degrees}); equal order forces homogeneity"
        )


def build_H(part: Partition, basis: BasisSpec, smoothness: Smoothness) -> np.ndarray:
    """Constraint matrix H with one value row (and one derivative row for
    C1) per covariate per interior edge, acting on the stacked gamma.

    Value row at edge c_j: (1, delta_j, ..., delta_j^{d_u}) against block
    j's coefficients and -1 against block j+1's intercept, where
    delta_j = c_j - c_{j-1} (1 under the scaled basis).  Derivative row:
    (0, 1, 2 delta_j, ..., d_u delta_j^{d_u - 1}) against -1 on block
    j+1's linear coefficient; under the scaled basis the left side is
    multiplied by (c_{j+1} - c_j)/(c_j - c_{j-1}).
    """
    if smoothness is Smoothness.NONE:
        raise ConfigurationError("build_H needs a smoothness class of c0 or c1")
    _check_degrees(basis, smoothness)
    v = smoothness.order
    J = part.n_blocks
    layout = ParamLayout(J, basis.degrees, 0)
    deltas = np.diff(np.asarray(part.edges))
    rows: list[np.ndarray] = []
    for u, d in enumerate(basis.degrees):
        for j in range(J - 1):
            dj, dj1 = deltas[j], deltas[j + 1]
            here = layout.gamma_start(u, j)
            nxt = layout.gamma_start(u, j + 1)
            powers = np.arange(d + 1, dtype=float)
            row = np.zeros(layout.dim_gamma)
            row[here : here + d + 1] = 1.0 if basis.scaled else dj**powers
            row[nxt] = -1.0
            rows.append(row)
            if v >= 1:
                drow = np.zeros(layout.dim_gamma)
                if basis.scaled:
                    drow[here : here + d + 1] = (dj1 / dj) * powers
                else:
                    drow[here + 1 : here + d + 1] = powers[1:] * dj ** (powers[1:] - 1.0)
                drow[nxt + 1] = -1.0
                rows.append(drow)
    # Reorder covariate-major: rows were generated covariate-major already.
    return np.asarray(rows) if rows else np.zeros((0, layout.dim_gamma))


def _rtilde_one_covariate(
    deltas: np.ndarray, d: int, scaled: bool, smoothness: Smoothness
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """R~ block for one covariate and the (block, degree) of each free column."""
    J = len(deltas)
    v = smoothness.order
    n_free = J * (d + 1) - (v + 1) * (J - 1)
    rows: list[np.ndarray] = []
    free: list[tuple[int, int]] = []
    col = 0
    prev: list[np.ndarray] = []
    powers = np.arange(d + 1, dtype=float)
    for j in range(J):
        cur: list[np.ndarray] = []
        regenerated = 0 if j == 0 else v + 1
        if j > 0 and v >= 0:
            # Value continuity: intercept = previous block evaluated at the edge.
            w = np.ones(d + 1) if scaled else deltas[j - 1] ** powers
            cur.append(sum(w[k] * prev[k] for k in range(d + 1)))
            if v >= 1:
                # Derivative continuity: linear term = previous derivative
                # at the edge, times the block-length ratio under scaling.
                if scaled:
                    w1 = (deltas[j] / deltas[j - 1]) * powers
                else:
                    w1 = np.concatenate(([0.0], powers[1:] * deltas[j - 1] ** (powers[1:] - 1.0)))
                cur.append(sum(w1[k] * prev[k] for k in range(d + 1)))
        for deg in range(regenerated, d + 1):
            unit = np.zeros(n_free)
            unit[col] = 1.0
            cur.append(unit)
            free.append((j, deg))
            col += 1
        rows.extend(cur)
        prev = cur
    assert col == n_free
    return np.asarray(rows), free


def build_Rtilde(
    part: Partition, basis: BasisSpec, smoothness: Smoothness, p: int
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Reduction map R~, the defining row of each reduced coordinate, and labels.

    Returns
    -------
    Rtilde : ndarray, (dim theta, dim theta*)
    free_positions : ndarray of int
        For each theta* coordinate, the global theta index whose R~ row
        is its defining unit row; theta*[k] = theta[free_positions[k]]
        for any theta satisfying the constraints.
    labels : list of str
        Human-readable coordinate names for reports.
    """
    if smoothness is not Smoothness.NONE:
        _check_degrees(basis, smoothness)
    J = part.n_blocks
    layout = ParamLayout(J, basis.degrees, p)
    deltas = np.diff(np.asarray(part.edges))
    blocks: list[np.ndarray] = []
    free_positions: list[int] = []
    labels: list[str] = []
    for u, d in enumerate(basis.degrees):
        Ru, free = _rtilde_one_covariate(deltas, d, basis.scaled, smoothness)
        blocks.append(Ru)
        for j, deg in free:
            free_positions.append(layout.gamma_start(u, j) + deg)
            labels.append(f"gamma{u + 1}.b{j + 1}.d{deg}")
    sizes_r = [b.shape[0] for b in blocks] + [p]
    sizes_c = [b.shape[1] for b in blocks] + [p]
    R = np.zeros((sum(sizes_r), sum(sizes_c)))
    r0 = c0 = 0
    for b in blocks:
        R[r0 : r0 + b.shape[0], c0 : c0 + b.shape[1]] = b
        r0 += b.shape[0]
        c0 += b.shape[1]
    R[r0 : r0 + p, c0 : c0 + p] = np.eye(p)
    for k in range(p):
        free_positions.append(layout.dim_gamma + k)
        labels.append(f"eta{k + 1}")
    return R, np.asarray(free_positions, dtype=np.int64), labels


def build_D(layout: ParamLayout) -> np.ndarray:
    """Diagonal of the penalty selector: 1 on gamma entries, 0 on eta."""
    d = np.zeros(layout.dim_theta)
    d[: layout.dim_gamma] = 1.0
    return d


@dataclass(frozen=True)
class ConstraintMap:
    """Bundle of the constraint system for one fitting configuration."""

    part: Partition
    basis: BasisSpec
    p: int
    smoothness: Smoothness
    layout: ParamLayout
    H: np.ndarray
    Rtilde: np.ndarray
    D_diag: np.ndarray
    Dtilde: np.ndarray
    free_positions: np.ndarray
    labels: tuple[str, ...]

    @property
    def dim_theta(self) -> int:
        return self.layout.dim_theta

    @property
    def dim_theta_star(self) -> int:
        return self.Rtilde.shape[1]

    @property
    def rank_H(self) -> int:
        return self.H.shape[0]

    def expand(self, theta_star: np.ndarray) -> np.ndarray:
        """theta = R~ theta*."""
        return self.Rtilde @ theta_star

    def reduce(self, theta: np.ndarray) -> np.ndarray:
        """Read theta* off a constraint-satisfying theta (free coordinates)."""
        return np.asarray(theta)[self.free_positions]

    def eta_rows(self) -> np.ndarray:
        """Rows of R~ selecting eta: eta = eta_rows() @ theta*."""
        return self.Rtilde[self.layout.eta_indices, :]


def build_constraints(
    part: Partition, basis: BasisSpec, p: int, smoothness: Smoothness
) -> ConstraintMap:
    """Construct H, R~, D and D~ = R~' D R~ for one configuration."""
    layout = ParamLayout(part.n_blocks, basis.degrees, p)
    if smoothness is Smoothness.NONE:
        H = np.zeros((0, layout.dim_gamma))
    else:
        H = build_H(part, basis, smoothness)
    R, free_positions, labels = build_Rtilde(part, basis, smoothness, p)
    D_diag = build_D(layout)
    Rg = R[: layout.dim_gamma, :]
    return ConstraintMap(
        part=part,
        basis=basis,
        p=p,
        smoothness=smoothness,
        layout=layout,
        H=H,
        Rtilde=R,
        D_diag=D_diag,
        Dtilde=Rg.T @ Rg,
        free_positions=free_positions,
        labels=tuple(labels),
    )
