"""Partitioning of long-format longitudinal data into per-block datasets.

A partition is a sorted list of edges (c_0, ..., c_J).  Block j covers
[c_{j-1}, c_j), half-open, except the last block which is closed on the
right so c_J is not dropped.  Splitting preserves subject ordering and
within-subject time ordering, and is a bijection on observations.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError
from .model import BlockModel, block_design

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Partition:
    """Ordered partition edges (c_0, ..., c_J) of the observation window."""

    edges: tuple[float, ...]

    def __post_init__(self) -> None:
        edges = tuple(float(c) for c in self.edges)
        if len(edges) < 2:
            raise ConfigurationError("a partition needs at least 2 edges")
        if not all(np.isfinite(edges)):
            raise ConfigurationError(f"partition edges must be finite: {edges}")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ConfigurationError(f"partition edges must be strictly increasing: {edges}")
        object.__setattr__(self, "edges", edges)

    @property
    def n_blocks(self) -> int:
        return len(self.edges) - 1

    def block_bounds(self, j: int) -> tuple[float, float]:
        return self.edges[j], self.edges[j + 1]

    def block_of(self, times: np.ndarray) -> np.ndarray:
        """Block index for each time; last block closed on the right.

        Raises
        ------
        DataError
            Any time outside [c_0, c_J].
        """
        t = np.asarray(times, dtype=float)
        lo, hi = self.edges[0], self.edges[-1]
        bad = (t < lo) | (t > hi)
        if np.any(bad):
            k = int(np.argmax(bad))
            raise DataError(
                f"observation time {t.flat[k]} outside the partition window [{lo}, {hi}]"
            )
        # side='right' maps t in [c_{j-1}, c_j) to j-1; t == c_J lands past
        # the end and is clipped into the final block.
        idx = np.searchsorted(np.asarray(self.edges), t, side="right") - 1
        return np.minimum(idx, self.n_blocks - 1)


def make_partition(
    edges=None,
    n_blocks: int | None = None,
    domain: tuple[float, float] | None = None,
) -> Partition:
    """Build a Partition from explicit edges or a uniform-block spec.

    Exactly one of ``edges`` and ``n_blocks`` (with ``domain``) must be
    supplied.
    """
    if (edges is None) == (n_blocks is None):
        raise ConfigurationError("supply exactly one of explicit edges or a block count")
    if edges is not None:
        return Partition(tuple(edges))
    if domain is None:
        raise ConfigurationError("a uniform-block spec needs the time domain (t_min, t_max)")
    if n_blocks < 1:
        raise ConfigurationError(f"block count must be >= 1, got {n_blocks}")
    return Partition(tuple(np.linspace(domain[0], domain[1], n_blocks + 1)))


def _validate_rows(times: np.ndarray, offsets: np.ndarray, ids) -> None:
    for i in range(len(offsets) - 1):
        t = times[offsets[i] : offsets[i + 1]]
        if t.size == 0:
            raise DataError(f"subject {ids[i]} has no observations")
        if np.any(np.diff(t) <= 0):
            raise DataError(f"times for subject {ids[i]} are not strictly increasing")


@dataclass
class LongData:
    """Long-format data, stored subject-major with per-subject row ranges.

    ``ids`` holds the original subject labels in order of first
    appearance; row blocks follow the same order, so subject i occupies
    rows offsets[i]:offsets[i+1].  Arrays are treated as immutable.
    """

    ids: np.ndarray
    times: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    offsets: np.ndarray

    def __post_init__(self) -> None:
        self.times = np.ascontiguousarray(self.times, dtype=float)
        self.y = np.ascontiguousarray(self.y, dtype=float)
        self.X = np.ascontiguousarray(self.X, dtype=float)
        self.Z = np.ascontiguousarray(self.Z, dtype=float)
        self.offsets = np.ascontiguousarray(self.offsets, dtype=np.int64)
        n_rows = self.times.shape[0]
        if self.y.shape != (n_rows,):
            raise DataError(f"y shape {self.y.shape} != ({n_rows},)")
        if self.X.ndim != 2 or self.X.shape[0] != n_rows:
            raise DataError(f"X shape {self.X.shape} incompatible with {n_rows} rows")
        if self.Z.ndim != 2 or self.Z.shape[0] != n_rows:
            raise DataError(f"Z shape {self.Z.shape} incompatible with {n_rows} rows")
        if self.offsets[0] != 0 or self.offsets[-1] != n_rows:
            raise DataError("offsets must start at 0 and end at the row count")
        for arr in (self.times, self.y, self.X, self.Z):
            if not np.all(np.isfinite(arr)):
                raise DataError("non-finite value in data")
        _validate_rows(self.times, self.offsets, self.ids)

    @property
    def n_subjects(self) -> int:
        return len(self.offsets) - 1

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def p(self) -> int:
        return self.Z.shape[1]

    @property
    def balanced(self) -> bool:
        counts = np.diff(self.offsets)
        if not np.all(counts == counts[0]):
            return False
        t = self.times.reshape(self.n_subjects, int(counts[0]))
        return bool(np.all(t == t[0]))


def from_balanced_arrays(y: np.ndarray, X: np.ndarray, Z: np.ndarray, times: np.ndarray) -> LongData:
    """Assemble LongData from balanced (N, M, .) arrays on a shared grid."""
    y = np.asarray(y, dtype=float)
    n, m = y.shape
    return LongData(
        ids=np.arange(n),
        times=np.tile(np.asarray(times, dtype=float), n),
        y=y.reshape(-1),
        X=np.asarray(X, dtype=float).reshape(n * m, -1),
        Z=np.asarray(Z, dtype=float).reshape(n * m, -1),
        offsets=np.arange(n + 1, dtype=np.int64) * m,
    )


@dataclass
class BlockData:
    """Rows of one block, subject-major, plus the block's edges.

    ``subject_index`` lists the dense global subject indices present in
    this block (ascending); offsets are local to those subjects.
    Instances are immutable after construction and safe to share across
    workers.
    """

    index: int
    left: float
    right: float
    times: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    offsets: np.ndarray
    subject_index: np.ndarray
    n_subjects_total: int
    _design_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_present(self) -> int:
        return len(self.subject_index)

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def balanced(self) -> bool:
        counts = self.counts
        if counts.size == 0 or not np.all(counts == counts[0]):
            return False
        t = self.times.reshape(self.n_present, int(counts[0]))
        return bool(np.all(t == t[0]))

    def rows(self, i: int) -> slice:
        """Row range of the i-th present subject."""
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def design(self, model: BlockModel) -> np.ndarray:
        """Cached linear-predictor design matrix for all rows of the block."""
        mat = self._design_cache.get(model)
        if mat is None:
            mat = block_design(model, self.X, self.Z, self.times, self.left, self.right)
            self._design_cache[model] = mat
        return mat

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_design_cache"] = {}
        return state


def split(data: LongData, part: Partition) -> list[BlockData]:
    """Assign every observation to its block and regroup subject-major.

    Raises
    ------
    DataError
        An observation time outside [c_0, c_J].
    ConfigurationError
        A block with no observations at all.
    """
    bidx = part.block_of(data.times)
    n, J = data.n_subjects, part.n_blocks
    sub_of_row = np.repeat(np.arange(n), np.diff(data.offsets))
    blocks: list[BlockData] = []
    incomplete = False
    for j in range(J):
        mask = bidx == j
        if not np.any(mask):
            raise ConfigurationError(
                f"block {j + 1} of {J} ([{part.edges[j]}, {part.edges[j + 1]}]) "
                "contains no observations; coarsen the partition"
            )
        subs = sub_of_row[mask]
        counts = np.bincount(subs, minlength=n)
        present = np.flatnonzero(counts)
        if len(present) < n:
            incomplete = True
        offsets = np.concatenate(([0], np.cumsum(counts[present])))
        left, right = part.block_bounds(j)
        blocks.append(
            BlockData(
                index=j,
                left=left,
                right=right,
                times=data.times[mask],
                y=data.y[mask],
                X=data.X[mask],
                Z=data.Z[mask],
                offsets=offsets.astype(np.int64),
                subject_index=present,
                n_subjects_total=n,
            )
        )
    if incomplete:
        logger.warning(
            "some subjects contribute no observations to one or more blocks; "
            "block fits proceed, but the combination step requires complete membership"
        )
    return blocks


def csv_header(q: int, p: int) -> list[str]:
    return ["id", "time", "y"] + [f"x{u + 1}" for u in range(q)] + [f"z{k + 1}" for k in range(p)]


def read_long_csv(path: str, q: int, p: int) -> LongData:
    """Read long-format data with the exact header id,time,y,x1..xq,z1..zp.

    Columns beyond the declared q and p are rejected; missing values are
    an error.  Subject labels are remapped to a dense index in order of
    first appearance (original labels are preserved in ``ids``).
    """
    expected = csv_header(q, p)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read data file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [h.strip() for h in header] != expected:
            raise DataError(
                f"{path}: header {header} does not match the declared layout {expected}"
            )
        raw_ids: list[str] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DataError(f"{path}:{lineno}: expected {len(expected)} fields, got {len(row)}")
            if any(f.strip() == "" for f in row):
                raise DataError(f"{path}:{lineno}: missing value")
            raw_ids.append(row[0].strip())
            try:
                rows.append([float(f) for f in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric field ({exc})") from exc
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=float)
    order: dict[str, int] = {}
    for rid in raw_ids:
        if rid not in order:
            order[rid] = len(order)
    sub = np.asarray([order[rid] for rid in raw_ids])
    # Regroup subject-major, keeping within-subject file order.
    perm = np.argsort(sub, kind="stable")
    values = values[perm]
    counts = np.bincount(sub, minlength=len(order))
    ids = np.asarray(list(order.keys()))
    try:
        ids = ids.astype(np.int64)
    except ValueError:
        pass
    return LongData(
        ids=ids,
        times=values[:, 0],
        y=values[:, 1],
        X=values[:, 2 : 2 + q],
        Z=values[:, 2 + q : 2 + q + p],
        offsets=np.concatenate(([0], np.cumsum(counts))).astype(np.int64),
    )


def write_long_csv(data: LongData, path: str, metadata: dict[str, str] | None = None) -> None:
    """Write LongData in the long CSV layout, with optional '#' metadata lines."""
    with open(path, "w", newline="") as fh:
        for key, value in (metadata or {}).items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh)
        writer.writerow(csv_header(data.q, data.p))
        for i in range(data.n_subjects):
            label = data.ids[i]
            for r in range(int(data.offsets[i]), int(data.offsets[i + 1])):
                writer.writerow(
                    [label, repr(float(data.times[r])), repr(float(data.y[r]))]
                    + [repr(float(v)) for v in data.X[r]]
                    + [repr(float(v)) for v in data.Z[r]]
                )
