"""Domain types for sequential test acquisition: information states, paths,
partially observed records, per-test costs, and the cost-augmented loss.

A subject starts with a free baseline block ``x0`` and may acquire up to two
optional test blocks ``x1``/``x2``, in either order, stopping at any point.
Which blocks ended up observed is summarized by an :class:`InformationState`;
how they were acquired by an :class:`AcquisitionPath`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, EmptyData, InvalidPath, MissingBlock

# Clamp applied to binary predictions before taking logs.
PROB_CLAMP = 1e-12


class InformationState(Enum):
    """Which feature blocks have been acquired."""

    S0 = "S0"
    S1only = "S1only"
    S2only = "S2only"
    S12 = "S12"

    @property
    def blocks(self) -> tuple[int, ...]:
        """Observed block indices, baseline block 0 always included."""
        return _STATE_BLOCKS[self]

    @property
    def tests(self) -> tuple[int, ...]:
        """Acquired test indices (subset of {1, 2})."""
        return tuple(b for b in self.blocks if b != 0)

    def cost(self, costs: "CostSchedule") -> float:
        """Cumulative acquisition cost at this state."""
        per_test = {1: costs.c1, 2: costs.c2}
        return sum(per_test[t] for t in self.tests)


_STATE_BLOCKS = {
    InformationState.S0: (0,),
    InformationState.S1only: (0, 1),
    InformationState.S2only: (0, 2),
    InformationState.S12: (0, 1, 2),
}

# The five admissible (s1, s2) pairs: no repeats, no resuming after a stop.
VALID_PATHS = ((0, 0), (1, 0), (2, 0), (1, 2), (2, 1))

_PATH_STATE = {
    (0, 0): InformationState.S0,
    (1, 0): InformationState.S1only,
    (2, 0): InformationState.S2only,
    (1, 2): InformationState.S12,
    (2, 1): InformationState.S12,
}


@dataclass(frozen=True)
class AcquisitionPath:
    """Ordered pair of acquisition decisions (0 = stop)."""

    s1: int
    s2: int

    def __post_init__(self) -> None:
        if (self.s1, self.s2) not in _PATH_STATE:
            raise InvalidPath(f"({self.s1}, {self.s2}) is not an admissible path")

    @property
    def state(self) -> InformationState:
        return _PATH_STATE[(self.s1, self.s2)]

    @property
    def n_tests(self) -> int:
        return (self.s1 != 0) + (self.s2 != 0)


def state_of_path(path: AcquisitionPath | tuple[int, int]) -> InformationState:
    """Map an acquisition path to its information state.

    Raises InvalidPath for repeats like (1, 1) or resume-after-stop like (0, 1).
    """
    pair = (path.s1, path.s2) if isinstance(path, AcquisitionPath) else tuple(path)
    try:
        return _PATH_STATE[pair]
    except KeyError:
        raise InvalidPath(f"{pair} is not an admissible path") from None


def _freeze(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is None:
        return None
    out = np.asarray(a, dtype=float).reshape(-1)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Record:
    """One subject: baseline block, optionally observed test blocks, outcome, path."""

    x0: np.ndarray
    x1: Optional[np.ndarray]
    x2: Optional[np.ndarray]
    y: float
    path: AcquisitionPath

    def __post_init__(self) -> None:
        object.__setattr__(self, "x0", _freeze(self.x0))
        object.__setattr__(self, "x1", _freeze(self.x1))
        object.__setattr__(self, "x2", _freeze(self.x2))
        observed = self.path.state.blocks
        for idx, block in ((1, self.x1), (2, self.x2)):
            if (idx in observed) and block is None:
                raise MissingBlock(f"path {self.path} requires block x{idx}")
            if (idx not in observed) and block is not None:
                raise InvalidPath(f"block x{idx} present but path {self.path} never visits test {idx}")

    @property
    def state(self) -> InformationState:
        return self.path.state


@dataclass(frozen=True)
class CostSchedule:
    """Per-test acquisition costs on the loss scale; the baseline block is free."""

    c1: float
    c2: float

    def __post_init__(self) -> None:
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError("costs must be nonnegative")

    def cost_of_test(self, j: int) -> float:
        return {1: self.c1, 2: self.c2}[j]

    def scaled(self, factor: float) -> "CostSchedule":
        return CostSchedule(self.c1 * factor, self.c2 * factor)


def features_at_state(record: Record, state: InformationState) -> np.ndarray:
    """Concatenate the record's blocks required by ``state``, in (x0, x1, x2) order."""
    parts = []
    for b in state.blocks:
        block = (record.x0, record.x1, record.x2)[b]
        if block is None:
            raise MissingBlock(f"record lacks block x{b} required by state {state.value}")
        parts.append(block)
    return np.concatenate(parts)


def prediction_loss(y: float | np.ndarray, p: float | np.ndarray, kind: str = "binary"):
    """Cross-entropy for binary outcomes, squared error for continuous ones.

    Binary predictions are clamped to [1e-12, 1 - 1e-12] before the log.
    """
    y = np.asarray(y, dtype=float)
    p = np.asarray(p, dtype=float)
    if kind == "binary":
        p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
        out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    elif kind == "continuous":
        out = (y - p) ** 2
    else:
        raise ValueError(f"unknown outcome kind {kind!r}")
    return float(out) if out.ndim == 0 else out


def cost_augmented_loss(
    y: float,
    p: float,
    state: InformationState,
    costs: CostSchedule,
    kind: str = "binary",
) -> float:
    """Prediction loss plus the cumulative acquisition cost of ``state``."""
    return float(prediction_loss(y, p, kind)) + state.cost(costs)


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of records sharing block dimensions and outcome kind."""

    records: tuple[Record, ...]
    dims: tuple[int, int, int]
    outcome_kind: str = "binary"

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise EmptyData("dataset has no records")
        if self.outcome_kind not in ("binary", "continuous"):
            raise ValueError(f"unknown outcome kind {self.outcome_kind!r}")
        p0, p1, p2 = self.dims
        for i, r in enumerate(self.records):
            if r.x0.shape != (p0,):
                raise DataError(f"record {i}: x0 has dim {r.x0.shape[0]}, expected {p0}")
            if r.x1 is not None and r.x1.shape != (p1,):
                raise DataError(f"record {i}: x1 has dim {r.x1.shape[0]}, expected {p1}")
            if r.x2 is not None and r.x2.shape != (p2,):
                raise DataError(f"record {i}: x2 has dim {r.x2.shape[0]}, expected {p2}")
            if self.outcome_kind == "binary" and r.y not in (0.0, 1.0):
                raise DataError(f"record {i}: binary outcome must be 0 or 1, got {r.y}")

    def __len__(self) -> int:
        return len(self.records)

    # Columnar views used by the fitting code. Missing blocks are NaN rows.

    @cached_property
    def x0(self) -> np.ndarray:
        return np.array([r.x0 for r in self.records])

    @cached_property
    def x1(self) -> np.ndarray:
        p1 = self.dims[1]
        out = np.full((len(self), p1), np.nan)
        for i, r in enumerate(self.records):
            if r.x1 is not None:
                out[i] = r.x1
        return out

    @cached_property
    def x2(self) -> np.ndarray:
        p2 = self.dims[2]
        out = np.full((len(self), p2), np.nan)
        for i, r in enumerate(self.records):
            if r.x2 is not None:
                out[i] = r.x2
        return out

    @cached_property
    def y(self) -> np.ndarray:
        return np.array([r.y for r in self.records])

    @cached_property
    def s1(self) -> np.ndarray:
        return np.array([r.path.s1 for r in self.records], dtype=int)

    @cached_property
    def s2(self) -> np.ndarray:
        return np.array([r.path.s2 for r in self.records], dtype=int)

    @cached_property
    def state_names(self) -> np.ndarray:
        return np.array([r.state.value for r in self.records])

    def test_block(self, j: int) -> np.ndarray:
        """Columns for test block j in {1, 2} (NaN where unobserved)."""
        return {1: self.x1, 2: self.x2}[j]

    def history(self, j: int) -> np.ndarray:
        """Concatenated (x0, xj) history matrix; NaN rows where xj unobserved."""
        return np.hstack([self.x0, self.test_block(j)])

    @cached_property
    def full_features(self) -> np.ndarray:
        """(x0, x1, x2) matrix; NaN where blocks are unobserved."""
        return np.hstack([self.x0, self.x1, self.x2])

    @property
    def fully_observed(self) -> bool:
        return all(r.state is InformationState.S12 for r in self.records)


def dataset_from_arrays(
    x0: np.ndarray,
    x1: np.ndarray,
    x2: np.ndarray,
    y: np.ndarray,
    s1: np.ndarray,
    s2: np.ndarray,
    outcome_kind: str = "binary",
) -> Dataset:
    """Build a Dataset from columnar arrays; NaN rows in x1/x2 mean unobserved."""
    x0 = np.atleast_2d(np.asarray(x0, float))
    x1 = np.atleast_2d(np.asarray(x1, float))
    x2 = np.atleast_2d(np.asarray(x2, float))
    records = []
    for i in range(x0.shape[0]):
        path = AcquisitionPath(int(s1[i]), int(s2[i]))
        b1 = x1[i] if 1 in path.state.blocks else None
        b2 = x2[i] if 2 in path.state.blocks else None
        records.append(Record(x0[i], b1, b2, float(y[i]), path))
    dims = (x0.shape[1], x1.shape[1], x2.shape[1])
    return Dataset(tuple(records), dims, outcome_kind)


# ---------------------------------------------------------------------------
# CSV schema: x0_1..x0_p0, x1_1..x1_p1, x2_1..x2_p2, y, s1, s2.
# Missing blocks are empty fields; s1, s2 are integers in {0, 1, 2}.
# ---------------------------------------------------------------------------


def csv_header(dims: tuple[int, int, int]) -> list[str]:
    p0, p1, p2 = dims
    cols = [f"x0_{i + 1}" for i in range(p0)]
    cols += [f"x1_{i + 1}" for i in range(p1)]
    cols += [f"x2_{i + 1}" for i in range(p2)]
    return cols + ["y", "s1", "s2"]


def save_dataset_csv(dataset: Dataset, path: str) -> None:
    p0, p1, p2 = dataset.dims
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(csv_header(dataset.dims))
        for r in dataset.records:
            row = [repr(float(v)) for v in r.x0]
            row += [repr(float(v)) for v in r.x1] if r.x1 is not None else [""] * p1
            row += [repr(float(v)) for v in r.x2] if r.x2 is not None else [""] * p2
            y = int(r.y) if dataset.outcome_kind == "binary" else repr(float(r.y))
            writer.writerow(row + [y, r.path.s1, r.path.s2])


def _parse_block(fields: list[str], row_num: int, name: str) -> Optional[np.ndarray]:
    blank = [f.strip() == "" for f in fields]
    if all(blank):
        return None
    if any(blank):
        raise DataError(f"row {row_num}: block {name} is partially filled")
    try:
        return np.array([float(f) for f in fields])
    except ValueError as exc:
        raise DataError(f"row {row_num}: non-numeric value in block {name}: {exc}") from None


def load_dataset_csv(path: str, outcome_kind: Optional[str] = None) -> Dataset:
    """Load a dataset, validating path/observability consistency per row.

    Outcome kind is inferred (binary iff every y is 0 or 1) unless given.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file") from None
        dims = _dims_from_header(header)
        p0, p1, p2 = dims
        records: list[tuple] = []
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_num}: expected {len(header)} fields, got {len(row)}")
            x0 = _parse_block(row[:p0], row_num, "x0")
            if x0 is None:
                raise DataError(f"row {row_num}: baseline block x0 is missing")
            x1 = _parse_block(row[p0 : p0 + p1], row_num, "x1")
            x2 = _parse_block(row[p0 + p1 : p0 + p1 + p2], row_num, "x2")
            try:
                y = float(row[-3])
                s1, s2 = int(row[-2]), int(row[-1])
            except ValueError as exc:
                raise DataError(f"row {row_num}: bad y/s1/s2 fields: {exc}") from None
            if s1 not in (0, 1, 2) or s2 not in (0, 1, 2):
                raise DataError(f"row {row_num}: s1/s2 must be in {{0,1,2}}, got ({s1}, {s2})")
            try:
                path = AcquisitionPath(s1, s2)
            except InvalidPath as exc:
                raise DataError(f"row {row_num}: {exc}") from None
            records.append((x0, x1, x2, y, path, row_num))

    if not records:
        raise DataError("file has a header but no data rows")
    if outcome_kind is None:
        ys = {r[3] for r in records}
        outcome_kind = "binary" if ys <= {0.0, 1.0} else "continuous"
    built = []
    for x0, x1, x2, y, path, row_num in records:
        try:
            built.append(Record(x0, x1, x2, y, path))
        except (MissingBlock, InvalidPath) as exc:
            raise DataError(f"row {row_num}: {exc}") from None
    try:
        return Dataset(tuple(built), dims, outcome_kind)
    except DataError as exc:
        raise DataError(f"inconsistent dataset: {exc}") from None


def _dims_from_header(header: list[str]) -> tuple[int, int, int]:
    counts = {"x0": 0, "x1": 0, "x2": 0}
    expected_tail = ["y", "s1", "s2"]
    if [h.strip() for h in header[-3:]] != expected_tail:
        raise DataError(f"header must end with {expected_tail}, got {header[-3:]}")
    for col in header[:-3]:
        name = col.strip().split("_")[0]
        if name not in counts:
            raise DataError(f"unexpected column {col!r}")
        counts[name] += 1
    if counts["x0"] == 0:
        raise DataError("header has no x0 columns")
    return counts["x0"], counts["x1"], counts["x2"]


@dataclass(frozen=True)
class TruePropensities:
    """Behavior-policy probabilities actually used when sampling acquisition.

    ``first_stage[i]`` is the (stop, test1, test2) triple at x0; ``continue_prob[i]``
    is the continuation probability at the second decision (NaN when S1 = 0).
    """

    first_stage: np.ndarray
    continue_prob: np.ndarray

    def save_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pi_0_0", "pi_1_0", "pi_2_0", "pi_cont"])
            for probs, cont in zip(self.first_stage, self.continue_prob):
                row = [repr(float(p)) for p in probs]
                row.append("" if math.isnan(cont) else repr(float(cont)))
                writer.writerow(row)


def load_propensities_csv(path: str) -> TruePropensities:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["pi_0_0", "pi_1_0", "pi_2_0", "pi_cont"]:
            raise DataError(f"unexpected propensity header {header}")
        first, cont = [], []
        for row in reader:
            first.append([float(v) for v in row[:3]])
            cont.append(float(row[3]) if row[3].strip() else math.nan)
    return TruePropensities(np.array(first), np.array(cont))
