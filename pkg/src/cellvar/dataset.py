"""Per-cell capacity traces: ingestion, validation, normalization, truncation.

The canonical input is a long-form CSV with one check-up measurement per
row (``cell_id,time,capacity``).  Ingestion groups rows by cell, sorts each
cell by time, resolves duplicate time stamps by keeping the last occurrence,
re-bases every trace so it starts at t = 0, and validates that raw
capacities are positive.  Normalization converts ampere-hours to percent,
either of each cell's own first measurement or of the nominal capacity of
the cell type.
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np


class Normalization(str, Enum):
    RAW = "raw"            # ampere-hours, as measured
    INITIAL = "initial"    # percent of the cell's own first measurement
    NOMINAL = "nominal"    # percent of the type's nominal capacity


class DataWarning(UserWarning):
    """Non-fatal data-quality issue (rejected cell, dropped trace)."""


class IngestError(ValueError):
    """Raised when a data file cannot be ingested."""


@dataclass(frozen=True)
class CapacityTrace:
    """One cell's capacity history.

    ``times`` are measured from the first check-up (``times[0] == 0``) and
    strictly increasing.  ``capacities`` are ampere-hours while raw and
    percent of the reference capacity once normalized.  Arrays are marked
    read-only so traces can be shared across threads.
    """

    cell_id: str
    times: np.ndarray
    capacities: np.ndarray
    normalization: Normalization

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        caps = np.array(self.capacities, dtype=float)
        if times.ndim != 1 or caps.ndim != 1 or times.size != caps.size:
            raise ValueError(
                f"{self.cell_id}: times and capacities must be 1-D and equally long"
            )
        if times.size < 3:
            raise ValueError(f"{self.cell_id}: need at least 3 points, got {times.size}")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(caps))):
            raise ValueError(f"{self.cell_id}: non-finite values in trace")
        if times[0] != 0.0:
            raise ValueError(f"{self.cell_id}: times must be re-based to start at 0")
        if np.any(np.diff(times) <= 0):
            raise ValueError(f"{self.cell_id}: times must be strictly increasing")
        if self.normalization is Normalization.RAW and np.any(caps <= 0):
            raise ValueError(f"{self.cell_id}: raw capacities must be positive")
        times.flags.writeable = False
        caps.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "capacities", caps)

    @property
    def n_points(self) -> int:
        return int(self.times.size)


@dataclass(frozen=True)
class Dataset:
    """A named collection of traces sharing one normalization state."""

    name: str
    traces: tuple[CapacityTrace, ...]
    nominal_capacity: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        if not self.traces:
            raise ValueError(f"{self.name}: dataset has no traces")
        ids = [t.cell_id for t in self.traces]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.name}: duplicate cell ids")
        norms = {t.normalization for t in self.traces}
        if len(norms) != 1:
            raise ValueError(f"{self.name}: traces mix normalization modes")

    @property
    def K(self) -> int:
        return len(self.traces)

    @property
    def normalization(self) -> Normalization:
        return self.traces[0].normalization

    @property
    def cell_ids(self) -> list[str]:
        return [t.cell_id for t in self.traces]


@dataclass
class IngestConfig:
    """Column mapping and validation limits for :func:`ingest_csv`.

    ``min_points`` defaults to 5: enough degrees of freedom for the largest
    (3-parameter) model plus the noise scale.
    """

    cell_col: str = "cell_id"
    time_col: str = "time"
    capacity_col: str = "capacity"
    time_unit: str = "hours"
    nominal_capacity: float | None = None
    min_points: int = 5
    name: str | None = None

    @classmethod
    def from_file(cls, path: str | Path) -> "IngestConfig":
        """Read a flat ``key = value`` text file ('#' starts a comment)."""
        cfg = cls()
        known = set(cfg.__dataclass_fields__)
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise IngestError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise IngestError(f"{path}:{lineno}: unknown config key {key!r}")
            if key == "nominal_capacity":
                cfg.nominal_capacity = float(value)
            elif key == "min_points":
                cfg.min_points = int(value)
            else:
                setattr(cfg, key, value)
        return cfg


def ingest_csv(path: str | Path, config: IngestConfig | None = None) -> Dataset:
    """Parse a long-form capacity CSV into a raw (ampere-hour) dataset.

    Malformed rows abort ingestion with an error naming every offending
    line.  Cells with fewer than ``config.min_points`` check-ups after
    de-duplication are rejected with a :class:`DataWarning`; the rejection
    is fatal only if it leaves fewer than 6 cells.
    """
    path = Path(path)
    config = config or IngestConfig()
    if not path.exists():
        raise IngestError(f"{path}: no such file")

    rows: dict[str, dict[float, float]] = {}
    bad_lines: list[str] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in (config.cell_col, config.time_col, config.capacity_col)
                   if c not in header]
        if missing:
            raise IngestError(f"{path}: missing column(s) {missing}; header is {header}")
        for record in reader:
            line = reader.line_num
            cell = record.get(config.cell_col)
            try:
                t = float(record[config.time_col])
                cap = float(record[config.capacity_col])
            except (TypeError, ValueError):
                bad_lines.append(f"line {line}: unparseable time/capacity")
                continue
            if not cell:
                bad_lines.append(f"line {line}: empty cell id")
                continue
            if not (np.isfinite(t) and np.isfinite(cap)):
                bad_lines.append(f"line {line}: non-finite value")
                continue
            if t < 0:
                bad_lines.append(f"line {line}: negative time")
                continue
            if cap <= 0:
                bad_lines.append(f"line {line}: non-positive capacity")
                continue
            # insertion order preserved; a repeated time stamp overwrites,
            # keeping the last occurrence in file order
            rows.setdefault(str(cell), {})[t] = cap
    if bad_lines:
        raise IngestError(f"{path}: malformed rows ({'; '.join(bad_lines)})")
    if not rows:
        raise IngestError(f"{path}: no data rows")

    traces = []
    rejected = []
    for cell_id, by_time in rows.items():
        times = np.array(sorted(by_time), dtype=float)
        caps = np.array([by_time[t] for t in times], dtype=float)
        if times.size < config.min_points:
            rejected.append(cell_id)
            warnings.warn(
                f"{path}: cell {cell_id!r} has {times.size} points "
                f"(< {config.min_points}), rejected",
                DataWarning,
                stacklevel=2,
            )
            continue
        times = times - times[0]
        traces.append(CapacityTrace(cell_id, times, caps, Normalization.RAW))

    if not traces:
        raise IngestError(f"{path}: every cell was rejected")
    if rejected and len(traces) < 6:
        raise IngestError(
            f"{path}: rejecting {rejected} leaves only {len(traces)} cells (< 6)"
        )
    name = config.name or path.stem
    return Dataset(name=name, traces=tuple(traces),
                   nominal_capacity=config.nominal_capacity)


def normalize(dataset: Dataset, mode: Normalization) -> Dataset:
    """Convert a raw dataset to percent capacity.

    ``INITIAL`` divides each trace by its own first capacity, ``NOMINAL``
    divides all traces by the dataset's nominal capacity.  Normalizing an
    already-normalized dataset in the same mode is the identity; mixing
    modes is an error.
    """
    if mode is Normalization.RAW:
        raise ValueError("cannot normalize to RAW")
    if dataset.normalization is mode:
        return dataset
    if dataset.normalization is not Normalization.RAW:
        raise ValueError(
            f"{dataset.name}: already normalized to "
            f"{dataset.normalization.value!r}, cannot renormalize to {mode.value!r}"
        )
    if mode is Normalization.NOMINAL and not (
        dataset.nominal_capacity and dataset.nominal_capacity > 0
    ):
        raise ValueError(f"{dataset.name}: nominal capacity required but not set")

    traces = []
    for tr in dataset.traces:
        if mode is Normalization.INITIAL:
            first = tr.capacities[0]
            if first <= 0:
                raise ValueError(f"{tr.cell_id}: first capacity must be positive")
            caps = tr.capacities / first * 100.0
        else:
            caps = tr.capacities / dataset.nominal_capacity * 100.0
        traces.append(CapacityTrace(tr.cell_id, tr.times, caps, mode))
    return replace(dataset, traces=tuple(traces))


def truncate_pre_knee(
    dataset: Dataset,
    knee_params: Mapping[str, tuple[float, float]],
    min_points: int = 4,
) -> Dataset:
    """Keep only the early, near-linear part of each trace.

    ``knee_params`` maps cell id to the fitted knee onset and time constant
    ``(t_f, tau)``.  Points with ``t <= t_f - 2*tau`` are retained: at that
    cutoff the accelerating term is below 0.14% capacity, negligible next
    to typical check-up scatter.  Traces left with fewer than ``min_points``
    points are dropped with a :class:`DataWarning`.
    """
    missing = [t.cell_id for t in dataset.traces if t.cell_id not in knee_params]
    if missing:
        raise ValueError(f"{dataset.name}: no knee parameters for cells {missing}")

    kept = []
    for tr in dataset.traces:
        t_f, tau = knee_params[tr.cell_id]
        cutoff = t_f - 2.0 * tau
        mask = tr.times <= cutoff
        if int(mask.sum()) < min_points:
            warnings.warn(
                f"{tr.cell_id}: {int(mask.sum())} points at or before "
                f"t_f - 2*tau = {cutoff:.6g}, trace dropped",
                DataWarning,
                stacklevel=2,
            )
            continue
        kept.append(
            CapacityTrace(tr.cell_id, tr.times[mask], tr.capacities[mask],
                          tr.normalization)
        )
    if not kept:
        raise ValueError(f"{dataset.name}: truncation dropped every trace")
    return replace(dataset, traces=tuple(kept))


def write_csv(dataset: Dataset, path: str | Path) -> None:
    """Write the long-form CSV that :func:`ingest_csv` reads back.

    Floats are written with full round-trip precision so that ingestion
    after serialization reproduces the dataset exactly.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "time", "capacity"])
        for tr in dataset.traces:
            for t, cap in zip(tr.times, tr.capacities):
                writer.writerow([tr.cell_id, repr(float(t)), repr(float(cap))])


def dataset_hash(dataset: Dataset) -> str:
    """Content hash of the traces (name excluded), for caches and manifests."""
    h = hashlib.sha256()
    for tr in sorted(dataset.traces, key=lambda t: t.cell_id):
        h.update(tr.cell_id.encode())
        h.update(tr.normalization.value.encode())
        h.update(np.ascontiguousarray(tr.times).tobytes())
        h.update(np.ascontiguousarray(tr.capacities).tobytes())
    h.update(repr(dataset.nominal_capacity).encode())
    return h.hexdigest()
