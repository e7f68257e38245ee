"""File formats: trace CSVs, model and population JSON, atomic writes.

Trace CSVs have the header ``timestamp,watt_hours`` with UTC ISO-8601
timestamps (``2024-01-01T00:02:00Z``) on a regular grid.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .hmm import ApplianceHmm
from .stats import PopulationModel

log = logging.getLogger(__name__)

TRACE_HEADER = ("timestamp", "watt_hours")
SECONDS_PER_DAY = 86400


class DataError(ValueError):
    """Malformed or unusable input data."""


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    """Canonical JSON: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps_json(obj))


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e


# -- models ---------------------------------------------------------------------

def save_hmm(path, hmm: ApplianceHmm) -> None:
    write_json(path, hmm.to_dict())


def load_hmm(path) -> ApplianceHmm:
    try:
        return ApplianceHmm.from_dict(read_json(path))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"{path}: invalid appliance model: {e}") from e


def save_population(path, pop: PopulationModel) -> None:
    write_json(path, pop.to_dict())


def load_population(path) -> PopulationModel:
    try:
        return PopulationModel.from_dict(read_json(path))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"{path}: invalid population model: {e}") from e


# -- traces ---------------------------------------------------------------------

@dataclass(frozen=True)
class Trace:
    """A regularly sampled series; ``start`` in UTC, ``step`` in seconds."""

    start: datetime
    step: int
    values: np.ndarray

    def timestamps(self) -> list[datetime]:
        return [self.start + timedelta(seconds=self.step * k)
                for k in range(self.values.size)]


def parse_timestamp(text: str) -> datetime:
    """Parse a UTC ISO-8601 timestamp; naive values are taken as UTC."""
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    ts = datetime.fromisoformat(s)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def read_trace(path) -> Trace:
    """Read a trace CSV, enforcing the header, finite non-negative values,
    strictly increasing timestamps and a constant whole-second step."""
    path = Path(path)
    try:
        f = open(path, encoding="utf-8", newline="")
    except OSError as e:
        raise DataError(f"{path}: cannot open: {e.strerror}") from e
    with f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataError(f"{path}: empty file")
    if tuple(c.strip() for c in rows[0]) != TRACE_HEADER:
        raise DataError(f"{path}:1: expected header {','.join(TRACE_HEADER)}")
    times, vals = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
        try:
            ts = parse_timestamp(row[0])
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from e
        try:
            v = float(row[1])
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: bad value {row[1]!r}") from e
        if not np.isfinite(v) or v < 0:
            raise DataError(f"{path}:{lineno}: value must be finite and >= 0")
        if times:
            gap = (ts - times[-1]).total_seconds()
            if gap <= 0:
                raise DataError(f"{path}:{lineno}: timestamps not increasing")
            step = (times[1] - times[0]).total_seconds() if len(times) > 1 else gap
            if gap != step or gap != int(gap):
                raise DataError(f"{path}:{lineno}: irregular sampling "
                                f"({gap:g} s, expected {step:g} s)")
        times.append(ts)
        vals.append(v)
    if not times:
        raise DataError(f"{path}: no data rows")
    step = int((times[1] - times[0]).total_seconds()) if len(times) > 1 else 0
    return Trace(start=times[0], step=step, values=np.array(vals))


def trace_csv(trace: Trace) -> str:
    lines = [",".join(TRACE_HEADER)]
    lines += [f"{format_timestamp(t)},{v:.10g}"
              for t, v in zip(trace.timestamps(), trace.values)]
    return "\n".join(lines) + "\n"


def write_trace(path, trace: Trace) -> None:
    atomic_write_text(path, trace_csv(trace))


def day_windows(trace: Trace) -> list[tuple[str, np.ndarray]]:
    """Split into midnight-aligned UTC days; partial days are skipped."""
    if trace.step <= 0 or SECONDS_PER_DAY % trace.step:
        raise DataError(f"sampling step {trace.step} s does not divide a day")
    per_day = SECONDS_PER_DAY // trace.step
    midnight = trace.start.replace(hour=0, minute=0, second=0, microsecond=0)
    offset = int((trace.start - midnight).total_seconds())
    if offset % trace.step:
        raise DataError("timestamps are not aligned with midnight")
    first = (per_day - offset // trace.step) % per_day
    if first:
        log.warning("skipping partial leading day (%d samples)", first)
    out = []
    k = first
    while k + per_day <= trace.values.size:
        day = trace.start + timedelta(seconds=trace.step * k)
        out.append((day.strftime("%Y-%m-%d"), trace.values[k:k + per_day]))
        k += per_day
    if k < trace.values.size:
        log.warning("skipping partial trailing day (%d samples)", trace.values.size - k)
    return out


def resample(trace: Trace, step: int = 120) -> Trace:
    """Sum consecutive samples into bins of ``step`` seconds aligned to the
    epoch; incomplete edge bins are dropped."""
    if trace.step <= 0 or step % trace.step:
        raise DataError(f"target step {step} s is not a multiple of {trace.step} s")
    ratio = step // trace.step
    epoch = int(trace.start.timestamp())
    if epoch % trace.step:
        raise DataError("timestamps are not aligned to the sampling step")
    lead = (-(epoch % step) // trace.step) % ratio
    n = (trace.values.size - lead) // ratio
    if n <= 0:
        raise DataError("trace shorter than one output bin")
    sums = trace.values[lead:lead + n * ratio].reshape(n, ratio).sum(axis=1)
    start = trace.start + timedelta(seconds=trace.step * lead)
    return Trace(start=start, step=step, values=sums)
