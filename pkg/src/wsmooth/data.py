"""Survey records, population margins, stratum aggregation and post-stratification weights.

Strata are dense 1-based indices ``1..H``; time points are ``1..T``. Per-time
arrays are laid out time-major with shape ``(T, H)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .errors import (
    BadValue,
    DimensionMismatch,
    EmptyFile,
    EmptyStratum,
    MissingColumn,
)

STRATUM_ALIASES = ("stratum", "h")


@dataclass(frozen=True)
class SurveySample:
    """Unit-level records: stratum index, binary outcome and optional time index."""

    stratum: np.ndarray
    y: np.ndarray
    t: Optional[np.ndarray] = None
    labels: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        stratum = np.asarray(self.stratum, dtype=np.int64)
        y = np.asarray(self.y, dtype=np.int64)
        if stratum.shape != y.shape or stratum.ndim != 1:
            raise DimensionMismatch("stratum and y must be 1-d arrays of equal length")
        if stratum.size and stratum.min() < 1:
            raise BadValue(int(np.argmin(stratum)) + 1, "stratum index must be >= 1")
        bad = np.flatnonzero((y != 0) & (y != 1))
        if bad.size:
            raise BadValue(int(bad[0]) + 1, "y must be 0 or 1")
        object.__setattr__(self, "stratum", stratum)
        object.__setattr__(self, "y", y)
        if self.t is not None:
            t = np.asarray(self.t, dtype=np.int64)
            if t.shape != y.shape:
                raise DimensionMismatch("t must have the same length as y")
            if t.size and t.min() < 1:
                raise BadValue(int(np.argmin(t)) + 1, "time index must be >= 1")
            object.__setattr__(self, "t", t)

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def n_strata(self) -> int:
        return int(self.stratum.max()) if self.n else 0

    @property
    def has_time(self) -> bool:
        return self.t is not None


@dataclass(frozen=True)
class PopulationMargins:
    """Known population counts ``N_h`` (shape ``(H,)``) or ``N_{h,t}`` (shape ``(T, H)``)."""

    counts: np.ndarray
    labels: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.float64)
        if counts.ndim not in (1, 2):
            raise DimensionMismatch("margins must be (H,) or (T, H)")
        if np.any(counts <= 0) or not np.all(np.isfinite(counts)):
            raise BadValue(int(np.argmin(counts.ravel())) + 1, "N_h must be positive")
        object.__setattr__(self, "counts", counts)

    @property
    def H(self) -> int:
        return self.counts.shape[-1]

    @property
    def T(self) -> Optional[int]:
        return self.counts.shape[0] if self.counts.ndim == 2 else None

    @property
    def total(self):
        """``N`` (scalar) or ``N_t`` per time point."""
        return self.counts.sum(axis=-1)

    @property
    def shares(self) -> np.ndarray:
        """``P_h = N_h / N`` (per time point for 2-d margins)."""
        return self.counts / self.total[..., None] if self.counts.ndim == 2 else self.counts / self.total


@dataclass(frozen=True)
class StratumSummary:
    """Per-stratum (or per stratum-time cell) sample sizes and positive counts."""

    n: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n, dtype=np.float64)
        s = np.asarray(self.s, dtype=np.float64)
        if n.shape != s.shape or n.ndim not in (1, 2):
            raise DimensionMismatch("n and s must share a (H,) or (T, H) shape")
        if np.any(n < 0) or np.any(s < 0) or np.any(s > n):
            raise ValueError("require 0 <= s <= n")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "s", s)

    @classmethod
    def from_means(cls, n, ybar):
        n = np.asarray(n, dtype=np.float64)
        return cls(n, n * np.asarray(ybar, dtype=np.float64))

    @property
    def H(self) -> int:
        return self.n.shape[-1]

    @property
    def T(self) -> Optional[int]:
        return self.n.shape[0] if self.n.ndim == 2 else None

    @property
    def total(self):
        return self.n.sum(axis=-1)

    @property
    def ybar(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.n > 0, self.s / np.where(self.n > 0, self.n, 1.0), np.nan)

    @property
    def p(self) -> np.ndarray:
        """Sample shares ``p_h = n_h / n``."""
        tot = self.total
        return self.n / (tot[..., None] if self.n.ndim == 2 else tot)

    def pooled(self) -> "StratumSummary":
        """Collapse the time axis."""
        if self.n.ndim == 1:
            return self
        return StratumSummary(self.n.sum(axis=0), self.s.sum(axis=0))

    def at_time(self, t: int) -> "StratumSummary":
        """Slice for 1-based time index ``t``."""
        return StratumSummary(self.n[t - 1], self.s[t - 1])


@dataclass(frozen=True)
class StratumWeights:
    """Post-stratification weights ``w_h = P_h / p_h``."""

    w: np.ndarray


def _read_rows(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyFile(f"{path} is empty")
        rows = list(reader)
    if not rows:
        raise EmptyFile(f"{path} has no data rows")
    return [f.strip() for f in reader.fieldnames], rows


def _label_index(labels: dict, raw: str, row: int, frozen: bool) -> int:
    key = raw.strip()
    if key in labels:
        return labels[key]
    if frozen:
        raise BadValue(row, f"unknown stratum label {key!r}")
    raise KeyError(key)


def _build_labels(raw_labels):
    """Dense 1-based indices; integer labels keep their value, others are ordered as sorted."""
    uniq = sorted(set(raw_labels))
    try:
        ints = {lab: int(lab) for lab in uniq}
    except ValueError:
        return {lab: i + 1 for i, lab in enumerate(uniq)}
    if min(ints.values()) < 1:
        return {lab: i + 1 for i, lab in enumerate(sorted(uniq, key=int))}
    return ints


def _parse_int(raw, row, what, allowed=None):
    try:
        val = int(raw.strip())
    except (ValueError, AttributeError):
        raise BadValue(row, f"{what} is not an integer: {raw!r}") from None
    if allowed is not None and val not in allowed:
        raise BadValue(row, f"{what} must be one of {sorted(allowed)}, got {val}")
    return val


def load_sample(path, schema: Optional[Mapping[str, str]] = None, labels: Optional[Mapping[str, int]] = None) -> SurveySample:
    """Read a ``stratum,y[,t]`` CSV into a validated :class:`SurveySample`.

    ``schema`` maps the logical names ``stratum``, ``y`` and ``t`` to column
    names. ``labels`` (usually taken from the margins file) fixes the mapping of
    stratum labels to indices; otherwise it is built from the sample.
    """
    header, rows = _read_rows(path)
    schema = dict(schema or {})
    scol = schema.get("stratum") or next((a for a in STRATUM_ALIASES if a in header), None)
    ycol = schema.get("y", "y")
    tcol = schema.get("t", "t")
    if scol is None or scol not in header:
        raise MissingColumn("stratum")
    if ycol not in header:
        raise MissingColumn(ycol)
    has_t = tcol in header

    raw_strata = [(r.get(scol) or "").strip() for r in rows]
    for i, lab in enumerate(raw_strata, start=1):
        if lab == "":
            raise BadValue(i, "missing stratum")
    label_map = dict(labels) if labels is not None else _build_labels(raw_strata)
    strata = np.empty(len(rows), dtype=np.int64)
    ys = np.empty(len(rows), dtype=np.int64)
    ts = np.empty(len(rows), dtype=np.int64) if has_t else None
    t_seen = None
    for i, r in enumerate(rows, start=1):
        strata[i - 1] = _label_index(label_map, raw_strata[i - 1], i, frozen=True)
        ys[i - 1] = _parse_int(r.get(ycol), i, "y", allowed={0, 1})
        if has_t:
            raw_t = (r.get(tcol) or "").strip()
            present = raw_t != ""
            if t_seen is None:
                t_seen = present
            elif present != t_seen:
                raise BadValue(i, "time index present on some rows only")
            if present:
                ts[i - 1] = _parse_int(raw_t, i, "t")
                if ts[i - 1] < 1:
                    raise BadValue(i, "time index must be >= 1")
    if has_t and not t_seen:
        ts = None
    return SurveySample(strata, ys, ts, labels=label_map)


def load_margins(path, schema: Optional[Mapping[str, str]] = None) -> PopulationMargins:
    """Read a ``stratum,N[,t]`` CSV; returns ``(H,)`` or ``(T, H)`` margins."""
    header, rows = _read_rows(path)
    schema = dict(schema or {})
    scol = schema.get("stratum") or next((a for a in STRATUM_ALIASES if a in header), None)
    ncol = schema.get("N", "N")
    tcol = schema.get("t", "t")
    if scol is None or scol not in header:
        raise MissingColumn("stratum")
    if ncol not in header:
        raise MissingColumn(ncol)
    has_t = tcol in header and any((r.get(tcol) or "").strip() for r in rows)
    raw_strata = [(r.get(scol) or "").strip() for r in rows]
    label_map = _build_labels(raw_strata)
    H = max(label_map.values())
    if has_t:
        times = [_parse_int(r.get(tcol), i, "t") for i, r in enumerate(rows, start=1)]
        T = max(times)
        counts = np.full((T, H), np.nan)
    else:
        counts = np.full(H, np.nan)
    for i, r in enumerate(rows, start=1):
        h = label_map[raw_strata[i - 1]]
        try:
            val = float(r.get(ncol))
        except (TypeError, ValueError):
            raise BadValue(i, f"N is not numeric: {r.get(ncol)!r}") from None
        if val <= 0:
            raise BadValue(i, "N must be positive")
        if has_t:
            counts[times[i - 1] - 1, h - 1] = val
        else:
            counts[h - 1] = val
    if np.isnan(counts).any():
        raise BadValue(len(rows), "margins table is incomplete")
    return PopulationMargins(counts, labels=label_map)


def aggregate(sample: SurveySample, H: int, T: Optional[int] = None) -> StratumSummary:
    """Count units and positives per stratum, or per (time, stratum) cell when ``T`` is given.

    Every stratum must hold at least one unit (pooled over time for the
    per-time table; individual cells may be empty).
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    if sample.n and sample.stratum.max() > H:
        raise BadValue(int(np.argmax(sample.stratum)) + 1, f"stratum index exceeds H={H}")
    if T is None:
        n = np.bincount(sample.stratum - 1, minlength=H).astype(float)
        s = np.bincount(sample.stratum - 1, weights=sample.y, minlength=H)
        pooled = n
    else:
        if sample.t is None:
            raise BadValue(1, "time index required for a per-time summary")
        if sample.t.max() > T:
            raise BadValue(int(np.argmax(sample.t)) + 1, f"time index exceeds T={T}")
        cell = (sample.t - 1) * H + (sample.stratum - 1)
        n = np.bincount(cell, minlength=T * H).astype(float).reshape(T, H)
        s = np.bincount(cell, weights=sample.y, minlength=T * H).reshape(T, H)
        pooled = n.sum(axis=0)
    empty = np.flatnonzero(pooled == 0)
    if empty.size:
        raise EmptyStratum(int(empty[0]) + 1)
    return StratumSummary(n, s)


def disaggregate(summary: StratumSummary, rng: Optional[np.random.Generator] = None) -> SurveySample:
    """Expand a summary back into unit records.

    Units are ordered by (time, stratum); within a cell the outcomes are in
    random order when ``rng`` is given, positives first otherwise.
    """
    n = np.rint(summary.n).astype(np.int64)
    s = np.rint(summary.s).astype(np.int64)
    T = summary.T
    nn, ss = (n, s) if T is not None else (n[None, :], s[None, :])
    Tn, H = nn.shape
    cell_n = nn.ravel()
    cell_s = ss.ravel()
    cell_ids = np.repeat(np.arange(Tn * H), cell_n)
    starts = np.concatenate(([0], np.cumsum(cell_n)[:-1]))
    rank = np.arange(cell_ids.size) - np.repeat(starts, cell_n)
    y = (rank < np.repeat(cell_s, cell_n)).astype(np.int64)
    if rng is not None:
        # shuffle within cells: sort by (cell, random key)
        order = np.lexsort((rng.random(y.size), cell_ids))
        y = y[order]
    stratum = cell_ids % H + 1
    t = cell_ids // H + 1 if T is not None else None
    return SurveySample(stratum, y, t)


def compute_weights(summary: StratumSummary, margins: PopulationMargins) -> StratumWeights:
    """``w_h = (N_h/N) / (n_h/n)``; per time point for 2-d inputs. Empty cells get ``inf``."""
    if summary.n.shape != margins.counts.shape:
        raise DimensionMismatch(f"summary shape {summary.n.shape} vs margins {margins.counts.shape}")
    P = margins.shares
    p = summary.p
    with np.errstate(divide="ignore"):
        w = np.where(p > 0, P / np.where(p > 0, p, 1.0), np.inf)
    return StratumWeights(w)
