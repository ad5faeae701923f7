"""Per-AP 15-minute feature aggregation, standardization, PCA, and usage statistics.

Each slot yields seven raw features: three density attributes (user count,
session count, connection duration) and four usage attributes (input/output
octets and packets).  Model training operates on standardized features
projected onto the leading principal components.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .ingest import Session

logger = logging.getLogger(__name__)

SLOT_SECONDS = 900
HOUR_SECONDS = 3600
DAY_SECONDS = 86400

FEATURE_COLUMNS = (
    "user_count",
    "session_count",
    "connection_duration",
    "input_octets",
    "output_octets",
    "input_packets",
    "output_packets",
)

PIPELINE_FORMAT_VERSION = 1
MOVING_AVERAGE_WINDOW = 10


@dataclass(frozen=True)
class SlotFeatures:
    """Raw features of one AP and one 15-minute slot."""

    ap: str
    slot_start: int
    user_count: int
    session_count: int
    connection_duration: float  # minutes
    input_octets: int
    output_octets: int
    input_packets: int
    output_packets: int

    def as_row(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_COLUMNS], dtype=float)


def _tzinfo(tz: str):
    return timezone.utc if tz == "UTC" else ZoneInfo(tz)


def slot_iso(slot_start: int, tz: str = "UTC") -> str:
    return datetime.fromtimestamp(slot_start, _tzinfo(tz)).isoformat()


def parse_slot_time(value: str) -> int:
    """Accept epoch seconds or an ISO-8601 timestamp."""
    try:
        return int(value)
    except ValueError:
        pass
    dt = datetime.fromisoformat(value)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def is_working_slot(slot_start: int, tz: str = "UTC") -> bool:
    """Weekday slot inside 08:00-18:00 local time."""
    dt = datetime.fromtimestamp(slot_start, _tzinfo(tz))
    if dt.weekday() >= 5:
        return False
    seconds = dt.hour * 3600 + dt.minute * 60 + dt.second
    return 8 * 3600 <= seconds < 18 * 3600


def _overlap_seconds(a0: int, a1: int, b0: int, b1: int) -> int:
    return max(0, min(a1, b1) - max(a0, b0))


def aggregate(
    sessions: Iterable[Session],
    ap: str,
    window: tuple[int, int],
    working_hours: bool = False,
    tz: str = "UTC",
) -> list[SlotFeatures]:
    """Aggregate sessions of one AP into per-slot feature rows.

    Every slot inside ``window`` is materialized, all-zero when nothing
    overlaps it.  Traffic counter deltas are assigned wholly to the slot
    containing the Alive/Stop event that reported them; a decreasing
    counter within a session is treated as a counter reset and the delta
    is the new absolute value.
    """
    t0, t1 = window
    if t0 % SLOT_SECONDS or t1 % SLOT_SECONDS:
        raise ValueError("window bounds must be multiples of 900 seconds")
    if t1 <= t0:
        raise ValueError("empty aggregation window")

    n_slots = (t1 - t0) // SLOT_SECONDS
    users: list[set[str]] = [set() for _ in range(n_slots)]
    sess_ids: list[set[str]] = [set() for _ in range(n_slots)]
    duration = np.zeros(n_slots)
    traffic = np.zeros((n_slots, 4))

    for s in sessions:
        if s.ap != ap:
            continue
        start, end = s.start_time, s.end_time
        if start < t1 and (end > t0 or (start == end and start >= t0)):
            first = max((start - t0) // SLOT_SECONDS, 0)
            last = min((max(end - 1, start) - t0) // SLOT_SECONDS, n_slots - 1)
            for i in range(first, last + 1):
                sl0 = t0 + i * SLOT_SECONDS
                sl1 = sl0 + SLOT_SECONDS
                ov = _overlap_seconds(start, end, sl0, sl1)
                if ov > 0 or (start == end and sl0 <= start < sl1):
                    users[i].add(s.client)
                    sess_ids[i].add(s.session_id)
                    duration[i] += ov / 60.0
        prev = (0, 0, 0, 0)
        for snap in s.counters:
            deltas = []
            for value, before in zip(snap[1:], prev):
                d = value - before
                deltas.append(value if d < 0 else d)  # reset: delta is absolute
            prev = snap[1:]
            if t0 <= snap.event_time < t1:
                traffic[(snap.event_time - t0) // SLOT_SECONDS] += deltas

    slots = []
    for i in range(n_slots):
        slot_start = t0 + i * SLOT_SECONDS
        if working_hours and not is_working_slot(slot_start, tz):
            continue
        slots.append(
            SlotFeatures(
                ap=ap,
                slot_start=slot_start,
                user_count=len(users[i]),
                session_count=len(sess_ids[i]),
                connection_duration=float(duration[i]),
                input_octets=int(traffic[i, 0]),
                output_octets=int(traffic[i, 1]),
                input_packets=int(traffic[i, 2]),
                output_packets=int(traffic[i, 3]),
            )
        )
    return slots


def feature_matrix(slots: Sequence[SlotFeatures]) -> np.ndarray:
    if not slots:
        return np.zeros((0, len(FEATURE_COLUMNS)))
    return np.stack([s.as_row() for s in slots])


def write_feature_csv(slots: Sequence[SlotFeatures], dest: str | Path | IO, tz: str = "UTC") -> None:
    def _write(fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("ap", "slot_start") + FEATURE_COLUMNS)
        for s in slots:
            writer.writerow(
                [s.ap, slot_iso(s.slot_start, tz)]
                + [
                    f"{getattr(s, name):.10g}" if name == "connection_duration" else str(getattr(s, name))
                    for name in FEATURE_COLUMNS
                ]
            )

    if hasattr(dest, "write"):
        _write(dest)
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            _write(fh)


def read_feature_csv(source: str | Path | IO) -> list[SlotFeatures]:
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = Path(source).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    expected = ("ap", "slot_start") + FEATURE_COLUMNS
    if tuple(header) != expected:
        raise ValueError("bad feature CSV header; expected: " + ",".join(expected))
    out = []
    for row in reader:
        if not row:
            continue
        out.append(
            SlotFeatures(
                ap=row[0],
                slot_start=parse_slot_time(row[1]),
                user_count=int(row[2]),
                session_count=int(row[3]),
                connection_duration=float(row[4]),
                input_octets=int(row[5]),
                output_octets=int(row[6]),
                input_packets=int(row[7]),
                output_packets=int(row[8]),
            )
        )
    return out


@dataclass
class Standardizer:
    """Column-wise zero-mean/unit-sd transform fitted on training rows."""

    source_columns: tuple[str, ...]
    columns: tuple[str, ...]
    means: np.ndarray
    sds: np.ndarray
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.sds = np.asarray(self.sds, dtype=float)


def fit_standardizer(
    matrix: np.ndarray, columns: Sequence[str] = FEATURE_COLUMNS
) -> Standardizer:
    """Fit per-column sample mean/sd; zero-variance columns are dropped."""
    X = np.atleast_2d(np.asarray(matrix, dtype=float))
    if X.shape[0] < 2:
        raise ValueError("standardizer needs at least 2 rows")
    if X.shape[1] != len(columns):
        raise ValueError("matrix width does not match column names")
    means = X.mean(axis=0)
    sds = X.std(axis=0, ddof=1)
    keep = sds > 0
    dropped = tuple(str(c) for c, k in zip(columns, keep) if not k)
    if dropped:
        logger.warning("dropping zero-variance columns: %s", ", ".join(dropped))
    return Standardizer(
        source_columns=tuple(columns),
        columns=tuple(str(c) for c, k in zip(columns, keep) if k),
        means=means[keep],
        sds=sds[keep],
        dropped=dropped,
    )


def apply_standardizer(std: Standardizer, matrix: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(matrix, dtype=float))
    if X.shape[1] != len(std.source_columns):
        raise ValueError("matrix width does not match fitted columns")
    idx = [std.source_columns.index(c) for c in std.columns]
    return (X[:, idx] - std.means) / std.sds


@dataclass
class PcaProjection:
    """Orthonormal loading matrix (columns are components, descending variance)."""

    loadings: np.ndarray  # (D, k)
    explained_variance: np.ndarray  # (k,) fractions of total variance

    def __post_init__(self):
        self.loadings = np.asarray(self.loadings, dtype=float)
        self.explained_variance = np.asarray(self.explained_variance, dtype=float)

    @property
    def k(self) -> int:
        return self.loadings.shape[1]


def fit_pca(standardized: np.ndarray, k: int = 3) -> PcaProjection:
    """Principal components from the sample covariance of standardized rows."""
    X = np.atleast_2d(np.asarray(standardized, dtype=float))
    n, d = X.shape
    if not 1 <= k <= d:
        raise ValueError(f"k={k} out of range for {d} columns")
    if n < 2:
        raise ValueError("PCA needs at least 2 rows")
    cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    # Fix component signs for reproducibility.
    for j in range(d):
        pivot = np.argmax(np.abs(vecs[:, j]))
        if vecs[pivot, j] < 0:
            vecs[:, j] = -vecs[:, j]
    total = vals.sum()
    fractions = vals / total if total > 0 else np.zeros_like(vals)
    return PcaProjection(loadings=vecs[:, :k].copy(), explained_variance=fractions[:k].copy())


def project(pca: PcaProjection, standardized: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(standardized, dtype=float))
    if X.shape[1] != pca.loadings.shape[0]:
        raise ValueError("row dimension does not match PCA loadings")
    return X @ pca.loadings


@dataclass
class FeaturePipeline:
    """Standardizer + PCA bundle; its fingerprint binds models to this exact fit."""

    standardizer: Standardizer
    pca: PcaProjection
    version: int = PIPELINE_FORMAT_VERSION

    @property
    def k(self) -> int:
        return self.pca.k

    def transform(self, raw_matrix: np.ndarray) -> np.ndarray:
        return project(self.pca, apply_standardizer(self.standardizer, raw_matrix))

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "source_columns": list(self.standardizer.source_columns),
            "columns": list(self.standardizer.columns),
            "dropped": list(self.standardizer.dropped),
            "means": self.standardizer.means.tolist(),
            "sds": self.standardizer.sds.tolist(),
            "loadings": self.pca.loadings.tolist(),
            "explained_variance": self.pca.explained_variance.tolist(),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "FeaturePipeline":
        std = Standardizer(
            source_columns=tuple(doc["source_columns"]),
            columns=tuple(doc["columns"]),
            means=np.asarray(doc["means"], dtype=float),
            sds=np.asarray(doc["sds"], dtype=float),
            dropped=tuple(doc.get("dropped", ())),
        )
        pca = PcaProjection(
            loadings=np.asarray(doc["loadings"], dtype=float),
            explained_variance=np.asarray(doc["explained_variance"], dtype=float),
        )
        return cls(standardizer=std, pca=pca, version=int(doc.get("version", 1)))

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeaturePipeline":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_pipeline(raw_matrix: np.ndarray, k: int = 3, columns: Sequence[str] = FEATURE_COLUMNS) -> FeaturePipeline:
    std = fit_standardizer(raw_matrix, columns)
    pca = fit_pca(apply_standardizer(std, raw_matrix), k=min(k, len(std.columns)))
    return FeaturePipeline(standardizer=std, pca=pca)


@dataclass
class FeatureSeries:
    """Projected feature vectors of one AP over one contiguous slot run."""

    ap: str
    slot_starts: np.ndarray
    values: np.ndarray  # (T, k)
    fingerprint: str | None = None

    def __post_init__(self):
        self.slot_starts = np.asarray(self.slot_starts, dtype=int)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.slot_starts.shape[0] != self.values.shape[0]:
            raise ValueError("slot_starts and values lengths differ")
        steps = np.diff(self.slot_starts)
        if steps.size and not np.all(steps == SLOT_SECONDS):
            raise ValueError("slot_starts must increase in 900-second steps")

    def __len__(self) -> int:
        return int(self.slot_starts.shape[0])


def build_series(slots: Sequence[SlotFeatures], pipeline: FeaturePipeline) -> FeatureSeries:
    if not slots:
        raise ValueError("cannot build a series from zero slots")
    aps = {s.ap for s in slots}
    if len(aps) != 1:
        raise ValueError(f"series must cover exactly one AP, got {sorted(aps)}")
    ordered = sorted(slots, key=lambda s: s.slot_start)
    return FeatureSeries(
        ap=ordered[0].ap,
        slot_starts=np.array([s.slot_start for s in ordered], dtype=int),
        values=pipeline.transform(feature_matrix(ordered)),
        fingerprint=pipeline.fingerprint(),
    )


def write_projection_csv(series_list: Sequence[FeatureSeries], dest: str | Path | IO, tz: str = "UTC") -> None:
    """Projected feature vectors, one CSV row per slot, k component columns."""
    k = series_list[0].values.shape[1] if series_list else 0

    def _write(fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["ap", "slot_start"] + [f"pc{j + 1}" for j in range(k)])
        for series in series_list:
            for slot_start, row in zip(series.slot_starts, series.values):
                writer.writerow(
                    [series.ap, slot_iso(int(slot_start), tz)] + [f"{v:.10g}" for v in row]
                )

    if hasattr(dest, "write"):
        _write(dest)
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            _write(fh)


def correlation_matrix(raw_matrix: np.ndarray) -> np.ndarray:
    """Pearson correlations; entries for zero-variance columns are NaN."""
    X = np.atleast_2d(np.asarray(raw_matrix, dtype=float))
    if X.shape[0] < 2:
        raise ValueError("correlation needs at least 2 rows")
    centered = X - X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    d = X.shape[1]
    corr = np.full((d, d), np.nan)
    valid = sd > 0
    Z = centered[:, valid] / sd[valid]
    block = (Z.T @ Z) / (X.shape[0] - 1)
    block = np.clip(block, -1.0, 1.0)
    idx = np.flatnonzero(valid)
    corr[np.ix_(idx, idx)] = block
    corr[idx, idx] = 1.0
    return corr


@dataclass(frozen=True)
class StatTable:
    """Plot-ready (x, y) pairs."""

    x: tuple[float, ...]
    y: tuple[float, ...]


@dataclass(frozen=True)
class UsageStatistics:
    sessions_per_user_hourly_ma: StatTable
    sessions_per_user_hourly_cdf: StatTable
    sessions_per_user_daily_ma: StatTable
    sessions_per_user_daily_cdf: StatTable
    per_ap_user_cdf: StatTable
    per_ap_daily_duration_cdf: StatTable

    def tables(self) -> dict[str, StatTable]:
        return {
            "sessions_per_user_hourly_ma": self.sessions_per_user_hourly_ma,
            "sessions_per_user_hourly_cdf": self.sessions_per_user_hourly_cdf,
            "sessions_per_user_daily_ma": self.sessions_per_user_daily_ma,
            "sessions_per_user_daily_cdf": self.sessions_per_user_daily_cdf,
            "per_ap_user_cdf": self.per_ap_user_cdf,
            "per_ap_daily_duration_cdf": self.per_ap_daily_duration_cdf,
        }


_EMPTY = StatTable((), ())


def _cdf(values: Sequence[float]) -> StatTable:
    if not values:
        return _EMPTY
    data = np.sort(np.asarray(values, dtype=float))
    xs = np.unique(data)
    ys = np.searchsorted(data, xs, side="right") / data.size
    return StatTable(tuple(float(v) for v in xs), tuple(float(v) for v in ys))


def _moving_average(xs: Sequence[float], ys: Sequence[float], window: int = MOVING_AVERAGE_WINDOW) -> StatTable:
    if not ys:
        return _EMPTY
    out = []
    for i in range(len(ys)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(ys[lo : i + 1])))
    return StatTable(tuple(float(v) for v in xs), tuple(out))


def _buckets(start: int, end: int, size: int) -> range:
    last = max(start, end - 1)
    return range(start // size, last // size + 1)


def _sessions_per_user(sessions: Sequence[Session], bucket_seconds: int) -> tuple[StatTable, StatTable]:
    per_key: dict[tuple[str, int], set[str]] = defaultdict(set)
    for s in sessions:
        for b in _buckets(s.start_time, s.end_time, bucket_seconds):
            per_key[(s.client, b)].add(s.session_id)
    if not per_key:
        return _EMPTY, _EMPTY
    counts = {key: len(ids) for key, ids in per_key.items()}
    by_bucket: dict[int, list[int]] = {}
    for (_, b), c in counts.items():
        by_bucket.setdefault(b, []).append(c)
    xs = sorted(by_bucket)
    means = [float(np.mean(by_bucket[b])) for b in xs]
    ma = _moving_average([b * bucket_seconds for b in xs], means)
    cdf = _cdf(list(counts.values()))
    return ma, cdf


def usage_statistics(sessions: Sequence[Session]) -> UsageStatistics:
    """Descriptive statistics of a trace: session churn per user and AP-level CDFs."""
    if not sessions:
        return UsageStatistics(_EMPTY, _EMPTY, _EMPTY, _EMPTY, _EMPTY, _EMPTY)

    hourly_ma, hourly_cdf = _sessions_per_user(sessions, HOUR_SECONDS)
    daily_ma, daily_cdf = _sessions_per_user(sessions, DAY_SECONDS)

    ap_day_users: dict[tuple[str, int], set[str]] = defaultdict(set)
    ap_day_user_minutes: dict[tuple[str, int, str], float] = {}
    for s in sessions:
        for day in _buckets(s.start_time, s.end_time, DAY_SECONDS):
            d0, d1 = day * DAY_SECONDS, (day + 1) * DAY_SECONDS
            ov = _overlap_seconds(s.start_time, s.end_time, d0, d1)
            if ov <= 0 and not (s.start_time == s.end_time and d0 <= s.start_time < d1):
                continue
            ap_day_users[(s.ap, day)].add(s.client)
            key = (s.ap, day, s.client)
            ap_day_user_minutes[key] = ap_day_user_minutes.get(key, 0.0) + ov / 60.0

    per_ap_users: dict[str, list[int]] = {}
    for (ap, _), clients in ap_day_users.items():
        per_ap_users.setdefault(ap, []).append(len(clients))
    user_cdf = _cdf([float(np.mean(v)) for _, v in sorted(per_ap_users.items())])

    per_ap_minutes: dict[str, list[float]] = {}
    for (ap, _, _), minutes in ap_day_user_minutes.items():
        per_ap_minutes.setdefault(ap, []).append(minutes)
    duration_cdf = _cdf([float(np.mean(v)) for _, v in sorted(per_ap_minutes.items())])

    return UsageStatistics(
        sessions_per_user_hourly_ma=hourly_ma,
        sessions_per_user_hourly_cdf=hourly_cdf,
        sessions_per_user_daily_ma=daily_ma,
        sessions_per_user_daily_cdf=daily_cdf,
        per_ap_user_cdf=user_cdf,
        per_ap_daily_duration_cdf=duration_cdf,
    )


def write_stat_table(table: StatTable, dest: str | Path | IO, x_name: str = "x", y_name: str = "y") -> None:
    def _write(fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([x_name, y_name])
        for x, y in zip(table.x, table.y):
            writer.writerow([f"{x:.10g}", f"{y:.10g}"])

    if hasattr(dest, "write"):
        _write(dest)
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            _write(fh)
