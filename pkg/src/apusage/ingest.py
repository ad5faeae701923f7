"""RADIUS accounting trace parsing and per-user session reconstruction.

Traces are line-oriented CSV files with one row per accounting event
(Start / Alive / Stop).  Parsing is forgiving: malformed rows are reported
as issues instead of aborting, and sessionization copes with duplicate,
missing, and out-of-order lifecycle records.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, NamedTuple

TRACE_COLUMNS = (
    "status",
    "session_id",
    "session_time",
    "delay_time",
    "called_station",
    "calling_station",
    "timestamp",
    "input_octets",
    "output_octets",
    "input_packets",
    "output_packets",
)

STATUS_VALUES = ("Start", "Alive", "Stop")
_STATUS_RANK = {"Start": 0, "Alive": 1, "Stop": 2}

_INT_FIELDS = (
    "session_time",
    "delay_time",
    "timestamp",
    "input_octets",
    "output_octets",
    "input_packets",
    "output_packets",
)
_COUNTER_FIELDS = ("input_octets", "output_octets", "input_packets", "output_packets")


@dataclass(frozen=True)
class AccountingRecord:
    """One parsed accounting row."""

    status: str
    session_id: str
    session_time: int | None
    delay_time: int
    called_station: str
    calling_station: str
    timestamp: int
    input_octets: int | None = None
    output_octets: int | None = None
    input_packets: int | None = None
    output_packets: int | None = None

    @property
    def event_time(self) -> int:
        # Event time backs out the reporting delay; clamped so corrupt
        # clocks cannot produce negative time.
        return max(self.timestamp - self.delay_time, 0)


@dataclass(frozen=True)
class ParseIssue:
    line: int
    reason: str


@dataclass(frozen=True)
class SessionIssue:
    session_id: str
    reason: str


class CounterSnapshot(NamedTuple):
    event_time: int
    input_octets: int
    output_octets: int
    input_packets: int
    output_packets: int


@dataclass(frozen=True)
class Session:
    """One client association with one AP, bounded by Start/Stop events.

    ``counters`` holds the cumulative traffic snapshots reported by
    Alive/Stop records, ordered by event time.  Snapshots are cumulative
    per RADIUS semantics; per-slot deltas are computed downstream.
    """

    session_id: str
    client: str
    ap: str
    start_time: int
    end_time: int
    open: bool
    counters: tuple[CounterSnapshot, ...]

    @property
    def duration(self) -> int:
        return self.end_time - self.start_time

    def final_counters(self) -> CounterSnapshot | None:
        return self.counters[-1] if self.counters else None


def _parse_int(value: str, field: str) -> int | None:
    if value == "":
        return None
    try:
        parsed = int(value)
    except ValueError:
        raise ValueError(f"invalid integer in {field}: {value!r}") from None
    return parsed


def _parse_row(row: list[str], line: int) -> AccountingRecord:
    if len(row) != len(TRACE_COLUMNS):
        raise ValueError(f"expected {len(TRACE_COLUMNS)} fields, got {len(row)}")
    fields = dict(zip(TRACE_COLUMNS, (v.strip() for v in row)))
    status = fields["status"]
    if status not in STATUS_VALUES:
        raise ValueError(f"unknown status {status!r}")
    for name in ("session_id", "called_station", "calling_station"):
        if not fields[name]:
            raise ValueError(f"missing {name}")
    ints = {name: _parse_int(fields[name], name) for name in _INT_FIELDS}
    if ints["timestamp"] is None:
        raise ValueError("missing timestamp")
    for name, value in ints.items():
        if value is not None and value < 0:
            raise ValueError(f"negative {name}: {value}")
    if status == "Start":
        for name in _COUNTER_FIELDS + ("session_time",):
            if ints[name]:
                raise ValueError(f"nonzero {name} on Start record")
    return AccountingRecord(
        status=status,
        session_id=fields["session_id"],
        session_time=ints["session_time"],
        delay_time=ints["delay_time"] or 0,
        called_station=fields["called_station"],
        calling_station=fields["calling_station"],
        timestamp=ints["timestamp"],
        input_octets=ints["input_octets"],
        output_octets=ints["output_octets"],
        input_packets=ints["input_packets"],
        output_packets=ints["output_packets"],
    )


def parse_trace(
    source: str | Path | IO, fmt: str = "csv"
) -> tuple[list[AccountingRecord], list[ParseIssue]]:
    """Parse a trace into accounting records plus per-line issues.

    ``source`` may be a path or a readable text/binary stream.  An
    unreadable source or a missing header is fatal; malformed data rows
    only produce :class:`ParseIssue` entries.
    """
    if fmt != "csv":
        raise ValueError(f"unsupported trace format: {fmt!r}")
    if hasattr(source, "read"):
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    else:
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ValueError(f"cannot read trace {path}: {exc}") from exc

    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("empty trace: header row required") from None
    if tuple(h.strip() for h in header) != TRACE_COLUMNS:
        raise ValueError(
            "bad trace header; expected: " + ",".join(TRACE_COLUMNS)
        )

    records: list[AccountingRecord] = []
    issues: list[ParseIssue] = []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            records.append(_parse_row(row, line))
        except ValueError as exc:
            issues.append(ParseIssue(line=line, reason=str(exc)))
    return records, issues


def _record_to_row(record: AccountingRecord) -> list[str]:
    def fmt(value: int | None) -> str:
        return "" if value is None else str(value)

    return [
        record.status,
        record.session_id,
        fmt(record.session_time),
        str(record.delay_time),
        record.called_station,
        record.calling_station,
        str(record.timestamp),
        fmt(record.input_octets),
        fmt(record.output_octets),
        fmt(record.input_packets),
        fmt(record.output_packets),
    ]


def write_trace(records: Iterable[AccountingRecord], dest: str | Path | IO) -> None:
    """Serialize records back to the trace CSV format (round-trip safe)."""

    def _write(fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for record in records:
            writer.writerow(_record_to_row(record))

    if hasattr(dest, "write"):
        _write(dest)
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            _write(fh)


def _canonical_key(r: AccountingRecord):
    return (
        r.session_id,
        r.event_time,
        _STATUS_RANK[r.status],
        r.timestamp,
        -1 if r.session_time is None else r.session_time,
        -1 if r.input_octets is None else r.input_octets,
        -1 if r.output_octets is None else r.output_octets,
        -1 if r.input_packets is None else r.input_packets,
        -1 if r.output_packets is None else r.output_packets,
    )


def sessionize(
    records: Iterable[AccountingRecord],
) -> tuple[list[Session], list[SessionIssue]]:
    """Group records by session id and reconstruct bounded sessions.

    Input order does not matter; the result is identical for any
    permutation of the same records.  Exact duplicates (same session id,
    status, and timestamp) are dropped with an issue.  Sessions lacking a
    Start get a synthesized start at their first observed event; sessions
    lacking a Stop are closed at their last observed event and marked
    ``open``.
    """
    ordered = sorted(records, key=_canonical_key)
    issues: list[SessionIssue] = []

    seen: set[tuple[str, str, int]] = set()
    kept: list[AccountingRecord] = []
    for record in ordered:
        key = (record.session_id, record.status, record.timestamp)
        if key in seen:
            issues.append(SessionIssue(record.session_id, "duplicate record"))
            continue
        seen.add(key)
        kept.append(record)

    groups: dict[str, list[AccountingRecord]] = defaultdict(list)
    for record in kept:
        groups[record.session_id].append(record)

    sessions: list[Session] = []
    for sid in sorted(groups):
        rs = groups[sid]
        starts = [r for r in rs if r.status == "Start"]
        stops = [r for r in rs if r.status == "Stop"]
        if len(starts) > 1:
            issues.append(SessionIssue(sid, "multiple Start records; keeping earliest"))
        if len(stops) > 1:
            issues.append(SessionIssue(sid, "multiple Stop records; keeping earliest"))
        start_rec = starts[0] if starts else None
        stop_rec = stops[0] if stops else None
        dropped = set(id(r) for r in starts[1:]) | set(id(r) for r in stops[1:])
        live = [r for r in rs if id(r) not in dropped]
        events = [r.event_time for r in live]

        if start_rec is None:
            issues.append(SessionIssue(sid, "no Start record; start synthesized"))
            start_time = min(events)
        else:
            start_time = start_rec.event_time
        if stop_rec is None:
            end_time = max(events)
            is_open = True
        else:
            end_time = stop_rec.event_time
            is_open = False

        if end_time < start_time:
            issues.append(SessionIssue(sid, "Stop precedes Start; using observed bounds"))
            start_time, end_time = min(events), max(events)
        elif min(events) < start_time or max(events) > end_time:
            issues.append(SessionIssue(sid, "records outside Start/Stop bounds"))
            start_time = min(start_time, min(events))
            end_time = max(end_time, max(events))

        snaps = []
        for r in live:
            if r.status == "Start":
                continue
            if all(getattr(r, f) is None for f in _COUNTER_FIELDS):
                continue
            snaps.append(
                CounterSnapshot(
                    r.event_time,
                    r.input_octets or 0,
                    r.output_octets or 0,
                    r.input_packets or 0,
                    r.output_packets or 0,
                )
            )
        snaps.sort(key=lambda s: s.event_time)

        anchor = start_rec if start_rec is not None else live[0]
        sessions.append(
            Session(
                session_id=sid,
                client=anchor.calling_station,
                ap=anchor.called_station,
                start_time=start_time,
                end_time=end_time,
                open=is_open,
                counters=tuple(snaps),
            )
        )

    sessions.sort(key=lambda s: (s.start_time, s.session_id))
    return sessions, issues
