"""Synthetic single-AP RADIUS accounting testbed with labeled anomaly scenarios.

Generates full days of Start/Alive/Stop records for a small population
(regular users plus a few guests) and injects six anomaly patterns at the
trace level: AP shutdown, heavy usage by one or several users, and three
jamming variants rendered as their accounting-table signatures (mass stop
plus silence, short-session churn, churn limited to specific clients).
Every generated day carries per-slot ground-truth labels.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from datetime import date as date_cls
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ingest import AccountingRecord, write_trace

SLOT_SECONDS = 900
DAY_SECONDS = 86400

AP_SHUTDOWN = "ap_shutdown"
HEAVY_SINGLE = "heavy_usage_single"
HEAVY_MULTI = "heavy_usage_multi"
JAM_LOW = "jam_low_interval"
JAM_HIGH = "jam_high_interval"
JAM_SPECIFIC = "jam_specific_clients"

SCENARIO_KINDS = (AP_SHUTDOWN, HEAVY_SINGLE, HEAVY_MULTI, JAM_LOW, JAM_HIGH, JAM_SPECIFIC)

KIND_LABELS = {
    JAM_LOW: "Jamming Channel (Low Intervals)",
    JAM_HIGH: "Jamming Channel (High Intervals)",
    JAM_SPECIFIC: "Jamming Specific Clients",
    HEAVY_SINGLE: "Heavy Usage (Single User)",
    HEAVY_MULTI: "Heavy Usage (Multiple Users)",
    AP_SHUTDOWN: "AP Power Off",
}

LABEL_NORMAL = "normal"

_STATUS_RANK = {"Start": 0, "Alive": 1, "Stop": 2}


@dataclass(frozen=True)
class ScenarioSpec:
    """One injected anomaly: a slot-aligned start, a 15-60 minute span, parameters."""

    kind: str
    start: int
    duration_minutes: int
    params: dict = field(default_factory=dict)

    def window(self) -> tuple[int, int]:
        return self.start, self.start + self.duration_minutes * 60

    def validate(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not 15 <= self.duration_minutes <= 60:
            raise ValueError("scenario duration must lie in [15, 60] minutes")
        if self.start % SLOT_SECONDS:
            raise ValueError("scenario start must be slot-aligned (multiple of 900 s)")


@dataclass
class PopulationProfile:
    """Population and traffic shape of the simulated AP."""

    ap: str = "AP1"
    regular_users: int = 6
    guest_range: tuple[int, int] = (3, 4)
    always_on_users: int = 3  # devices that stay associated through the working window
    participation_prob: float = 0.9
    open_hour: float = 8.0
    close_hour: float = 18.0
    arrival_spread_minutes: float = 25.0
    session_minutes_median: float = 100.0
    session_minutes_sigma: float = 0.7
    reassociation_gap_seconds: float = 120.0
    alive_interval_seconds: int = 600
    input_octets_per_second: float = 2000.0
    output_octets_per_second: float = 20000.0
    traffic_sigma: float = 0.6
    mean_packet_octets: float = 900.0

    def validate(self) -> None:
        if self.alive_interval_seconds not in (600, 900):
            raise ValueError("alive interval must be 10 or 15 minutes")
        if self.regular_users < 1 or self.always_on_users < 0:
            raise ValueError("user counts must be positive")
        if self.always_on_users > self.regular_users:
            raise ValueError("always-on users cannot exceed regular users")
        g0, g1 = self.guest_range
        if g0 < 0 or g1 < g0:
            raise ValueError("bad guest range")
        if not 0.0 < self.participation_prob <= 1.0:
            raise ValueError("participation probability must lie in (0, 1]")
        for name in (
            "session_minutes_median",
            "input_octets_per_second",
            "output_octets_per_second",
            "mean_packet_octets",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.open_hour < self.close_hour <= 24:
            raise ValueError("bad working window hours")

    @property
    def max_users(self) -> int:
        return self.regular_users + self.guest_range[1]


@dataclass(frozen=True)
class GroundTruth:
    """Per-slot labels for one generated day plus the resolved scenario list."""

    labels: tuple[tuple[int, str], ...]
    scenarios: tuple[ScenarioSpec, ...] = ()

    def label_map(self) -> dict[int, str]:
        return dict(self.labels)

    def anomalous_slots(self, kind: str | None = None) -> list[int]:
        return [
            slot
            for slot, label in self.labels
            if label != LABEL_NORMAL and (kind is None or label == kind)
        ]


def _validate_scenarios(scenarios: Sequence[ScenarioSpec], day_start: int) -> None:
    ordered = sorted(scenarios, key=lambda s: s.start)
    for sc in ordered:
        sc.validate()
        w0, w1 = sc.window()
        if w0 < day_start or w1 > day_start + DAY_SECONDS:
            raise ValueError("scenario window falls outside the generated day")
    for a, b in zip(ordered, ordered[1:]):
        if b.start < a.window()[1]:
            raise ValueError(f"scenarios overlap: {a.kind} and {b.kind}")


def _session_chain(rng, user: str, arrive: float, depart: float, profile: PopulationProfile):
    out = []
    t = arrive
    while t < depart - 60:
        dur = rng.lognormal(math.log(profile.session_minutes_median * 60), profile.session_minutes_sigma)
        end = min(t + dur, depart)
        if end - t >= 60:
            out.append((user, t, end))
        t = end + rng.exponential(profile.reassociation_gap_seconds)
    return out


def _baseline_sessions(rng, profile: PopulationProfile, day_start: int):
    t_open = day_start + profile.open_hour * 3600
    t_close = day_start + profile.close_hour * 3600
    sessions = []
    for i in range(profile.regular_users):
        user = f"user{i + 1:02d}"
        if i < profile.always_on_users:
            # Stable devices: one unbroken session over the working window.
            a = t_open + rng.uniform(0, 300)
            b = t_close - rng.uniform(0, 300)
            sessions.append((user, a, b))
            continue
        if rng.random() > profile.participation_prob:
            continue
        a = t_open + abs(rng.normal(0, profile.arrival_spread_minutes * 60))
        b = t_close - abs(rng.normal(0, profile.arrival_spread_minutes * 60))
        a = min(a, t_close - 1800)
        b = max(b, a + 1800)
        b = min(b, t_close)
        sessions.extend(_session_chain(rng, user, a, b, profile))
    g0, g1 = profile.guest_range
    n_guests = int(rng.integers(g0, g1 + 1))
    for g in range(n_guests):
        user = f"guest{g + 1:02d}"
        a = rng.uniform(t_open + 3600, t_close - 2 * 3600)
        b = min(a + rng.uniform(3600, 3 * 3600), t_close)
        sessions.extend(_session_chain(rng, user, a, b, profile))
    return sessions


def _active_users(sessions, w0: float, w1: float) -> list[str]:
    return sorted({u for (u, s, e) in sessions if s < w1 and e > w0})


def _cut_window(sessions, w0: float, w1: float, rng, stop_before: bool):
    """Truncate all coverage inside [w0, w1); sessions resume shortly after w1.

    ``stop_before`` places the final Stop just before the window (AP power
    loss leaves nothing in the window); otherwise each client emits its
    one-time Stop right after the window opens.
    """
    out = []
    for user, s, e in sessions:
        if e <= w0 or s >= w1:
            out.append((user, s, e))
            continue
        if s < w0:
            stop = w0 - 1 if stop_before else w0 + rng.uniform(1, 10)
            if stop - s >= 1:
                out.append((user, s, stop))
        if e > w1:
            resume = w1 + rng.uniform(5, 120)
            if e - resume >= 60:
                out.append((user, resume, e))
    return out


def _churn_window(sessions, targets, w0: float, w1: float, interval: float, rng):
    """Replace targeted users' coverage inside the window with short-session cycling."""
    lifetime = 0.75 * interval
    gap = max(interval - lifetime, 1.0)
    out = []
    churn = []
    for user, s, e in sessions:
        if (targets is not None and user not in targets) or e <= w0 or s >= w1:
            out.append((user, s, e))
            continue
        if s < w0:
            out.append((user, s, w0 + rng.uniform(1, 5)))
        if e > w1:
            resume = w1 + rng.uniform(5, 60)
            if e - resume >= 60:
                out.append((user, resume, e))
        a, b = max(s, w0 + rng.uniform(1, gap)), min(e, w1)
        t = a
        while t < b - 5:
            end = min(t + lifetime * rng.uniform(0.7, 1.3), b)
            if end - t >= 5:
                churn.append((user, t, end))
            t = end + gap * rng.uniform(0.7, 1.3)
    return out + churn


def _resolve_scenarios(sessions, scenarios, rng):
    """Apply session surgery per scenario; return sessions, multipliers, resolved specs."""
    multipliers = []  # (user, w0, w1, factor)
    resolved = []
    for sc in scenarios:
        w0, w1 = sc.window()
        params = dict(sc.params)
        if sc.kind == AP_SHUTDOWN:
            sessions = _cut_window(sessions, w0, w1, rng, stop_before=True)
        elif sc.kind == JAM_LOW:
            sessions = _cut_window(sessions, w0, w1, rng, stop_before=False)
        elif sc.kind in (JAM_HIGH, JAM_SPECIFIC):
            interval = float(params.get("reassociation_seconds", 60.0))
            params["reassociation_seconds"] = interval
            if sc.kind == JAM_SPECIFIC:
                clients = params.get("clients")
                if not clients:
                    active = _active_users(sessions, w0, w1)
                    count = min(int(params.get("client_count", 2)), len(active))
                    clients = sorted(str(u) for u in rng.choice(active, size=count, replace=False))
                params["clients"] = list(clients)
                targets = set(clients)
            else:
                params["clients"] = _active_users(sessions, w0, w1)
                targets = None
            sessions = _churn_window(sessions, targets, w0, w1, interval, rng)
        elif sc.kind in (HEAVY_SINGLE, HEAVY_MULTI):
            factor = float(params.get("multiplier", 50.0))
            params["multiplier"] = factor
            clients = params.get("clients")
            if not clients:
                active = _active_users(sessions, w0, w1)
                count = 1 if sc.kind == HEAVY_SINGLE else min(int(params.get("client_count", 3)), len(active))
                clients = sorted(str(u) for u in rng.choice(active, size=count, replace=False))
            params["clients"] = list(clients)
            for user in clients:
                multipliers.append((user, w0, w1, factor))
        resolved.append(replace(sc, params=params))
    return sessions, multipliers, resolved


def _materialize(sessions, multipliers, profile: PopulationProfile, rng, day_tag: str):
    """Emit Start/Alive/Stop records with cumulative counters for planned sessions."""
    alive = profile.alive_interval_seconds
    log_in = math.log(profile.input_octets_per_second * alive)
    log_out = math.log(profile.output_octets_per_second * alive)
    records = []
    planned = sorted(sessions, key=lambda x: (x[1], x[2], x[0]))
    for index, (user, s, e) in enumerate(planned, start=1):
        s_i = int(round(s))
        e_i = max(int(round(e)), s_i + 1)
        sid = f"{day_tag}-{index:04d}"
        records.append(
            AccountingRecord(
                status="Start",
                session_id=sid,
                session_time=None,
                delay_time=0,
                called_station=profile.ap,
                calling_station=user,
                timestamp=s_i,
            )
        )
        report_times = []
        t = s_i + alive
        while t < e_i:
            report_times.append(t)
            t += alive
        report_times.append(e_i)

        cum = [0, 0, 0, 0]
        prev_t = s_i
        for rt in report_times:
            span = rt - prev_t
            factor = 1.0
            for m_user, w0, w1, mult in multipliers:
                if m_user == user:
                    overlap = max(0.0, min(rt, w1) - max(prev_t, w0))
                    if overlap > 0:
                        factor += (mult - 1.0) * overlap / span
            scale = factor * span / alive
            in_inc = rng.lognormal(log_in, profile.traffic_sigma) * scale
            out_inc = rng.lognormal(log_out, profile.traffic_sigma) * scale
            in_pkts = in_inc / profile.mean_packet_octets * rng.lognormal(0, 0.15)
            out_pkts = out_inc / profile.mean_packet_octets * rng.lognormal(0, 0.15)
            for pos, inc in enumerate((in_inc, out_inc, in_pkts, out_pkts)):
                cum[pos] += max(int(round(inc)), 0)
            records.append(
                AccountingRecord(
                    status="Stop" if rt == report_times[-1] else "Alive",
                    session_id=sid,
                    session_time=rt - s_i,
                    delay_time=0,
                    called_station=profile.ap,
                    calling_station=user,
                    timestamp=rt,
                    input_octets=cum[0],
                    output_octets=cum[1],
                    input_packets=cum[2],
                    output_packets=cum[3],
                )
            )
            prev_t = rt
    records.sort(key=lambda r: (r.event_time, r.session_id, _STATUS_RANK[r.status]))
    return records


def generate_day(
    profile: PopulationProfile,
    scenarios: Sequence[ScenarioSpec],
    seed: int,
    day_start: int = 0,
) -> tuple[list[AccountingRecord], GroundTruth]:
    """Generate one labeled day of accounting records; deterministic per seed."""
    profile.validate()
    if day_start % SLOT_SECONDS:
        raise ValueError("day_start must be slot-aligned")
    ordered = sorted(scenarios, key=lambda s: s.start)
    _validate_scenarios(ordered, day_start)

    rng = np.random.default_rng(seed)
    sessions = _baseline_sessions(rng, profile, day_start)
    sessions, multipliers, resolved = _resolve_scenarios(sessions, ordered, rng)
    day_tag = f"S{day_start // DAY_SECONDS % 100000:05d}"
    records = _materialize(sessions, multipliers, profile, rng, day_tag)

    labels = []
    for slot in range(day_start, day_start + DAY_SECONDS, SLOT_SECONDS):
        label = LABEL_NORMAL
        for sc in resolved:
            w0, w1 = sc.window()
            if slot < w1 and slot + SLOT_SECONDS > w0:
                label = sc.kind
                break
        labels.append((slot, label))
    return records, GroundTruth(labels=tuple(labels), scenarios=tuple(resolved))


@dataclass
class CorpusDay:
    name: str
    file: str
    date: str
    day_start: int
    abnormal: bool
    scenarios: tuple[ScenarioSpec, ...]
    labels: tuple[tuple[int, str], ...]

    def label_map(self) -> dict[int, str]:
        return dict(self.labels)


@dataclass
class CorpusManifest:
    seed: int
    ap: str
    profile: dict
    days: list[CorpusDay]
    per_kind_slot_totals: dict[str, int]

    def normal_days(self) -> list[CorpusDay]:
        return [d for d in self.days if not d.abnormal]

    def abnormal_days(self) -> list[CorpusDay]:
        return [d for d in self.days if d.abnormal]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "ap": self.ap,
            "profile": self.profile,
            "per_kind_slot_totals": dict(sorted(self.per_kind_slot_totals.items())),
            "days": [
                {
                    "name": d.name,
                    "file": d.file,
                    "date": d.date,
                    "day_start": d.day_start,
                    "abnormal": d.abnormal,
                    "scenarios": [
                        {
                            "kind": sc.kind,
                            "start": sc.start,
                            "duration_minutes": sc.duration_minutes,
                            "params": sc.params,
                        }
                        for sc in d.scenarios
                    ],
                    "labels": [[slot, label] for slot, label in d.labels],
                }
                for d in self.days
            ],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "CorpusManifest":
        days = [
            CorpusDay(
                name=entry["name"],
                file=entry["file"],
                date=entry["date"],
                day_start=int(entry["day_start"]),
                abnormal=bool(entry["abnormal"]),
                scenarios=tuple(
                    ScenarioSpec(
                        kind=sc["kind"],
                        start=int(sc["start"]),
                        duration_minutes=int(sc["duration_minutes"]),
                        params=dict(sc.get("params", {})),
                    )
                    for sc in entry["scenarios"]
                ),
                labels=tuple((int(slot), label) for slot, label in entry["labels"]),
            )
            for entry in doc["days"]
        ]
        return cls(
            seed=int(doc["seed"]),
            ap=doc["ap"],
            profile=dict(doc.get("profile", {})),
            days=days,
            per_kind_slot_totals={k: int(v) for k, v in doc.get("per_kind_slot_totals", {}).items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _working_dates(start_date: str, count: int) -> list[date_cls]:
    day = date_cls.fromisoformat(start_date)
    out = []
    while len(out) < count:
        if day.weekday() < 5:
            out.append(day)
        day += timedelta(days=1)
    return out


def _place_scenarios(kinds: Sequence[str], rng, day_start: int) -> list[ScenarioSpec]:
    # Anomalies land well inside the working window so normal activity
    # surrounds them on both sides.
    first = day_start + int(9.5 * 3600)
    last = day_start + 16 * 3600
    candidates = list(range(first, last + 1, SLOT_SECONDS))
    placed: list[ScenarioSpec] = []
    for kind in kinds:
        for _ in range(200):
            start = int(rng.choice(candidates))
            duration = int(rng.choice((15, 30, 45, 60)))
            end = start + duration * 60
            if end > day_start + int(16.5 * 3600):
                continue
            if any(start < sc.window()[1] and end > sc.window()[0] for sc in placed):
                continue
            placed.append(ScenarioSpec(kind=kind, start=start, duration_minutes=duration))
            break
        else:
            raise RuntimeError("could not place scenario without overlap")
    return sorted(placed, key=lambda sc: sc.start)


def generate_corpus(
    profile: PopulationProfile,
    out_dir: str | Path,
    n_normal: int = 20,
    n_abnormal: int = 10,
    anomalies_per_abnormal_day: int = 2,
    seed: int = 0,
    start_date: str = "2015-11-02",
) -> CorpusManifest:
    """Write a labeled corpus of day traces plus a manifest; deterministic per seed."""
    if n_normal < 1 or n_abnormal < 1 or anomalies_per_abnormal_day < 1:
        raise ValueError("corpus counts must be at least 1")
    profile.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    total = n_normal + n_abnormal
    flags = np.array([False] * n_normal + [True] * n_abnormal)
    flags = flags[rng.permutation(total)]
    dates = _working_dates(start_date, total)
    day_seeds = rng.integers(0, 2**63, size=total)

    # Every kind appears at least once across the corpus.
    n_slots_needed = n_abnormal * anomalies_per_abnormal_day
    pool = list(SCENARIO_KINDS)[: n_slots_needed]
    while len(pool) < n_slots_needed:
        pool.append(str(rng.choice(SCENARIO_KINDS)))
    pool = [pool[i] for i in rng.permutation(len(pool))]

    days: list[CorpusDay] = []
    kind_totals: Counter = Counter()
    pool_index = 0
    for i in range(total):
        day_start = int(
            datetime(dates[i].year, dates[i].month, dates[i].day, tzinfo=timezone.utc).timestamp()
        )
        scenarios: list[ScenarioSpec] = []
        if flags[i]:
            kinds = pool[pool_index : pool_index + anomalies_per_abnormal_day]
            pool_index += anomalies_per_abnormal_day
            scenarios = _place_scenarios(kinds, rng, day_start)
        records, truth = generate_day(profile, scenarios, seed=int(day_seeds[i]), day_start=day_start)
        name = f"day_{i:03d}"
        write_trace(records, out / f"{name}.csv")
        for _, label in truth.labels:
            if label != LABEL_NORMAL:
                kind_totals[label] += 1
        days.append(
            CorpusDay(
                name=name,
                file=f"{name}.csv",
                date=dates[i].isoformat(),
                day_start=day_start,
                abnormal=bool(flags[i]),
                scenarios=truth.scenarios,
                labels=truth.labels,
            )
        )

    manifest = CorpusManifest(
        seed=seed,
        ap=profile.ap,
        profile=json.loads(json.dumps(asdict(profile))),  # tuples become lists
        days=days,
        per_kind_slot_totals=dict(kind_totals),
    )
    manifest.save(out / "manifest.json")
    return manifest
