"""
EV recharge-event data: ingestion, cleaning, encoding and partitioning.

Pipeline:
    CSV export(s) or synthetic generator
      -> RawEvent list (cleaned, deduplicated, region attached)
        -> FeatureSpace (global vocabulary + min/max, built once)
          -> ClientDataset per region (one-hot + scaled numeric features)

The FeatureSpace is always computed over the whole federation before
partitioning, so every client trains in the same feature space and
aggregation is meaningful.

Feature layout (each categorical group sorted lexicographically, groups with
no observed value are omitted):
    duration_minutes, end_soc_pct, start_soc_pct      min-max scaled to [0, 1]
    connector=...
    day_of_week=...
    is_weekend
    period_of_day=...      night [0,6) morning [6,12) afternoon [12,18) evening [18,24)
    region=...             1/R for the event's region (R = number of regions), else 0
    station_level=...      only when the station map carries levels
Target: total_kwh.
"""

import logging
import re
from collections import Counter
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import EmptyInput, MalformedHeader, StationConflict, UnknownRegion

logger = logging.getLogger(__name__)


# ── Column layout of the recharge-event export ─────────────────

COL_ID = "Connection ID"
COL_START = "Recharge Start Time (local)"
COL_END = "Recharge End Time (local)"
COL_DURATION = "Recharge duration (hours:minutes)"
COL_CONNECTOR = "Connector used"
COL_START_SOC = "Start State of charge (%)"
COL_END_SOC = "End State of charge (%)"
COL_KWH = "Total kWh"
COL_STATION = "Station"
COL_REGION = "Region"

MANDATORY_COLUMNS = (
    COL_ID, COL_START, COL_END, COL_CONNECTOR,
    COL_START_SOC, COL_END_SOC, COL_KWH, COL_STATION,
)

TIME_FORMATS = ("%m/%d/%Y %H:%M", "%m/%d/%Y %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%d %H:%M:%S")
CSV_TIME_FORMAT = "%m/%d/%Y %H:%M"

DAYS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")
NUMERIC_FEATURES = ("duration_minutes", "end_soc_pct", "start_soc_pct")

_ARTEFACT_RE = re.compile(r'^=?"(.*)"$')
_ZERO_ONLY_RE = re.compile(r"^0+$")


# ── Records ────────────────────────────────────────────────────

class RawEvent(BaseModel):
    """One cleaned recharge event."""
    model_config = ConfigDict(frozen=True)

    connection_id: str = Field(min_length=1)
    start_time: datetime
    end_time: datetime
    duration_minutes: int = Field(ge=0)
    connector: str = Field(min_length=1)
    start_soc_pct: int = Field(ge=0, le=100)
    end_soc_pct: int = Field(ge=0, le=100)
    total_kwh: float = Field(ge=0.0, allow_inf_nan=False)
    station: str = Field(min_length=1)
    region: str = ""
    station_level: str = ""

    @model_validator(mode="after")
    def _ordered_times(self) -> "RawEvent":
        if self.end_time < self.start_time:
            raise ValueError("end_time precedes start_time")
        return self


class CleaningReport(BaseModel):
    """Counts of rows dropped during ingestion, by reason (zero counts omitted)."""
    rows_read: int = 0
    rows_kept: int = 0
    dropped: Dict[str, int] = Field(default_factory=dict)

    def count(self, reason: str) -> None:
        self.dropped[reason] = self.dropped.get(reason, 0) + 1

    def merge(self, other: "CleaningReport") -> "CleaningReport":
        merged = Counter(self.dropped)
        merged.update(other.dropped)
        return CleaningReport(
            rows_read=self.rows_read + other.rows_read,
            rows_kept=self.rows_kept + other.rows_kept,
            dropped=dict(merged),
        )

    @property
    def total_dropped(self) -> int:
        return sum(self.dropped.values())


class StationInfo(NamedTuple):
    region: str
    level: str = ""


class ClientDataset(BaseModel):
    """Encoded rows for one client (or the evaluation split)."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    features: np.ndarray
    targets: np.ndarray
    feature_names: List[str]
    region: str = ""

    @model_validator(mode="after")
    def _shapes(self) -> "ClientDataset":
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if self.targets.ndim != 1 or self.targets.shape[0] != self.features.shape[0]:
            raise ValueError("targets must be 1-D with one value per feature row")
        if self.features.shape[1] != len(self.feature_names):
            raise ValueError("feature_names must name every feature column")
        return self

    @property
    def row_count(self) -> int:
        return int(self.targets.shape[0])

    @property
    def feature_count(self) -> int:
        return len(self.feature_names)


# ── Calendar helpers ───────────────────────────────────────────

def day_of_week(ts: datetime) -> str:
    return DAYS[ts.weekday()]


def period_of_day(ts: datetime) -> str:
    if ts.hour < 6:
        return "night"
    if ts.hour < 12:
        return "morning"
    if ts.hour < 18:
        return "afternoon"
    return "evening"


# ── Feature space ──────────────────────────────────────────────

class FeatureSpace(BaseModel):
    """Vocabulary and scaling shared by every client of a federation."""
    model_config = ConfigDict(frozen=True)

    connectors: List[str]
    days: List[str]
    weekend: bool
    periods: List[str]
    regions: List[str]
    levels: List[str]
    ranges: Dict[str, Tuple[float, float]]

    @property
    def feature_names(self) -> List[str]:
        names = list(NUMERIC_FEATURES)
        names += [f"connector={c}" for c in self.connectors]
        names += [f"day_of_week={d}" for d in self.days]
        if self.weekend:
            names.append("is_weekend")
        names += [f"period_of_day={p}" for p in self.periods]
        names += [f"region={r}" for r in self.regions]
        names += [f"station_level={lv}" for lv in self.levels]
        return names

    @property
    def region_weight(self) -> float:
        """
        Value of the active region column: 1/R.

        Kept small next to the bias, which a region column duplicates inside a client.
        """
        return 1.0 / len(self.regions) if self.regions else 0.0


def _numeric_values(event: RawEvent) -> Dict[str, float]:
    return {
        "duration_minutes": float(event.duration_minutes),
        "end_soc_pct": float(event.end_soc_pct),
        "start_soc_pct": float(event.start_soc_pct),
    }


def build_feature_space(events: Sequence[RawEvent]) -> FeatureSpace:
    """Observed vocabularies and global min/max over all events."""
    if not events:
        raise EmptyInput("Cannot build a feature space from zero events")

    days = sorted({day_of_week(e.start_time) for e in events})
    ranges = {}
    for name in NUMERIC_FEATURES:
        values = [_numeric_values(e)[name] for e in events]
        ranges[name] = (min(values), max(values))

    return FeatureSpace(
        connectors=sorted({e.connector for e in events}),
        days=days,
        weekend=any(d in ("saturday", "sunday") for d in days),
        periods=sorted({period_of_day(e.start_time) for e in events}),
        regions=sorted({e.region for e in events if e.region}),
        levels=sorted({e.station_level for e in events if e.station_level}),
        ranges=ranges,
    )


def _scale(value: float, bounds: Tuple[float, float]) -> float:
    low, high = bounds
    if high <= low:
        return 0.0
    return (value - low) / (high - low)


def _encode_row(event: RawEvent, space: FeatureSpace, index: Dict[str, int]) -> np.ndarray:
    row = np.zeros(len(index), dtype=np.float64)
    for name, value in _numeric_values(event).items():
        row[index[name]] = _scale(value, space.ranges[name])

    day = day_of_week(event.start_time)
    for key in (
        f"connector={event.connector}",
        f"day_of_week={day}",
        f"period_of_day={period_of_day(event.start_time)}",
        f"station_level={event.station_level}",
    ):
        if key in index:
            row[index[key]] = 1.0
    region_key = f"region={event.region}"
    if region_key in index:
        row[index[region_key]] = space.region_weight
    if space.weekend and day in ("saturday", "sunday"):
        row[index["is_weekend"]] = 1.0
    return row


def encode(
    events: Sequence[RawEvent],
    space: Optional[FeatureSpace] = None,
    region: str = "",
) -> ClientDataset:
    """
    One-hot encode events into a feature matrix with total_kwh targets.

    Args:
        events: Events to encode (row order is preserved)
        space: Shared feature space; built from `events` when omitted
        region: Label stored on the resulting dataset
    """
    if not events:
        raise EmptyInput("encode needs at least one event")
    space = space or build_feature_space(events)
    names = space.feature_names
    index = {name: i for i, name in enumerate(names)}

    features = np.vstack([_encode_row(e, space, index) for e in events])
    targets = np.array([e.total_kwh for e in events], dtype=np.float64)
    features.setflags(write=False)
    targets.setflags(write=False)
    return ClientDataset(features=features, targets=targets, feature_names=names, region=region)


def partition_by_region(
    events: Sequence[RawEvent],
    regions: Sequence[str],
    space: Optional[FeatureSpace] = None,
) -> Dict[str, ClientDataset]:
    """
    Split events into one dataset per region, all sharing one feature space.

    Regions without events are absent from the result.
    """
    if not regions:
        raise EmptyInput("partition_by_region needs at least one region")
    known = set(regions)
    unknown = [e.station for e in events if e.region not in known]
    if unknown:
        raise UnknownRegion(unknown)
    if not events:
        return {}

    space = space or build_feature_space(events)
    grouped: Dict[str, List[RawEvent]] = {}
    for event in events:
        grouped.setdefault(event.region, []).append(event)

    partitions = {
        region: encode(grouped[region], space, region=region)
        for region in sorted(grouped)
    }
    logger.info(
        "Partitioned %d events into %d region(s): %s",
        len(events), len(partitions),
        ", ".join(f"{r}={d.row_count}" for r, d in partitions.items()),
    )
    return partitions


def _pick_holdout(indices: Sequence[int], fraction: float, seed: int) -> List[int]:
    n = len(indices)
    if n < 2:
        return []
    k = min(n - 1, max(1, int(round(n * fraction))))
    return [indices[j] for j in np.random.default_rng(seed).permutation(n)[:k]]


def split_holdout(
    events: Sequence[RawEvent], fraction: float, seed: int
) -> Tuple[List[RawEvent], List[RawEvent]]:
    """
    Seeded (train, holdout) split, stratified by region; both keep the input order.

    Every region draws its holdout positions from the same seed, so regions of
    equal size lose the same positions and every client keeps the same share
    of rows. Falls back to one unstratified draw when no region has two events.
    """
    n = len(events)
    if n < 2:
        raise EmptyInput("Need at least two events to carve out a holdout split")

    by_region: Dict[str, List[int]] = {}
    for i, e in enumerate(events):
        by_region.setdefault(e.region, []).append(i)
    picked = set()
    for indices in by_region.values():
        picked.update(_pick_holdout(indices, fraction, seed))
    if not picked:
        picked = set(_pick_holdout(list(range(n)), fraction, seed))

    train = [e for i, e in enumerate(events) if i not in picked]
    holdout = [e for i, e in enumerate(events) if i in picked]
    return train, holdout


# ── CSV ingestion ──────────────────────────────────────────────

def load_schema_map(path: str) -> Dict[str, str]:
    """
    Read a key=value header mapping: `<standard column>=<header in the file>`.

    Blank lines and lines starting with # are ignored.
    """
    mapping = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedHeader(f"Schema mapping line has no '=': {line!r}")
        canonical, header = (part.strip() for part in line.split("=", 1))
        mapping[canonical] = header
    return mapping


def load_station_map(path: str) -> Dict[str, StationInfo]:
    """
    Read station,region[,level] rows.

    A station may repeat only with identical values.

    Raises:
        StationConflict: a station is listed with two different regions or levels
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    frame.columns = [c.strip().lower() for c in frame.columns]
    if not {"station", "region"} <= set(frame.columns):
        raise MalformedHeader(f"{path} must have 'station' and 'region' columns")
    has_level = "level" in frame.columns

    stations: Dict[str, StationInfo] = {}
    conflicts = []
    for row in frame.to_dict(orient="records"):
        station = row["station"].strip()
        info = StationInfo(
            region=row["region"].strip(),
            level=row["level"].strip() if has_level else "",
        )
        if stations.setdefault(station, info) != info:
            conflicts.append(station)
    if conflicts:
        raise StationConflict(conflicts)
    return stations


def _clean(value: str) -> str:
    """Strip spreadsheet artefacts such as ="" wrappers and stray quotes."""
    value = value.strip()
    match = _ARTEFACT_RE.match(value)
    if match:
        value = match.group(1)
    return value.strip().strip('"').strip()


def _parse_time(value: str) -> datetime:
    for fmt in TIME_FORMATS:
        try:
            return datetime.strptime(value, fmt)
        except ValueError:
            continue
    return datetime.fromisoformat(value)


def _parse_duration(value: str) -> int:
    hours, minutes = value.split(":")[:2]
    return int(hours) * 60 + int(minutes)


def _parse_int(value: str) -> int:
    number = float(value)
    if not number.is_integer():
        raise ValueError(f"not an integer: {value!r}")
    return int(number)


class _Drop(Exception):
    def __init__(self, reason: str):
        self.reason = reason


def _row_to_event(
    row: Dict[str, str],
    station_map: Optional[Dict[str, StationInfo]],
) -> RawEvent:
    values = {col: _clean(row.get(col, "")) for col in row}

    for col in (COL_ID, COL_CONNECTOR, COL_STATION):
        if not values[col] or _ZERO_ONLY_RE.match(values[col]):
            raise _Drop("missing_field")
    for col in (COL_START, COL_END, COL_START_SOC, COL_END_SOC, COL_KWH):
        if not values[col]:
            raise _Drop("missing_field")

    try:
        start = _parse_time(values[COL_START])
        end = _parse_time(values[COL_END])
        start_soc = _parse_int(values[COL_START_SOC])
        end_soc = _parse_int(values[COL_END_SOC])
        kwh = float(values[COL_KWH])
        if values.get(COL_DURATION):
            duration = _parse_duration(values[COL_DURATION])
        else:
            duration = int((end - start).total_seconds() // 60)
        reversed_times = end < start
    except (ValueError, TypeError):
        raise _Drop("malformed")

    if reversed_times:
        raise _Drop("invalid_time")
    if not (0 <= start_soc <= 100 and 0 <= end_soc <= 100):
        raise _Drop("invalid_soc")
    if not np.isfinite(kwh) or kwh < 0 or duration < 0:
        raise _Drop("invalid_energy")

    station = values[COL_STATION]
    region = values.get(COL_REGION, "")
    level = ""
    if station_map is not None and station in station_map:
        region, level = station_map[station]

    return RawEvent(
        connection_id=values[COL_ID],
        start_time=start,
        end_time=end,
        duration_minutes=duration,
        connector=values[COL_CONNECTOR],
        start_soc_pct=start_soc,
        end_soc_pct=end_soc,
        total_kwh=kwh,
        station=station,
        region=region,
        station_level=level,
    )


def load_csv(
    path: str,
    schema: Optional[Dict[str, str]] = None,
    station_map: Optional[Dict[str, StationInfo]] = None,
    seen_ids: Optional[set] = None,
) -> Tuple[List[RawEvent], CleaningReport]:
    """
    Parse one recharge-event export, dropping (and counting) bad rows.

    Args:
        path: UTF-8 CSV with a header row
        schema: Optional {standard column: header used in this file}
        station_map: Optional station -> (region, level); wins over a Region column
        seen_ids: Connection ids already loaded (for cross-file dedup); updated in place

    Returns:
        (events, cleaning report)
    """
    if not Path(path).exists():
        raise FileNotFoundError(f"No such CSV file: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise MalformedHeader(f"{path} has no header row") from e

    frame.columns = [str(c).strip() for c in frame.columns]
    if schema:
        frame = frame.rename(columns={header: canonical for canonical, header in schema.items()})
    missing = [c for c in MANDATORY_COLUMNS if c not in frame.columns]
    if missing:
        raise MalformedHeader(f"{path} is missing column(s): {', '.join(missing)}")

    report = CleaningReport(rows_read=len(frame))
    seen = seen_ids if seen_ids is not None else set()
    events: List[RawEvent] = []

    for row in frame.to_dict(orient="records"):
        try:
            event = _row_to_event(row, station_map)
        except _Drop as drop:
            report.count(drop.reason)
            continue
        if event.connection_id in seen:
            report.count("duplicates")
            continue
        seen.add(event.connection_id)
        events.append(event)

    report.rows_kept = len(events)
    if report.total_dropped:
        logger.warning("Dropped %d of %d rows from %s: %s",
                       report.total_dropped, report.rows_read, path, report.dropped)
    logger.info("Loaded %d events from %s", len(events), path)
    return events, report


def load_csvs(
    paths: Iterable[str],
    schema: Optional[Dict[str, str]] = None,
    station_map: Optional[Dict[str, StationInfo]] = None,
) -> Tuple[List[RawEvent], CleaningReport]:
    """Consolidate several exports; a connection id is kept once across files."""
    seen: set = set()
    events: List[RawEvent] = []
    report = CleaningReport()
    for path in paths:
        batch, batch_report = load_csv(path, schema, station_map, seen_ids=seen)
        events.extend(batch)
        report = report.merge(batch_report)
    return events, report


def write_csv(events: Sequence[RawEvent], path: str) -> None:
    """Write events in the export layout load_csv reads back."""
    rows = [
        {
            COL_ID: e.connection_id,
            COL_START: e.start_time.strftime(CSV_TIME_FORMAT),
            COL_END: e.end_time.strftime(CSV_TIME_FORMAT),
            COL_DURATION: f"{e.duration_minutes // 60}:{e.duration_minutes % 60:02d}",
            COL_CONNECTOR: e.connector,
            COL_START_SOC: str(e.start_soc_pct),
            COL_END_SOC: str(e.end_soc_pct),
            COL_KWH: repr(e.total_kwh),
            COL_STATION: e.station,
        }
        for e in events
    ]
    columns = [COL_ID, COL_START, COL_END, COL_DURATION, COL_CONNECTOR,
               COL_START_SOC, COL_END_SOC, COL_KWH, COL_STATION]
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, lineterminator="\n")


def write_station_map(events: Sequence[RawEvent], path: str) -> None:
    stations = sorted({(e.station, e.region, e.station_level) for e in events})
    pd.DataFrame(stations, columns=["station", "region", "level"]).to_csv(
        path, index=False, lineterminator="\n"
    )


# ── Synthetic generator ────────────────────────────────────────

class SyntheticTruth(NamedTuple):
    """Ground-truth linear model behind generate_synthetic."""
    base_kwh: float = 20.0
    kwh_per_minute: float = 0.002
    kwh_per_soc_pct: float = 0.01
    region_step: float = 0.001

    def region_offset(self, index: int, regions: int) -> float:
        return self.region_step * (index - (regions - 1) / 2.0)

    def energy(self, duration: int, start_soc: int, end_soc: int, index: int, regions: int) -> float:
        return (
            self.base_kwh
            + self.kwh_per_minute * duration
            + self.kwh_per_soc_pct * (end_soc - start_soc)
            + self.region_offset(index, regions)
        )


GROUND_TRUTH = SyntheticTruth()
SYNTHETIC_CONNECTORS = ("CHAdeMO", "J1772", "SAE Combo")
SYNTHETIC_EPOCH = datetime(2020, 1, 1)
# Level of each station slot; station NBA-<region><slot> keeps it for every event.
SYNTHETIC_STATION_LEVELS = ("L3", "L2", "L2")


class _Session(NamedTuple):
    start: datetime
    duration: int
    start_soc: int
    end_soc: int
    connector: str
    slot: int


def _draw_session(rng: np.random.Generator) -> _Session:
    start = SYNTHETIC_EPOCH + timedelta(minutes=int(rng.integers(0, 365 * 24 * 60)))
    start_soc = int(rng.integers(5, 61))
    return _Session(
        start=start,
        duration=int(rng.integers(10, 241)),
        start_soc=start_soc,
        end_soc=int(rng.integers(start_soc + 10, 101)),
        connector=SYNTHETIC_CONNECTORS[int(rng.integers(0, len(SYNTHETIC_CONNECTORS)))],
        slot=int(rng.integers(0, len(SYNTHETIC_STATION_LEVELS))),
    )


def region_name(index: int) -> str:
    return f"region-{index + 1}"


def generate_synthetic(
    rows_per_region: int,
    regions: int,
    noise_std: float,
    seed: int,
    truth: SyntheticTruth = GROUND_TRUTH,
) -> List[RawEvent]:
    """
    Events from a fixed linear ground truth plus Gaussian noise.

    total_kwh = base + a*duration + b*(end_soc - start_soc) + region_offset + noise

    One pool of rows_per_region sessions is drawn and replayed at every
    region's stations, so regions differ only in their offset and noise.
    Deterministic for a given seed; schema-identical to load_csv output.
    """
    if rows_per_region < 1 or regions < 1:
        raise ValueError("rows_per_region and regions must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")

    rng = np.random.default_rng(seed)
    sessions = [_draw_session(rng) for _ in range(rows_per_region)]
    events: List[RawEvent] = []
    for r in range(regions):
        for i, s in enumerate(sessions):
            noise = float(rng.normal(0.0, noise_std)) if noise_std > 0 else 0.0
            energy = truth.energy(s.duration, s.start_soc, s.end_soc, r, regions)
            events.append(RawEvent(
                connection_id=f"syn-{r + 1}-{i:05d}",
                start_time=s.start,
                end_time=s.start + timedelta(minutes=s.duration),
                duration_minutes=s.duration,
                connector=s.connector,
                start_soc_pct=s.start_soc,
                end_soc_pct=s.end_soc,
                total_kwh=max(0.0, energy + noise),
                station=f"NBA-{r + 1}{s.slot + 1:02d}",
                region=region_name(r),
                station_level=SYNTHETIC_STATION_LEVELS[s.slot],
            ))

    logger.info("Generated %d synthetic events across %d region(s)", len(events), regions)
    return events
