"""Tests for recharge-event ingestion, encoding and partitioning."""

from collections import Counter
from datetime import datetime

import numpy as np
import pytest

from src.data import (
    GROUND_TRUTH,
    RawEvent,
    build_feature_space,
    encode,
    generate_synthetic,
    load_csv,
    load_csvs,
    load_schema_map,
    load_station_map,
    partition_by_region,
    period_of_day,
    split_holdout,
    write_csv,
    write_station_map,
)
from src.errors import EmptyInput, MalformedHeader, StationConflict, UnknownRegion

HEADER = (
    "Connection ID,Recharge Start Time (local),Recharge End Time (local),"
    "Recharge duration (hours:minutes),Connector used,Start State of charge (%),"
    "End State of charge (%),Total kWh,Station\n"
)


def write(tmp_path, name, body, header=HEADER):
    path = tmp_path / name
    path.write_text(header + body, encoding="utf-8")
    return str(path)


@pytest.fixture
def stations(tmp_path):
    path = tmp_path / "stations.csv"
    path.write_text("station,region,level\nNBA-101,region-1,L3\nNBA-201,region-2,L2\n", encoding="utf-8")
    return load_station_map(str(path))


def event(cid="e1", region="region-1", start=datetime(2020, 1, 6, 8, 0), duration=60,
          connector="CHAdeMO", start_soc=20, end_soc=80, kwh=21.0, station="NBA-101", level=""):
    from datetime import timedelta
    return RawEvent(
        connection_id=cid, start_time=start, end_time=start + timedelta(minutes=duration),
        duration_minutes=duration, connector=connector, start_soc_pct=start_soc,
        end_soc_pct=end_soc, total_kwh=kwh, station=station, region=region, station_level=level,
    )


class TestLoadCsv:
    """Cleaning rules for the export format."""

    def test_valid_rows_with_duplicate(self, tmp_path, stations):
        path = write(tmp_path, "events.csv", (
            "c1,01/01/2020 11:05,01/01/2020 12:05,1:00,CHAdeMO,20,80,21.5,NBA-101\n"
            "c2,01/02/2020 18:30,01/02/2020 19:00,0:30,J1772,10,40,8.25,NBA-201\n"
            "c3,01/03/2020 02:00,01/03/2020 04:15,2:15,SAE Combo,5,95,40.0,NBA-101\n"
            "c2,01/02/2020 18:30,01/02/2020 19:00,0:30,J1772,10,40,8.25,NBA-201\n"
        ))
        events, report = load_csv(path, station_map=stations)
        assert [e.connection_id for e in events] == ["c1", "c2", "c3"]
        assert report.dropped == {"duplicates": 1}
        assert report.rows_read == 4
        assert report.rows_kept == 3

    def test_fields_are_parsed(self, tmp_path, stations):
        path = write(tmp_path, "events.csv",
                     "c1,01/01/2020 11:05,01/01/2020 12:10,1:05,CHAdeMO,20,80,21.5,NBA-101\n")
        (e,), _ = load_csv(path, station_map=stations)
        assert e.start_time == datetime(2020, 1, 1, 11, 5)
        assert e.duration_minutes == 65
        assert e.total_kwh == 21.5
        assert e.region == "region-1"
        assert e.station_level == "L3"

    def test_invalid_rows_are_counted(self, tmp_path, stations):
        path = write(tmp_path, "events.csv", (
            "c1,01/01/2020 11:05,01/01/2020 10:05,1:00,CHAdeMO,20,80,21.5,NBA-101\n"   # end < start
            "c2,01/01/2020 11:05,01/01/2020 12:05,1:00,CHAdeMO,20,120,21.5,NBA-101\n"  # soc > 100
            "c3,01/01/2020 11:05,01/01/2020 12:05,1:00,CHAdeMO,20,80,-1,NBA-101\n"     # negative energy
            "c4,01/01/2020 11:05,01/01/2020 12:05,1:00,,20,80,21.5,NBA-101\n"          # empty connector
            "0,01/01/2020 11:05,01/01/2020 12:05,1:00,CHAdeMO,20,80,21.5,NBA-101\n"    # zero-only id
            "c6,yesterday,01/01/2020 12:05,1:00,CHAdeMO,20,80,21.5,NBA-101\n"          # unparseable
            "c7,01/01/2020 11:05,01/01/2020 12:05,1:00,CHAdeMO,20,80,21.5,NBA-101\n"
        ))
        events, report = load_csv(path, station_map=stations)
        assert [e.connection_id for e in events] == ["c7"]
        assert report.dropped == {
            "invalid_time": 1,
            "invalid_soc": 1,
            "invalid_energy": 1,
            "missing_field": 2,
            "malformed": 1,
        }

    def test_spreadsheet_artefacts_are_stripped(self, tmp_path, stations):
        path = write(tmp_path, "events.csv",
                     '"=""c1""",01/01/2020 11:05,01/01/2020 12:05,1:00," CHAdeMO ",20,80,21.5,"=""NBA-101"""\n')
        (e,), _ = load_csv(path, station_map=stations)
        assert e.connection_id == "c1"
        assert e.connector == "CHAdeMO"
        assert e.station == "NBA-101"

    def test_duration_derived_without_column(self, tmp_path):
        header = ("Connection ID,Recharge Start Time (local),Recharge End Time (local),Connector used,"
                  "Start State of charge (%),End State of charge (%),Total kWh,Station,Region\n")
        path = write(tmp_path, "events.csv",
                     "c1,01/01/2020 11:05,01/01/2020 12:35,J1772,20,80,10.0,S1,north\n", header=header)
        (e,), _ = load_csv(path)
        assert e.duration_minutes == 90
        assert e.region == "north"

    def test_header_only_file(self, tmp_path):
        events, report = load_csv(write(tmp_path, "empty.csv", ""))
        assert events == []
        assert report.dropped == {}

    def test_missing_column(self, tmp_path):
        path = write(tmp_path, "bad.csv", "c1,x\n", header="Connection ID,Other\n")
        with pytest.raises(MalformedHeader):
            load_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_csv(str(tmp_path / "nope.csv"))

    def test_schema_mapping(self, tmp_path, stations):
        schema_file = tmp_path / "schema.txt"
        schema_file.write_text("# renamed export\nTotal kWh=Energy (kWh)\nStation=Charger\n", encoding="utf-8")
        header = HEADER.replace("Total kWh", "Energy (kWh)").replace("Station\n", "Charger\n")
        path = write(tmp_path, "events.csv",
                     "c1,01/01/2020 11:05,01/01/2020 12:05,1:00,CHAdeMO,20,80,21.5,NBA-101\n", header=header)
        (e,), _ = load_csv(path, schema=load_schema_map(str(schema_file)), station_map=stations)
        assert e.total_kwh == 21.5
        assert e.station == "NBA-101"

    def test_load_csvs_dedups_across_files(self, tmp_path, stations):
        row = "c1,01/01/2020 11:05,01/01/2020 12:05,1:00,CHAdeMO,20,80,21.5,NBA-101\n"
        other = "c2,01/01/2020 11:05,01/01/2020 12:05,1:00,J1772,20,80,9.5,NBA-201\n"
        paths = [write(tmp_path, "a.csv", row), write(tmp_path, "b.csv", row + other)]
        events, report = load_csvs(paths, station_map=stations)
        assert [e.connection_id for e in events] == ["c1", "c2"]
        assert report.dropped == {"duplicates": 1}
        assert report.rows_read == 3

    def test_mixed_timezone_row_is_malformed(self, tmp_path, stations):
        path = write(tmp_path, "events.csv", (
            "c1,2020-01-01T11:05:00+01:00,01/01/2020 12:05,1:00,CHAdeMO,20,80,21.5,NBA-101\n"
            "c2,01/01/2020 11:05,01/01/2020 12:05,1:00,CHAdeMO,20,80,21.5,NBA-101\n"
        ))
        events, report = load_csv(path, station_map=stations)
        assert [e.connection_id for e in events] == ["c2"]
        assert report.dropped == {"malformed": 1}


class TestStationMap:

    def test_repeated_identical_rows(self, tmp_path):
        path = tmp_path / "stations.csv"
        path.write_text("station,region,level\nNBA-101,region-1,L3\nNBA-101,region-1,L3\n", encoding="utf-8")
        assert load_station_map(str(path)) == {"NBA-101": ("region-1", "L3")}

    def test_conflicting_rows_are_rejected(self, tmp_path):
        path = tmp_path / "stations.csv"
        path.write_text(
            "station,region,level\nNBA-101,region-1,L3\nNBA-101,region-1,L2\nNBA-201,region-2,L2\n",
            encoding="utf-8",
        )
        with pytest.raises(StationConflict) as err:
            load_station_map(str(path))
        assert err.value.stations == ["NBA-101"]

    def test_missing_region_column(self, tmp_path):
        path = tmp_path / "stations.csv"
        path.write_text("station,level\nNBA-101,L3\n", encoding="utf-8")
        with pytest.raises(MalformedHeader):
            load_station_map(str(path))


class TestFeatureSpace:

    def test_feature_names_layout(self):
        events = [
            event("a", connector="J1772", start=datetime(2020, 1, 4, 20, 0), region="region-2", level="L2"),
            event("b", connector="CHAdeMO", start=datetime(2020, 1, 6, 9, 0), region="region-1", level="L3"),
        ]
        names = build_feature_space(events).feature_names
        assert names == [
            "duration_minutes", "end_soc_pct", "start_soc_pct",
            "connector=CHAdeMO", "connector=J1772",
            "day_of_week=monday", "day_of_week=saturday",
            "is_weekend",
            "period_of_day=evening", "period_of_day=morning",
            "region=region-1", "region=region-2",
            "station_level=L2", "station_level=L3",
        ]

    def test_no_weekend_no_levels(self):
        space = build_feature_space([event(start=datetime(2020, 1, 6, 8, 0))])
        assert "is_weekend" not in space.feature_names
        assert not any(n.startswith("station_level=") for n in space.feature_names)

    @pytest.mark.parametrize("hour,period", [(0, "night"), (5, "night"), (6, "morning"),
                                             (12, "afternoon"), (17, "afternoon"), (18, "evening")])
    def test_period_buckets(self, hour, period):
        assert period_of_day(datetime(2020, 1, 1, hour, 30)) == period

    def test_empty_events(self):
        with pytest.raises(EmptyInput):
            build_feature_space([])

    def test_region_column_is_one_over_region_count(self):
        events = [event(f"e{i}", region=f"region-{i}") for i in range(1, 5)]
        data = encode(events)
        column = data.features[:, data.feature_names.index("region=region-3")]
        assert column.tolist() == [0.0, 0.0, 0.25, 0.0]


class TestEncode:

    def test_min_max_scaling_and_one_hot(self):
        events = [event("a", duration=30, start_soc=10, end_soc=50),
                  event("b", duration=90, start_soc=30, end_soc=50)]
        data = encode(events)
        names = data.feature_names
        assert data.features[:, names.index("duration_minutes")].tolist() == [0.0, 1.0]
        assert data.features[:, names.index("start_soc_pct")].tolist() == [0.0, 1.0]
        # identical end_soc everywhere -> scaled to 0
        assert data.features[:, names.index("end_soc_pct")].tolist() == [0.0, 0.0]
        assert data.features[:, names.index("connector=CHAdeMO")].tolist() == [1.0, 1.0]
        assert data.targets.tolist() == [21.0, 21.0]

    def test_no_all_zero_columns(self):
        events = generate_synthetic(20, 3, 0.05, seed=1)
        data = encode(events)
        assert np.all(data.features.max(axis=0)[3:] > 0)

    def test_features_are_read_only(self):
        data = encode([event()])
        with pytest.raises(ValueError):
            data.features[0, 0] = 1.0

    def test_row_order_follows_events(self):
        events = generate_synthetic(15, 3, 0.05, seed=2)
        space = build_feature_space(events)
        order = np.random.default_rng(0).permutation(len(events))
        shuffled = encode([events[i] for i in order], space)
        data = encode(events, space)
        assert np.array_equal(shuffled.features, data.features[order])
        assert np.array_equal(shuffled.targets, data.targets[order])
        assert shuffled.feature_names == data.feature_names


class TestPartition:

    def test_shared_feature_space(self):
        events = [event("a", region="region-1", connector="J1772"),
                  event("b", region="region-2", connector="CHAdeMO")]
        parts = partition_by_region(events, ["region-1", "region-2", "region-3"])
        assert sorted(parts) == ["region-1", "region-2"]
        assert parts["region-1"].feature_names == parts["region-2"].feature_names
        assert parts["region-1"].row_count == 1

    def test_unknown_region(self):
        events = [event("a", region="region-1"), event("b", region="", station="NBA-999")]
        with pytest.raises(UnknownRegion) as err:
            partition_by_region(events, ["region-1"])
        assert err.value.stations == ["NBA-999"]

    def test_events_are_neither_lost_nor_duplicated(self):
        events = generate_synthetic(40, 9, 0.05, seed=6)
        regions = sorted({e.region for e in events})
        parts = partition_by_region(events, regions)
        assert sum(d.row_count for d in parts.values()) == len(events) == 360
        assert {r: d.row_count for r, d in parts.items()} == {r: 40 for r in regions}
        kept = Counter(float(y) for d in parts.values() for y in d.targets)
        assert kept == Counter(e.total_kwh for e in events)

    def test_holdout_is_stratified_by_region(self):
        events = generate_synthetic(50, 3, 0.05, seed=4)
        _, holdout = split_holdout(events, 0.2, seed=1)
        assert Counter(e.region for e in holdout) == {"region-1": 10, "region-2": 10, "region-3": 10}
        positions = {
            region: sorted(e.connection_id[-5:] for e in holdout if e.region == region)
            for region in ("region-1", "region-2", "region-3")
        }
        assert positions["region-1"] == positions["region-2"] == positions["region-3"]

    def test_holdout_split(self):
        events = generate_synthetic(50, 2, 0.05, seed=4)
        train, holdout = split_holdout(events, 0.1, seed=9)
        assert len(holdout) == 10
        assert len(train) + len(holdout) == 100
        assert not {e.connection_id for e in train} & {e.connection_id for e in holdout}
        assert split_holdout(events, 0.1, seed=9) == (train, holdout)


class TestSynthetic:

    def test_deterministic(self):
        assert generate_synthetic(30, 3, 0.05, seed=11) == generate_synthetic(30, 3, 0.05, seed=11)
        assert generate_synthetic(30, 3, 0.05, seed=11) != generate_synthetic(30, 3, 0.05, seed=12)

    def test_shape(self):
        events = generate_synthetic(200, 9, 0.05, seed=0)
        assert len(events) == 1800
        assert sorted({e.region for e in events}) == [f"region-{i}" for i in range(1, 10)]

    def test_least_squares_recovers_ground_truth(self):
        events = generate_synthetic(100, 3, 0.0, seed=5)
        for index, region in enumerate(["region-1", "region-2", "region-3"]):
            rows = [e for e in events if e.region == region]
            a = np.array([[1.0, e.duration_minutes, e.end_soc_pct - e.start_soc_pct] for e in rows])
            y = np.array([e.total_kwh for e in rows])
            coef, *_ = np.linalg.lstsq(a, y, rcond=None)
            intercept = GROUND_TRUTH.base_kwh + GROUND_TRUTH.region_offset(index, 3)
            assert coef == pytest.approx(
                [intercept, GROUND_TRUTH.kwh_per_minute, GROUND_TRUTH.kwh_per_soc_pct], abs=1e-6
            )

    def test_station_has_one_level(self):
        events = generate_synthetic(60, 3, 0.05, seed=8)
        levels = {}
        for e in events:
            levels.setdefault(e.station, set()).add(e.station_level)
        assert all(len(found) == 1 for found in levels.values())

    def test_regions_replay_the_same_sessions(self):
        events = generate_synthetic(25, 3, 0.05, seed=8)
        by_region = [[e for e in events if e.region == f"region-{r}"] for r in (1, 2, 3)]
        for first, other in zip(by_region[0], by_region[2]):
            assert first.start_time == other.start_time
            assert first.duration_minutes == other.duration_minutes
            assert first.connector == other.connector
            assert first.station[-2:] == other.station[-2:]
            assert first.total_kwh != other.total_kwh

    def test_csv_export_reloads(self, tmp_path):
        events = generate_synthetic(10, 2, 0.05, seed=3)
        write_csv(events, str(tmp_path / "events.csv"))
        write_station_map(events, str(tmp_path / "stations.csv"))
        reloaded, report = load_csv(
            str(tmp_path / "events.csv"),
            station_map=load_station_map(str(tmp_path / "stations.csv")),
        )
        assert reloaded == events
        assert report.dropped == {}
