import warnings
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tripforecast import data
from tripforecast.data import TripRecord

from oracles import brute_force_windows

DAY = 86400.0


def trip(start, dur=600.0, km=5.0, vid="a"):
    return TripRecord(vid, float(start), float(start + dur), float(km))


@st.composite
def fleets(draw, max_trips=40):
    """Random sorted fleets with gaps that straddle the merge threshold."""
    out = []
    for vid in ("a", "b"):
        t = draw(st.floats(0, 1e5))
        for _ in range(draw(st.integers(0, max_trips))):
            t += draw(st.sampled_from([0.0, 60.0, 599.0, 600.0, 601.0, 3600.0, 86400.0]))
            dur = draw(st.sampled_from([0.0, 300.0, 1200.0]))
            out.append(TripRecord(vid, t, t + dur, draw(st.sampled_from([0.5, 2.9, 3.0, 7.25]))))
            t += dur
    return out


class TestMerge:
    def test_five_minute_gap_merges(self):
        merged = data.merge_trips([trip(0, 600, 4), trip(900, 600, 4)])
        assert len(merged) == 1
        assert merged[0].distance_km == 8 and merged[0].start_time == 0 and merged[0].end_time == 1500

    def test_eleven_minute_gap_keeps_both(self):
        trips = [trip(0, 600, 4), trip(600 + 660, 600, 4)]
        assert data.merge_trips(trips) == trips

    def test_exactly_ten_minutes_merges(self):
        assert len(data.merge_trips([trip(0, 100), trip(700, 100)])) == 1

    def test_transitive_and_keeps_latest_end(self):
        merged = data.merge_trips([trip(0, 5000, 1), trip(100, 50, 1), trip(5300, 10, 1)])
        assert len(merged) == 1 and merged[0].end_time == 5310 and merged[0].distance_km == 3

    def test_vehicles_are_independent(self):
        trips = [trip(0, vid="a"), trip(700, vid="b")]
        assert len(data.merge_trips(trips)) == 2

    def test_unsorted_input_rejected(self):
        with pytest.raises(data.OrderingError):
            data.merge_trips([trip(5000), trip(0)])

    @settings(max_examples=60, deadline=None)
    @given(fleets())
    def test_gaps_exceed_threshold_and_idempotent(self, trips):
        merged = data.merge_trips(trips)
        assert data.merge_trips(merged) == merged
        for prev, nxt in zip(merged, merged[1:]):
            if prev.vehicle_id == nxt.vehicle_id:
                assert nxt.start_time - prev.end_time > data.MERGE_GAP_S
        total = lambda ts: sum(t.distance_km for t in ts)
        assert total(merged) == pytest.approx(total(trips))


class TestFilter:
    def test_threshold(self):
        kept = data.filter_short([trip(0, km=2.9), trip(1e4, km=3.0), trip(2e4, km=10)])
        assert [t.distance_km for t in kept] == [3.0, 10]

    @settings(max_examples=40, deadline=None)
    @given(fleets())
    def test_minimum_distance(self, trips):
        assert all(t.distance_km >= 3 for t in data.filter_short(data.merge_trips(trips)))

    def test_empty_vehicle_warns(self):
        with pytest.warns(data.EmptyVehicleWarning):
            assert data.clean_trips([trip(0, km=1.0), trip(1e4, km=1.0)]) == []


class TestFeatures:
    def test_delta_t_between_starts(self):
        s = data.build_features([trip(1000), trip(4600)], tz="UTC")
        assert s.delta_t.tolist() == [3600.0] and len(s) == 1

    def test_equal_starts_rejected(self):
        with pytest.raises(data.DataError):
            data.build_features([trip(1000, 0), trip(1000, 0)])

    def test_needs_two_trips(self):
        with pytest.raises(data.InsufficientHistoryError):
            data.build_features([trip(0)])

    def test_monday_is_zero(self):
        monday_8am = datetime(2021, 1, 4, 8, tzinfo=timezone.utc).timestamp()
        assert data.weekday_of(monday_8am, "UTC") == 0
        # 23:30 UTC Sunday is already Monday in Stockholm
        sunday_late = datetime(2021, 1, 3, 23, 30, tzinfo=timezone.utc).timestamp()
        assert data.weekday_of(sunday_late, "UTC") == 6
        assert data.weekday_of(sunday_late, "Europe/Stockholm") == 0


class TestNormalization:
    def test_values(self):
        np.testing.assert_allclose(data.normalize_values([2, 4, 10], 2, 10), [0, 0.25, 1])
        assert data.normalize_values([12], 2, 10)[0] == 1.25

    def test_degenerate(self):
        with pytest.raises(data.DegenerateFeatureError):
            data.NormStats.fit(np.array([5.0, 5.0]), np.array([1.0, 2.0]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(-1e3, 1e3), st.floats(1e-3, 1e4))
    def test_roundtrip(self, xs, lo, span):
        x = np.array(xs)
        back = data.denormalize_values(data.normalize_values(x, lo, lo + span), lo, lo + span)
        np.testing.assert_allclose(back, x, rtol=1e-12, atol=1e-12 * (1 + np.abs(x).max()))

    def test_target_roundtrip(self):
        stats = data.NormStats(10, 1000, 3, 50)
        y = np.random.default_rng(0).uniform(size=(7, 2))
        np.testing.assert_allclose(data.normalize_targets(data.denormalize_targets(y, stats), stats), y, atol=1e-12)


class TestWindows:
    def _series(self, starts):
        n = len(starts)
        return data.FeatureSeries("v", np.array(starts, float), np.arange(1.0, n + 1), np.full(n, 7.0), np.arange(n) % 7)

    def test_three_days_before_in_five_day_window(self):
        s = self._series([0.0, 3 * DAY])
        (sample,) = data.make_windows(s, 5, 4)
        assert sample.valid_len == 1 and sample.target.tolist() == [2.0, 7.0]
        assert not sample.features[1:].any()

    def test_six_days_before_excluded(self):
        assert data.make_windows(self._series([0.0, 6 * DAY]), 5, 4) == []

    def test_truncates_to_most_recent(self):
        s = self._series([i * 3600.0 for i in range(10)])
        last = data.make_windows(s, 1, 3)[-1]
        assert last.valid_len == 3
        np.testing.assert_array_equal(last.features[:, 0], [7.0, 8.0, 9.0])
        assert last.features[0, 2 + 6] == 1.0  # weekday one-hot of trip 6

    def test_window_range_validated(self):
        with pytest.raises(data.DataError):
            data.make_windows(self._series([0.0, 1.0]), 15, 4)

    @pytest.mark.parametrize("window", [1, 3, 8, 14])
    def test_matches_brute_force_oracle(self, window):
        fleet = data.generate_synthetic(data.FleetSpec(vehicles=5, days=70, seed=window))
        cleaned = data.clean_trips(fleet)
        n_trips = 0
        for vid in sorted({t.vehicle_id for t in cleaned}):
            series = data.build_features([t for t in cleaned if t.vehicle_id == vid])
            n_trips += len(series)
            samples = data.make_windows(series, window, 12)
            oracle = brute_force_windows(series, window, 12)
            assert [s.target_index for s in samples] == [j for j, _ in oracle]
            for s, (j, prior) in zip(samples, oracle):
                assert s.valid_len == len(prior)
                np.testing.assert_array_equal(s.features[: s.valid_len, 0], series.delta_t[prior])
                np.testing.assert_array_equal(s.features[: s.valid_len, 1], series.distance[prior])
                assert not s.features[s.valid_len :].any()
                assert s.target.tolist() == [series.delta_t[j], series.distance[j]]
        assert n_trips <= 1000


class TestDataset:
    def test_split_counts(self):
        assert data.split_counts(100) == (70, 15, 15)
        assert data.split_counts(7) == (4, 1, 2)
        assert sum(data.split_counts(12345)) == 12345

    def test_chronological_per_vehicle(self, small_dataset):
        ds = small_dataset
        for vid in ds.series:
            times = [[s.target_time for s in part if s.vehicle_id == vid] for part in (ds.train, ds.val, ds.test)]
            flat = times[0] + times[1] + times[2]
            assert flat == sorted(flat)

    def test_stats_exclude_future_targets(self, small_fleet):
        ds = data.prepare_dataset(small_fleet, window_days=4)
        oracle_dt, oracle_d = [], []
        for vid, s in ds.series.items():
            last_train = max(x.target_index for x in ds.train if x.vehicle_id == vid)
            oracle_dt.append(s.delta_t[: last_train + 1])
            oracle_d.append(s.distance[: last_train + 1])
        assert ds.stats == data.NormStats.fit(np.concatenate(oracle_dt), np.concatenate(oracle_d))
        # some held-out targets should fall outside the training range and stay unclipped
        tgt = np.stack([x.target for x in ds.test])
        assert np.all(np.isfinite(tgt))

    def test_samples_well_formed(self, small_dataset):
        for s in small_dataset.train + small_dataset.val + small_dataset.test:
            assert 1 <= s.valid_len <= small_dataset.max_seq_len
            assert not s.features[s.valid_len :].any()
            assert np.all(s.features[: s.valid_len, 2:].sum(axis=1) == 1)

    def test_default_capacity(self):
        assert data.default_capacity(list(range(1, 51))) == 50
        assert data.default_capacity([500] * 10) == 64

    def test_stats_override(self, small_fleet):
        stats = data.NormStats(0.0, 1e6, 0.0, 100.0)
        ds = data.prepare_dataset(small_fleet, window_days=4, stats=stats)
        assert ds.stats is stats

    def test_next_trip_sample(self):
        s = data.FeatureSeries("v", np.array([0.0, DAY, 2 * DAY, 9 * DAY]), np.ones(4), np.arange(4.0), np.zeros(4, int))
        nxt = data.next_trip_sample(s, 7, 5)
        assert nxt.valid_len == 2 and nxt.features[:2, 1].tolist() == [2.0, 3.0]
        assert np.isnan(nxt.target).all()


class TestCsv:
    def test_roundtrip(self, tmp_path, small_fleet):
        path = tmp_path / "t.csv"
        data.write_csv(small_fleet, path)
        assert data.ingest_csv(path) == sorted(small_fleet, key=lambda t: (t.vehicle_id, t.start_time))

    def test_mixed_timestamps_and_sorting(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text(
            "vehicle_id,start_time,end_time,distance_km\n"
            "a,2021-01-04T09:00:00+00:00,2021-01-04T09:30:00Z,5\n"
            "a,1609747200,1609749000,4.5\n"
            "b,2021-01-04T08:00:00,1609749000,3\n"
        )
        recs = data.ingest_csv(path)
        assert len(recs) == 3
        assert [r.start_time for r in recs[:2]] == [1609747200.0, 1609750800.0]
        assert recs[2].start_time == 1609747200.0

    @pytest.mark.parametrize(
        "body, msg",
        [
            ("a,100,50,3\n", "line 2"),
            ("a,100,200,-1\n", "line 2"),
            ("a,100,200,3\nb,xx,200,3\n", "line 3"),
            ("a,100,200\n", "line 2"),
        ],
    )
    def test_malformed_rows(self, tmp_path, body, msg):
        path = tmp_path / "t.csv"
        path.write_text("vehicle_id,start_time,end_time,distance_km\n" + body)
        with pytest.raises(data.DataError, match=msg):
            data.ingest_csv(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("vehicle,start,end,km\n")
        with pytest.raises(data.DataError, match="line 1"):
            data.ingest_csv(path)


class TestSynthetic:
    def test_deterministic(self):
        spec = data.FleetSpec(vehicles=3, days=20)
        assert data.generate_synthetic(spec) == data.generate_synthetic(spec)
        assert data.generate_synthetic(spec) != data.generate_synthetic(spec, seed=1)

    def test_default_size_regression(self):
        n = len(data.generate_synthetic())
        assert 10_000 <= n <= 40_000
        assert abs(n - 19_206) <= 0.1 * 19_206

    def test_commuter_only_is_weekly_periodic(self):
        spec = data.FleetSpec(vehicles=2, days=63, commute_prob=1.0, noise_minutes=0, errand_rate=0, split_prob=0, tz="UTC")
        trips = data.clean_trips(data.generate_synthetic(spec))
        for vid in ("v000", "v001"):
            s = data.build_features([t for t in trips if t.vehicle_id == vid], "UTC")
            per_week = int(np.sum(s.start_time < s.start_time[0] + 7 * DAY))
            np.testing.assert_array_equal(s.delta_t[per_week:], s.delta_t[:-per_week])
            np.testing.assert_array_equal(s.weekday[per_week:], s.weekday[:-per_week])

    def test_invalid_spec(self):
        with pytest.raises(data.DataError):
            data.FleetSpec(vehicles=0)
        with pytest.raises(data.DataError):
            data.FleetSpec.from_mapping({"vehicles": 2, "colour": "red"})

    def test_spec_file(self, tmp_path):
        path = tmp_path / "fleet.toml"
        path.write_text("vehicles = 3\ndays = 10\nseed = 4\n")
        spec = data.load_fleet_spec(path)
        assert (spec.vehicles, spec.days, spec.seed) == (3, 10, 4)

    def test_generated_trips_are_valid(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            trips = data.generate_synthetic(data.FleetSpec(vehicles=4, days=30))
        assert all(t.end_time >= t.start_time and t.distance_km >= 0 for t in trips)
