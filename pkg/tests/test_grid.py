import datetime as dt
import math

import numpy as np
import pytest

from s2skit.grid import (
    Channel,
    FieldSet,
    GridSpec,
    RegionBox,
    anomaly,
    build_climatology,
    day_slot,
    desk_grid,
    great_circle_km,
    latitude_weights,
    paper_grid,
    region_mask,
    weighted_mean,
)


def make_fieldset(grid, values, date=None, channels=None, mask=None):
    c = values.shape[0]
    if channels is None:
        channels = tuple(Channel(f"ch{i}", "atmosphere") for i in range(c))
    return FieldSet(grid=grid, channels=channels, values=values, valid_time=date, mask=mask)


class TestLatitudeWeights:
    def test_single_equator_row(self):
        g = GridSpec(n_lat=1, n_lon=4, lat_start_deg=0.0, lat_step_deg=-1.5)
        assert latitude_weights(g).tolist() == [1.0]

    def test_two_rows_zero_and_sixty(self):
        g = GridSpec(n_lat=2, n_lon=4, lat_start_deg=0.0, lat_step_deg=60.0)
        # oracle: cos(0)=1, cos(60)=0.5, mean 0.75
        expected = np.array([1.0, 0.5]) / 0.75
        np.testing.assert_allclose(latitude_weights(g), expected, rtol=1e-14)

    def test_paper_grid_symmetric_max_at_equator(self):
        w = latitude_weights(paper_grid())
        np.testing.assert_allclose(w, w[::-1], rtol=0, atol=1e-12)
        assert int(np.argmax(w)) == 60
        assert w.mean() == pytest.approx(1.0, abs=1e-13)
        assert np.all(w > 0)

    def test_pole_rows_near_zero_but_permitted(self):
        w = latitude_weights(paper_grid())
        assert w[0] < 1e-10 and w[-1] < 1e-10

    def test_invariant_under_longitude_resolution(self):
        a = GridSpec(n_lat=5, n_lon=8, lat_start_deg=60.0, lat_step_deg=-30.0)
        b = GridSpec(n_lat=5, n_lon=720, lat_start_deg=60.0, lat_step_deg=-30.0, lon_step_deg=0.5)
        np.testing.assert_array_equal(latitude_weights(a), latitude_weights(b))


class TestGreatCircle:
    def test_identical_points(self):
        assert great_circle_km((12.5, 40.0), (12.5, 40.0)) == 0.0

    def test_half_circumference(self):
        # oracle: half circumference = pi * 6371
        assert great_circle_km((0, 0), (0, 180)) == pytest.approx(math.pi * 6371.0, rel=1e-12)

    def test_pole_to_pole_antipodal(self):
        assert great_circle_km((90, 0), (-90, 0)) == pytest.approx(great_circle_km((0, 0), (0, 180)), rel=1e-12)

    def test_symmetry_and_triangle_inequality(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            pts = [(rng.uniform(-90, 90), rng.uniform(0, 360)) for _ in range(3)]
            d01 = great_circle_km(pts[0], pts[1])
            d10 = great_circle_km(pts[1], pts[0])
            assert d01 == pytest.approx(d10, abs=1e-9)
            d12 = great_circle_km(pts[1], pts[2])
            d02 = great_circle_km(pts[0], pts[2])
            assert d02 <= d01 + d12 + 1e-9


class TestRegionMask:
    def test_global_box_all_true(self):
        g = desk_grid()
        m = region_mask(g, RegionBox(-90, 90, 0, 359.999))
        assert m.all()

    def test_single_cell(self):
        g = desk_grid()
        m = region_mask(g, RegionBox(-3, 3, 10, 14))
        assert m.sum() == 1

    def test_wrapping_box_column_count(self):
        g = paper_grid()
        m = region_mask(g, RegionBox(-90, 90, 350, 10))
        # independent oracle: enumerate the 1.5-degree columns in [350,360)+[0,10]
        cols = [k for k in range(240) if (1.5 * k >= 350.0) or (1.5 * k <= 10.0)]
        assert len(cols) == 13
        assert m.sum() == 121 * len(cols)
        per_row = m.sum(axis=1)
        assert np.all(per_row == len(cols))

    def test_intersection_property(self):
        g = desk_grid()
        a = RegionBox(-30, 40, 20, 100)
        b = RegionBox(0, 60, 50, 200)
        inter = RegionBox(0, 40, 50, 100)
        np.testing.assert_array_equal(
            region_mask(g, a) & region_mask(g, b), region_mask(g, inter)
        )

    def test_empty_box_errors(self):
        g = desk_grid()
        with pytest.raises(ValueError, match="no grid cells"):
            region_mask(g, RegionBox(1.0, 2.0, 1.0, 2.0))

    def test_bad_box_rejected(self):
        with pytest.raises(ValueError):
            RegionBox(10, 0, 0, 30)


class TestDaySlot:
    def test_known_slots(self):
        assert day_slot(dt.date(2021, 1, 1)) == 0
        assert day_slot(dt.date(2020, 2, 29)) == 59
        assert day_slot(dt.date(2021, 3, 1)) == 60
        assert day_slot(dt.date(2021, 12, 31)) == 365


class TestClimatology:
    def grid(self):
        return GridSpec(n_lat=3, n_lon=4, lat_start_deg=30.0, lat_step_deg=-30.0, lon_step_deg=90.0)

    def daily_samples(self, grid, year, value_fn):
        start = dt.date(year, 1, 1)
        n = (dt.date(year + 1, 1, 1) - start).days
        out = []
        for k in range(n):
            d = start + dt.timedelta(days=k)
            out.append(make_fieldset(grid, np.full((2, 3, 4), float(value_fn(d, k))), date=d))
        return out

    def test_constant_field(self):
        g = self.grid()
        samples = self.daily_samples(g, 2019, lambda d, k: 4.25)
        clim = build_climatology(samples, halfwidth=15)
        np.testing.assert_array_equal(clim.day_values[~np.isnan(clim.day_values).any(axis=(1, 2, 3))], 4.25)
        assert np.all(clim.day_values == 4.25)

    def test_window_mean_of_arithmetic_sequence_is_center(self):
        # leap year so calendar slots are contiguous; value = slot index
        g = self.grid()
        samples = self.daily_samples(g, 2020, lambda d, k: day_slot(d))
        clim = build_climatology(samples, halfwidth=15)
        for slot in range(100, 250):
            assert clim.day_values[slot, 0, 0, 0] == pytest.approx(slot, abs=1e-9)

    def test_two_reference_years_average(self):
        g = self.grid()
        samples = self.daily_samples(g, 2018, lambda d, k: 3.0)
        samples += self.daily_samples(g, 2019, lambda d, k: 5.0)
        clim = build_climatology(samples, halfwidth=15)
        assert np.all(clim.day_values == 4.0)
        assert clim.reference_period == (2018, 2019)

    def test_empty_window_errors_naming_day(self):
        g = self.grid()
        samples = [make_fieldset(g, np.zeros((2, 3, 4)), date=dt.date(2019, 6, 1))]
        with pytest.raises(ValueError, match=r"calendar day 0 \(Jan-01\)"):
            build_climatology(samples, halfwidth=2)

    def test_grid_mismatch_errors(self):
        g = self.grid()
        other = GridSpec(n_lat=3, n_lon=4, lat_start_deg=60.0, lat_step_deg=-30.0, lon_step_deg=90.0)
        samples = self.daily_samples(g, 2020, lambda d, k: 1.0)
        samples[5] = make_fieldset(other, np.zeros((2, 3, 4)), date=samples[5].valid_time)
        with pytest.raises(ValueError, match="share one grid"):
            build_climatology(samples, halfwidth=15)


class TestAnomaly:
    def grid(self):
        return GridSpec(n_lat=3, n_lon=4, lat_start_deg=30.0, lat_step_deg=-30.0, lon_step_deg=90.0)

    def build(self, value_fn, year=2020):
        g = self.grid()
        start = dt.date(year, 1, 1)
        n = (dt.date(year + 1, 1, 1) - start).days
        samples = [
            make_fieldset(g, np.full((2, 3, 4), float(value_fn(start + dt.timedelta(days=k)))),
                          date=start + dt.timedelta(days=k))
            for k in range(n)
        ]
        return g, samples

    def test_field_equal_to_climatology_gives_zero(self):
        g, samples = self.build(lambda d: 2.5)
        clim = build_climatology(samples, halfwidth=15)
        out = anomaly(samples[40], clim)
        np.testing.assert_array_equal(out.values, 0.0)

    def test_zero_climatology_identity(self):
        g, samples = self.build(lambda d: 0.0)
        clim = build_climatology(samples, halfwidth=15)
        x = make_fieldset(g, np.arange(24, dtype=float).reshape(2, 3, 4), date=dt.date(2020, 7, 1))
        np.testing.assert_array_equal(anomaly(x, clim).values, x.values)

    def test_linearity_offset(self):
        g, samples = self.build(lambda d: 1.5)
        clim = build_climatology(samples, halfwidth=15)
        delta = np.arange(24, dtype=float).reshape(2, 3, 4)
        x = make_fieldset(g, 1.5 + delta, date=dt.date(2020, 7, 1))
        np.testing.assert_allclose(anomaly(x, clim).values, delta, atol=1e-12)

    def test_per_day_anomaly_mean_zero_halfwidth_zero(self):
        # window = that day only, so per-day anomaly means vanish exactly
        g = self.grid()
        rng = np.random.default_rng(3)
        samples = []
        for year in (2018, 2019, 2020):
            start = dt.date(year, 1, 1)
            n = (dt.date(year + 1, 1, 1) - start).days
            for k in range(n):
                d = start + dt.timedelta(days=k)
                samples.append(make_fieldset(g, rng.normal(size=(2, 3, 4)), date=d))
        clim = build_climatology(samples, halfwidth=0)
        by_slot = {}
        for s in samples:
            by_slot.setdefault(day_slot(s.valid_time), []).append(anomaly(s, clim).values)
        for slot, anoms in by_slot.items():
            np.testing.assert_allclose(np.mean(anoms, axis=0), 0.0, atol=1e-12)

    def test_per_day_anomaly_mean_zero_year_only_variation(self):
        # value depends only on the year; non-leap years keep window year
        # counts balanced, so any window width is exact
        g = self.grid()
        samples = []
        for year, v in ((2017, 1.0), (2018, 5.0), (2019, 9.0)):
            start = dt.date(year, 1, 1)
            n = (dt.date(year + 1, 1, 1) - start).days
            for k in range(n):
                d = start + dt.timedelta(days=k)
                samples.append(make_fieldset(g, np.full((2, 3, 4), v), date=d))
        clim = build_climatology(samples, halfwidth=15)
        sums = {}
        for s in samples:
            slot = day_slot(s.valid_time)
            a = anomaly(s, clim).values
            acc, n = sums.get(slot, (0.0, 0))
            sums[slot] = (acc + a, n + 1)
        for slot, (acc, n) in sums.items():
            np.testing.assert_allclose(acc / n, 0.0, atol=1e-9)

    def test_mask_preserved(self):
        g, samples = self.build(lambda d: 1.0)
        clim = build_climatology(samples, halfwidth=15)
        mask = np.ones((2, 3, 4), dtype=bool)
        mask[0, 0, 0] = False
        x = make_fieldset(g, np.ones((2, 3, 4)), date=dt.date(2020, 5, 5), mask=mask)
        out = anomaly(x, clim)
        assert out.mask is not None and not out.mask[0, 0, 0]


class TestFieldSet:
    def test_duplicate_channel_names_rejected(self):
        g = desk_grid()
        with pytest.raises(ValueError, match="unique"):
            make_fieldset(g, np.zeros((2, 31, 60)),
                          channels=(Channel("x", "atmosphere"), Channel("x", "ocean")))

    def test_nan_outside_mask_rejected(self):
        g = desk_grid()
        vals = np.zeros((1, 31, 60))
        vals[0, 5, 5] = np.nan
        with pytest.raises(ValueError, match="finite"):
            make_fieldset(g, vals)

    def test_nan_inside_mask_allowed(self):
        g = desk_grid()
        vals = np.zeros((1, 31, 60))
        vals[0, 5, 5] = np.nan
        mask = np.ones((1, 31, 60), dtype=bool)
        mask[0, 5, 5] = False
        fs = make_fieldset(g, vals, mask=mask)
        assert fs.mask is not None

    def test_block_split(self):
        g = desk_grid()
        channels = (Channel("t500", "atmosphere"), Channel("sst", "ocean"),
                    Channel("sm", "land"), Channel("lhf", "flux"))
        fs = make_fieldset(g, np.arange(4 * 31 * 60, dtype=float).reshape(4, 31, 60), channels=channels)
        a = fs.block("a")
        b = fs.block("b")
        assert [c.name for c in a.channels] == ["t500"]
        assert [c.name for c in b.channels] == ["sst", "sm", "lhf"]
        np.testing.assert_array_equal(a.values[0], fs.values[0])


class TestWeightedMean:
    def test_unmasked_matches_plain_mean_for_mean_one_weights(self):
        g = desk_grid()
        w = latitude_weights(g)
        field = np.full((2, 31, 60), 3.0)
        assert weighted_mean(field, w) == pytest.approx(3.0, rel=1e-13)

    def test_masked_cells_never_contribute(self):
        g = desk_grid()
        w = latitude_weights(g)
        rng = np.random.default_rng(0)
        field = rng.normal(size=(31, 60))
        mask = rng.random((31, 60)) > 0.3
        base = weighted_mean(field, w, mask)
        poked = field.copy()
        poked[~mask] = 1e9
        assert weighted_mean(poked, w, mask) == base
