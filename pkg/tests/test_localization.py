from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from lumitrack import astro, evaluation as E, localization as L, reshape, synth
from lumitrack.astro import GeoCoord
from lumitrack.errors import CoverageError, InputError
from lumitrack.localization import LikelihoodGrid
from lumitrack.sensorio import SensorLog, WeatherStationSeries, WeatherStore

DAY = 86400.0
ORIGIN = GeoCoord(40.0, -100.0)


def light_series(coord, d, strength=0.0, seed=0, days=3):
    t = astro.utc_midnight(d - timedelta(days=1)) + np.arange(0, days * DAY, 10.0)
    lux = synth.light_series(coord, t, strength, np.random.default_rng(seed))
    return reshape.preprocess_light(t, lux)


class TemplateModel:
    """Scores a curve by its closeness to the curve seen at the true position."""

    kind = "light"

    def __init__(self, series, truth, d):
        self.ref = reshape.reshape_light(series, truth, d).values

    def score(self, X):
        X = np.atleast_2d(X)
        return np.exp(-np.mean(np.abs(X - self.ref), axis=1) / 0.02)


class GapModel:
    kind = "temp"

    def score(self, X):
        X = np.atleast_2d(X)
        return np.exp(-np.abs(X[:, :17].mean(axis=1) - X[:, 17:].mean(axis=1)) / 3.0)


def grid(values, step=1.0, **kw):
    values = np.asarray(values, dtype=float)
    n, m = values.shape
    return LikelihoodGrid(ORIGIN, (np.arange(n) - n // 2) * step, (np.arange(m) - m // 2) * step,
                          values, **kw)


@pytest.fixture(scope="module")
def december_day():
    d = date(2018, 12, 4)
    s = light_series(ORIGIN, d)
    return s, d, L.evaluate_light_grid(TemplateModel(s, ORIGIN, d), s, d, ORIGIN)


class TestLightGrid:

    def test_default_dimensions(self, december_day):
        *_, g = december_day
        assert g.shape == (21, 21)
        assert g.lat_offsets[0] == -10 and g.lat_offsets[-1] == 10
        assert not g.missing.any()

    def test_cell_equals_single_candidate_score(self, december_day):
        s, d, g = december_day
        model = TemplateModel(s, ORIGIN, d)
        for i, j in [(0, 0), (3, 17), (10, 10), (20, 4)]:
            cand = ORIGIN.offset(g.lat_offsets[i], g.lon_offsets[j])
            curve = reshape.reshape_light(s, cand, d)
            assert g.values[i, j] == pytest.approx(model.score(curve.values)[0], rel=1e-12)

    def test_clean_day_peaks_at_truth(self, december_day):
        *_, g = december_day
        est = L.estimate_day(g)
        assert (est.lat_offset, est.lon_offset) == (0.0, 0.0)
        assert est.coord == ORIGIN

    def test_equinox_ridge_elongated_in_latitude(self):
        d = date(2018, 9, 23)
        s = light_series(ORIGIN, d)
        g = L.evaluate_light_grid(TemplateModel(s, ORIGIN, d), s, d, ORIGIN)
        wlat, wlon = L.half_max_widths(L.interpolate_grid(g))
        assert wlat > 3 * wlon

    def test_uncovered_cells_flagged_missing(self):
        d = date(2018, 12, 4)
        full = light_series(ORIGIN, d)
        # cut the series shortly after the true raw window ends
        w = astro.night_window(ORIGIN, d)
        end = reshape.raw_times([w.center], [w.length])[0, -1] + 300
        n = int((end - full.t0) // 60)
        s = reshape.MinuteSeries(full.t0, full.values[:n])
        g = L.evaluate_light_grid(TemplateModel(full, ORIGIN, d), s, d, ORIGIN)
        assert g.missing.any() and not g.missing.all()
        # western candidates have later nights and fall off the end
        assert not g.missing[10, 10:].any() and g.missing[10, 0]
        assert np.all(g.values[g.missing] == 0)

    def test_grid_step_and_span(self):
        d = date(2018, 12, 4)
        s = light_series(ORIGIN, d)
        g = L.evaluate_light_grid(TemplateModel(s, ORIGIN, d), s, d, ORIGIN, half_span=4, step=2)
        np.testing.assert_array_equal(g.lat_offsets, [-4, -2, 0, 2, 4])

    def test_bad_span(self):
        with pytest.raises(InputError):
            L.grid_axis(10, 3)


def constant_world(temp=12.0):
    times = np.arange(1538352000, 1538352000 + 4 * 86400, 3600, dtype=np.int64)
    series = []
    for k, (la, lo) in enumerate([(a, b) for a in range(20, 62, 3) for b in range(-140, -50, 3)]):
        series.append(WeatherStationSeries(f"W{k:04d}", GeoCoord(la, lo), times, np.full(times.size, temp)))
    store = WeatherStore(series)
    t = np.arange(float(times[0]), float(times[-1]), 15.0)
    sensor = SensorLog("S", t, np.ones(t.size), t, np.full(t.size, temp))
    return sensor, store


class TestTempGrid:

    def test_dimensions_and_flat_without_signal(self):
        sensor, store = constant_world()
        g = L.evaluate_temp_grid(GapModel(), sensor, store, date(2018, 10, 2), ORIGIN)
        assert g.shape == (21, 21)
        assert not g.missing.any()
        assert g.values.max() / g.values.min() < 2

    def test_offset_world_cells_match_pairs(self):
        sensor, store = constant_world()
        d = date(2018, 10, 2)
        g = L.evaluate_temp_grid(GapModel(), sensor, store, d, ORIGIN)
        cand = ORIGIN.offset(3, -4)
        pair = reshape.make_temp_pair(sensor, store, cand, d)
        assert g.values[13, 6] == pytest.approx(GapModel().score(pair.vector)[0], rel=1e-12)


class TestInterpolate:

    def test_constant(self):
        f = L.interpolate_grid(grid(np.full((21, 21), 0.3)))
        assert f.shape == (201, 201)
        assert np.all(f.values == 0.3)
        assert f.lat_offsets[0] == -10 and f.lat_offsets[-1] == pytest.approx(10, abs=1e-12)

    def test_nodes_preserved(self):
        v = np.random.default_rng(0).random((21, 21))
        f = L.interpolate_grid(grid(v))
        np.testing.assert_allclose(f.values[::10, ::10], v, rtol=0, atol=1e-12)

    def test_two_by_two_center(self):
        g = LikelihoodGrid(ORIGIN, [0.0, 1.0], [0.0, 1.0], [[0.0, 1.0], [1.0, 2.0]])
        f = L.interpolate_grid(g)
        assert f.shape == (11, 11)
        assert f.values[5, 5] == pytest.approx(1.0, abs=1e-15)
        assert f.values[5, 5] == pytest.approx(oracles.bilinear(0, 1, 1, 2, 0.5, 0.5))

    def test_matches_hand_bilinear(self):
        v = np.random.default_rng(1).random((3, 3))
        f = L.interpolate_grid(grid(v))
        i, j = 13, 4  # 1.3 rows, 0.4 cols into the coarse grid
        want = oracles.bilinear(v[1, 0], v[2, 0], v[1, 1], v[2, 1], 0.3, 0.4)
        assert f.values[i, j] == pytest.approx(want, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 7), st.integers(2, 7))
    def test_bounds_preserved(self, seed, n, m):
        v = np.random.default_rng(seed).random((n, m)) * 10
        f = L.interpolate_grid(grid(v))
        assert f.values.min() >= v.min() and f.values.max() <= v.max()

    def test_missing_filled_by_nearest(self):
        v = np.arange(9.0).reshape(3, 3)
        miss = np.zeros((3, 3), bool)
        miss[0, 0] = True
        f = L.fill_missing(grid(v, missing=miss))
        assert f.values[0, 0] in (1.0, 3.0)
        assert not f.missing.any()

    def test_all_missing(self):
        with pytest.raises(CoverageError):
            L.fill_missing(grid(np.zeros((3, 3)), missing=np.ones((3, 3), bool)))

    def test_degenerate(self):
        with pytest.raises(InputError):
            L.interpolate_grid(LikelihoodGrid(ORIGIN, [0.0], [0.0, 1.0], [[1.0, 2.0]]))
        with pytest.raises(InputError):
            L.interpolate_grid(grid(np.ones((3, 3))), fine_step=0.3)

    def test_invalid_grid(self):
        with pytest.raises(InputError):
            LikelihoodGrid(ORIGIN, [0.0, 0.0], [0.0, 1.0], np.ones((2, 2)))
        with pytest.raises(InputError):
            grid(-np.ones((2, 2)))
        with pytest.raises(InputError):
            LikelihoodGrid(ORIGIN, [0.0, 1.0], [0.0, 1.0], np.ones((3, 2)))


class TestFuse:

    def test_uniform_temp_keeps_light_argmax(self):
        v = np.random.default_rng(2).random((21, 21))
        fused = L.fuse(grid(v), grid(np.full((21, 21), 0.4)))
        assert L.estimate_day(fused).coord == L.estimate_day(grid(v)).coord
        assert fused.values.sum() == pytest.approx(1.0)
        assert fused.sources == ()

    def test_zero_grid_degenerate(self):
        fused = L.fuse(grid(np.ones((3, 3))), grid(np.zeros((3, 3))))
        assert fused.degenerate
        assert np.all(fused.values == 0)
        with pytest.raises(L.DegenerateGrid):
            L.estimate_day(fused)

    def test_axis_mismatch(self):
        with pytest.raises(InputError):
            L.fuse(grid(np.ones((3, 3))), grid(np.ones((3, 3)), step=2.0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from([7.3, 0.01, 1e4]))
    def test_scale_invariance(self, seed, k):
        rng = np.random.default_rng(seed)
        a, b = rng.random((9, 9)), rng.random((9, 9))
        base = L.estimate_day(L.fuse(grid(a), grid(b)))
        assert L.estimate_day(L.fuse(grid(a * k), grid(b))).coord == base.coord
        assert L.estimate_day(L.fuse(grid(a), grid(b * k))).coord == base.coord


class TestEstimateDay:

    def test_single_peak(self):
        v = np.zeros((21, 21))
        v[4, 15] = 1.0
        est = L.estimate_day(grid(v))
        assert (est.lat_offset, est.lon_offset) == (-6.0, 5.0)
        assert est.coord == GeoCoord(34.0, -95.0)
        assert est.peak == 1.0
        assert not est.ill_conditioned

    def test_tie_goes_to_center(self):
        v = np.zeros((21, 21))
        v[10, 13] = v[10, 2] = 1.0
        assert L.estimate_day(grid(v)).lon_offset == 3.0

    def test_tie_same_distance_is_lexicographic(self):
        v = np.zeros((21, 21))
        v[13, 10] = v[7, 10] = v[10, 7] = 1.0
        est = L.estimate_day(grid(v))
        assert (est.lat_offset, est.lon_offset) == (-3.0, 0.0)

    def test_ill_conditioned_ridge(self):
        v = np.zeros((21, 21))
        v[3:18, 10] = 1.0
        assert L.estimate_day(grid(v)).ill_conditioned

    def test_longitude_wraps(self):
        g = LikelihoodGrid(GeoCoord(0, 179.5), [0.0, 1.0], [0.0, 1.0], [[0, 1.0], [0, 0]])
        assert L.estimate_day(g).coord.lon == pytest.approx(-179.5)

    def test_half_max_widths(self):
        v = np.zeros((21, 21))
        v[10, 10] = 1.0
        v[8:13, 10] = 0.6
        v[10, 9:12] = 0.7
        v[10, 10] = 1.0
        assert L.half_max_widths(grid(v)) == (4.0, 2.0)


class TestExport:

    def test_csv(self):
        v = np.arange(6.0).reshape(2, 3)
        text = L.grid_csv(LikelihoodGrid(ORIGIN, [0.0, 1.0], [-1.0, 0.0, 1.0], v))
        lines = text.splitlines()
        assert lines[0] == "lat_offset,lon_offset,value"
        assert len(lines) == 7
        assert lines[6] == "1.0,1.0,5.0"

    def test_pgm(self):
        v = np.zeros((2, 3))
        v[1, 2] = 4.0  # north-east corner
        blob = L.grid_pgm(LikelihoodGrid(ORIGIN, [0.0, 1.0], [-1.0, 0.0, 1.0], v))
        assert blob.startswith(b"P5\n3 2\n255\n")
        pix = np.frombuffer(blob[len(b"P5\n3 2\n255\n"):], np.uint8).reshape(2, 3)
        assert pix[0, 2] == 255 and pix.sum() == 255

    def test_pgm_constant(self):
        blob = L.grid_pgm(grid(np.ones((3, 3))))
        assert set(blob[-9:]) == {0}


class TestBaseline:

    @pytest.mark.parametrize("coord", [GeoCoord(40, -100), GeoCoord(28, -82), GeoCoord(47, -122)])
    def test_clean_december(self, coord):
        d = date(2018, 12, 10)
        s = light_series(coord, d)
        est = L.baseline_localize(s, d, threshold=3.0)
        assert abs(est.coord.lat - coord.lat) < 1.0
        assert abs(est.coord.lon - coord.lon) < 0.5
        assert not est.ill_conditioned
        w = astro.night_window(coord, d)
        assert abs(est.sunset - w.sunset) < 10 * 60 and abs(est.sunrise - w.sunrise) < 10 * 60

    def test_equinox_flagged(self):
        d = date(2018, 9, 22)
        s = light_series(ORIGIN, d)
        assert L.baseline_localize(s, d, threshold=3.0).ill_conditioned

    def test_no_crossings(self):
        s = reshape.MinuteSeries(astro.utc_midnight(date(2018, 12, 1)), np.full(3 * 1440, 2.0))
        with pytest.raises(CoverageError):
            L.baseline_localize(s, date(2018, 12, 2), threshold=1.0)

    def test_crossing_interpolation(self):
        d = date(2018, 12, 1)
        t0 = astro.utc_midnight(d) + 12 * 3600
        v = np.full(1440, 3.0)
        v[600:900] = 0.0
        s = reshape.MinuteSeries(t0, v)
        sset, rise = L.night_crossings(s, d, [1.5])
        # half way between the last bright and the first dark minute midpoints
        assert sset[0] == pytest.approx(t0 + 30 + 60 * 599.5)
        assert rise[0] == pytest.approx(t0 + 30 + 60 * 899.5)

    def test_calibration_prefers_working_thresholds(self):
        coords = [GeoCoord(35, -90), GeoCoord(44, -110)]
        d = date(2018, 11, 20)
        days = [(light_series(c, d), d, c) for c in coords]
        th, err = L.calibrate_threshold(days)
        assert err.shape == L.THRESHOLDS.shape
        assert L.THRESHOLDS[0] == -1.5 and L.THRESHOLDS[-1] == 3.5
        # below the night floor no crossing exists and the penalty applies
        assert err[0] == L.FAIL_PENALTY_DEG
        assert err.min() < 1.0 and th > -0.9

    def test_calibration_needs_days(self):
        with pytest.raises(InputError):
            L.calibrate_threshold([])


# -- reference models ------------------------------------------------------------------------

def _near_equinox_rows(run, days):
    sel = run.test_days[[E.near_equinox(d, days) for d in run.test_days["date"]]]
    return sel.sort_values(["sensor_id", "date"])


def _estimate_errors(report, method):
    """Per-day rows of ``method`` within a week of the September equinox."""
    g = report.days[report.days["method"] == method]
    g = g[g["date"].map(E.near_equinox)]
    return g.set_index(["sensor_id", "date"])


class TestReferenceModels:

    def test_clean_december_argmax_within_2deg(self, reference_run):
        cfg = synth.SynthConfig(n_sensors=4, start=date(2018, 12, 2), end=date(2018, 12, 6),
                                cloud_strength=0.0, seed=8)
        world = synth.generate_world(cfg)
        d = date(2018, 12, 4)
        for sid, truth in world.truths.items():
            series = reshape.preprocess_log(world.logs.by_id(sid))
            grid = L.evaluate_light_grid(reference_run.localizer.light, series, d, truth)
            est = L.estimate_day(L.interpolate_grid(grid))
            assert abs(est.coord.lat - truth.lat) <= 2 and abs(est.coord.lon - truth.lon) <= 2

    def test_equinox_light_ridge_runs_north_south(self, reference_run):
        loc, world = reference_run.localizer, reference_run.world
        ratios = []
        for r in _near_equinox_rows(reference_run, 3).itertuples():
            series = reshape.preprocess_log(world.logs.by_id(r.sensor_id))
            grid = L.evaluate_light_grid(loc.light, series, r.date, GeoCoord(r.true_lat, r.true_lon))
            wlat, wlon = L.half_max_widths(L.interpolate_grid(grid))
            ratios.append(wlat / wlon if wlon > 0 else np.inf)
        assert len(ratios) > 10
        assert np.median(ratios) > 3

    def test_temp_grid_narrower_in_latitude(self, reference_run):
        loc, world = reference_run.localizer, reference_run.world
        days = reference_run.test_days
        rows = days.iloc[np.linspace(0, len(days) - 1, 40).astype(int)]
        widths = []
        for r in rows.itertuples():
            grid = L.evaluate_temp_grid(loc.temp, world.logs.by_id(r.sensor_id), world.store, r.date,
                                        GeoCoord(r.true_lat, r.true_lon))
            widths.append(L.half_max_widths(L.interpolate_grid(grid)))
        wlat, wlon = np.median(widths, axis=0)
        assert wlat < wlon

    def test_fused_closer_than_light_near_equinox(self, reference_run):
        light = _estimate_errors(reference_run.report, "light")
        fused = _estimate_errors(reference_run.report, "fused")
        both = light.join(fused, lsuffix="_light", rsuffix="_fused", how="inner")
        closer = both["lat_err_fused"].abs() < both["lat_err_light"].abs()
        assert len(both) > 50
        assert closer.mean() >= 0.8, f"fused closer on {closer.mean():.0%} of {len(both)} days"

    def test_ill_conditioned_flag_rates(self, reference_run):
        days = reference_run.report.days
        fused = days[days["method"] == "fused"]
        equinox = fused[fused["date"].map(E.near_equinox)]
        december = fused[fused["date"].map(lambda d: d.month == 12)]
        assert len(equinox) > 50 and len(december) > 50
        assert december["ill_conditioned"].mean() < 0.5
        assert equinox["ill_conditioned"].mean() > 0.5, \
            f"equinox flag rate {equinox['ill_conditioned'].mean():.0%}"

    def test_cloudy_equinox_baseline_worse(self, reference_run):
        cfg = synth.SynthConfig(n_sensors=8, start=date(2018, 9, 17), end=date(2018, 9, 28),
                                cloud_strength=0.7, seed=3)
        world = synth.generate_world(cfg)
        report = E.run_eval(world, world.manifest, reference_run.localizer, ("baseline", "fused"))
        base, _, nb = report.mae("baseline")
        fused, _, nf = report.mae("fused")
        assert nb > 40 and nf > 40
        assert base > 2 * fused, (base, fused)
