from datetime import date

import numpy as np
import pytest

from lumitrack import astro, dataset, discriminators as D, evaluation as E, nn, reshape, synth
from lumitrack.astro import GeoCoord
from lumitrack.dataset import Dataset
from lumitrack.errors import InputError

from worlds import dense_config


def toy(n=600, dim=34, seed=0, separable=True):
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 4 == 0).astype(float)  # imbalanced 1:3
    X = rng.normal(15, 10, size=(n, dim))
    if separable:
        X[:, :4] += np.where(y[:, None] == 1, 30.0, -30.0)
    else:
        y = rng.permutation(y)
    ids = np.array([f"S{k % 20:03d}" for k in range(n)])
    return Dataset("temp", X, y, {"sensor_id": ids})


class TestArchitecture:

    def test_light_spec_shapes(self):
        shapes = D.LIGHT_SPEC.shapes()
        assert D.LIGHT_SPEC.input_shape == (1, 961)
        assert shapes[0] == (8, 479)
        assert shapes[-1] == (2,)
        assert D.LIGHT_SPEC.n_classes == 2

    def test_light_param_budget(self):
        params = nn.init_params(D.LIGHT_SPEC, np.random.default_rng(0))
        assert params.count() == 65074
        assert params.count() < 100_000

    def test_temp_spec(self):
        assert D.TEMP_SPEC.input_shape == (34,)
        params = nn.init_params(D.TEMP_SPEC, np.random.default_rng(0))
        assert params.count() == 34 * 64 + 64 + 64 * 16 + 16 + 16 * 2 + 2

    def test_conv_channels(self):
        convs = [l for l in D.LIGHT_SPEC.layers if isinstance(l, nn.Conv1D)]
        assert [c.out_ch for c in convs] == [8, 16, 32]
        assert {c.kernel for c in convs} == {5}

    def test_unknown_kind(self):
        with pytest.raises(InputError):
            D.prepare_inputs("sound", np.zeros((1, 3)))


class TestTraining:

    def test_separable_toy(self):
        model, report = D.train("temp", toy(), epochs=20, seed=1)
        assert report["history"][-1]["val_balanced_accuracy"] > 0.99
        assert len(report["history"]) == 20

    def test_shuffled_labels_are_chance(self):
        ds = toy(n=4000, separable=False, seed=3)
        model, _ = D.train("temp", ds, epochs=5, seed=1)
        held = toy(n=4000, separable=False, seed=4)
        bacc = D.balanced_accuracy(model.score(held.X), held.y)
        assert abs(bacc - 0.5) <= 0.05

    def test_deterministic(self):
        ds = toy(n=300)
        m1, r1 = D.train("temp", ds, epochs=3, seed=7)
        m2, r2 = D.train("temp", ds, epochs=3, seed=7)
        assert m1.params == m2.params
        assert r1 == r2
        assert m1.to_bytes() == m2.to_bytes()

    def test_seed_changes_result(self):
        ds = toy(n=300)
        assert D.train("temp", ds, epochs=1, seed=1)[0].params != D.train("temp", ds, epochs=1, seed=2)[0].params

    def test_single_class_rejected(self):
        ds = toy()
        ds = Dataset("temp", ds.X, np.zeros(len(ds)), ds.provenance)
        with pytest.raises(InputError):
            D.train("temp", ds, epochs=1)

    def test_bad_hyperparameters(self):
        with pytest.raises(InputError):
            D.train("temp", toy(), epochs=0)
        with pytest.raises(InputError):
            D.train("temp", toy(), lr=0.0)

    def test_wrong_width(self):
        ds = toy(dim=10)
        with pytest.raises(InputError):
            D.train("temp", ds, epochs=1)

    def test_divergence_reported(self, monkeypatch):
        calls = []
        real = nn.cross_entropy

        def flaky(probs, labels):
            calls.append(1)
            return float("nan") if len(calls) == 5 else real(probs, labels)

        monkeypatch.setattr(nn, "cross_entropy", flaky)
        with pytest.raises(D.TrainingDiverged, match="epoch 1") as exc:
            D.train("temp", toy(), epochs=3, seed=0)
        assert exc.value.checkpoint is not None
        assert not exc.value.checkpoint.training
        assert exc.value.exit_code == 4

    def test_non_finite_inputs_rejected(self):
        ds = toy()
        ds.X[3, 2] = np.nan
        with pytest.raises(InputError):
            D.train("temp", ds, epochs=1)

    def test_validation_split_whole_sensors(self):
        ds = toy(n=1000)
        tr, va = D.validation_split(ds, 0.1, seed=0)
        ids = ds.provenance["sensor_id"]
        assert not set(ids[tr]) & set(ids[va])
        assert tr.size + va.size == 1000
        assert 50 <= va.size <= 150


class TestMetrics:

    def test_balanced_accuracy(self):
        labels = np.array([1, 0, 0, 0])
        assert D.balanced_accuracy([0.9, 0.1, 0.2, 0.7], labels) == pytest.approx((1 + 2 / 3) / 2)
        assert D.balanced_accuracy([0.9, 0.1, 0.2, 0.3], labels) == 1.0


class TestPersistence:

    def test_round_trip_and_kind_detection(self, tmp_path):
        model, _ = D.train("temp", toy(n=200), epochs=1, seed=0)
        path = tmp_path / "temp.model"
        model.save(path)
        back = D.load_discriminator(path)
        assert back.kind == "temp"
        X = toy(n=50, seed=9).X
        np.testing.assert_array_equal(back.score(X), model.score(X))

    def test_light_detection(self):
        params = nn.init_params(D.LIGHT_SPEC, np.random.default_rng(0))
        params.training = False
        blob = D.Discriminator("light", D.LIGHT_SPEC, params).to_bytes()
        assert D.discriminator_from_bytes(blob).kind == "light"
        with pytest.raises(InputError, match="spec hash"):
            D.discriminator_from_bytes(blob, kind="temp")

    def test_training_mode_params_rejected(self):
        params = nn.init_params(D.TEMP_SPEC, np.random.default_rng(0))
        with pytest.raises(InputError):
            D.Discriminator("temp", D.TEMP_SPEC, params)


# -- trained on a small synthetic world ------------------------------------------------------

@pytest.fixture(scope="module")
def small_run():
    cfg = dense_config(n_sensors=12, n_days=40, start=date(2018, 9, 1), cloud_strength=0.5, seed=5)
    world = synth.generate_world(cfg)
    train_days, test_days = dataset.split_train_test(world.manifest, ratio=0.75, seed=0)
    lds = dataset.build_light_training_set(world, train_days, seed=0)
    tds = dataset.build_temp_training_set(world, train_days, seed=0)
    light, lrep = D.train("light", lds, epochs=3, seed=0)
    temp, trep = D.train("temp", tds, epochs=15, seed=0)
    return world, train_days, test_days, light, temp, lrep, trep


def _test_rows(run):
    world, _, test_days, *_ = run
    for sid, g in test_days.groupby("sensor_id"):
        log = world.logs.by_id(sid)
        series = reshape.preprocess_log(log)
        for r in g.itertuples():
            yield log, series, r.date, GeoCoord(r.true_lat, r.true_lon)


class TestTrainedOnSyntheticWorld:

    def test_training_days(self, small_run):
        _, train_days, test_days, _, _, lrep, _ = small_run
        assert len(train_days) >= 300
        assert lrep["history"][-1]["val_balanced_accuracy"] > 0.85

    def test_held_out_light_accuracy(self, small_run):
        world, _, test_days, light, *_ = small_run
        ds = dataset.build_light_training_set(world, test_days, seed=1)
        assert D.balanced_accuracy(light.score(ds.X), ds.y) > 0.85

    def test_scores_in_unit_interval_and_deterministic(self, small_run):
        light = small_run[3]
        log, series, d, truth = next(_test_rows(small_run))
        curve = reshape.reshape_light(series, truth, d)
        s1, s2 = D.score_light(light, curve), D.score_light(light, curve)
        assert s1 == s2 and 0.0 <= s1 <= 1.0
        with pytest.raises(InputError):
            D.score_temp(light, reshape.make_temp_pair(log, small_run[0].store, truth, d))

    def test_matched_beats_two_hour_shift(self, small_run):
        light = small_run[3]
        wins = []
        for _, series, d, truth in _test_rows(small_run):
            win = astro.night_window(truth, d)
            good = reshape.reshape_window(series, win)
            bad = reshape.reshape_window(series, win.shifted(dcenter=2 * 3600))
            wins.append(light.score(good)[0] > light.score(bad)[0])
        assert np.mean(wins) >= 0.95

    def test_truth_station_beats_far_station(self, small_run):
        world, *_, temp, _, _ = small_run
        wins = []
        for log, _, d, truth in _test_rows(small_run):
            near = reshape.make_temp_pair(log, world.store, truth, d)
            far = reshape.make_temp_pair(log, world.store, truth.offset(15, 0), d)
            wins.append(D.score_temp(temp, near) > D.score_temp(temp, far))
        assert np.mean(wins) >= 0.90


# -- reference models ------------------------------------------------------------------------

def _reference_rows(run, near=None):
    for sid, g in run.test_days.groupby("sensor_id"):
        log = run.world.logs.by_id(sid)
        series = reshape.preprocess_log(log)
        for r in g.itertuples():
            if near is None or E.near_equinox(r.date, near):
                yield log, series, r.date, GeoCoord(r.true_lat, r.true_lon)


class TestReferenceModels:

    def test_light_median_non_increasing_with_center_offset(self, reference_run):
        light = reference_run.localizer.light
        shifts = (0, 30, 60, 120)
        curves = {m: [] for m in shifts}
        for _, series, d, truth in _reference_rows(reference_run):
            win = astro.night_window(truth, d)
            for m in shifts:
                curves[m].append(reshape.reshape_window(series, win.shifted(dcenter=m * 60)))
        med = [np.median(light.score(np.array(curves[m]))) for m in shifts]
        # probabilities carry no meaning below the 1e-9 normalisation tolerance
        assert all(a >= b - 1e-9 for a, b in zip(med, med[1:])), med
        assert med[0] > med[-1] + 0.5

    def test_temperature_more_sensitive_to_latitude(self, reference_run):
        temp, store = reference_run.localizer.temp, reference_run.world.store
        drops = {"lat": [], "lon": []}
        for log, _, d, truth in _reference_rows(reference_run):
            base = D.score_temp(temp, reshape.make_temp_pair(log, store, truth, d))
            for key, off in (("lat", (10, 0)), ("lon", (0, 10))):
                pair = reshape.make_temp_pair(log, store, truth.offset(*off), d)
                drops[key].append(base - D.score_temp(temp, pair))
        assert np.median(drops["lat"]) > np.median(drops["lon"])

    def test_equinox_light_more_sensitive_to_longitude(self, reference_run):
        light = reference_run.localizer.light
        drops = {"lat": [], "lon": []}
        for _, series, d, truth in _reference_rows(reference_run, near=3):
            base = light.score(reshape.reshape_light(series, truth, d).values)[0]
            for key, off in (("lat", (5, 0)), ("lon", (0, 5))):
                drops[key].append(base - light.score(reshape.reshape_light(series, truth.offset(*off), d).values)[0])
        assert len(drops["lat"]) > 10
        assert np.median(drops["lon"]) > np.median(drops["lat"])
