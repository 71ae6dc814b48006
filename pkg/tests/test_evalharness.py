import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fullgrad import network as nw
from fullgrad.data import Dataset, make_bars
from fullgrad.errors import ConfigurationError, DimensionError, TrainingDivergedError
from fullgrad.evalharness import (
    EvalCurve,
    TrainConfig,
    curves_to_csv,
    curves_to_json,
    digit_flip_delta_logodds,
    evaluate_accuracy,
    mnist_pixel_perturbation,
    perturb_least_salient,
    perturb_most_salient,
    pixel_perturbation_curve,
    removal_mask,
    roar_run,
    sgd_train,
)
from fullgrad.models import desk_cnn


def tiny_cnn(size=16):
    spec = nw.NetworkSpec(
        [nw.conv(1, 4, 3, padding=1), nw.batchnorm(4), nw.relu(), nw.maxpool(2), nw.flatten(), nw.dense(4 * (size // 2) ** 2, 10)],
        (1, size, size),
        10,
    )
    return spec


@pytest.fixture(scope="module")
def small_bars():
    return make_bars(200, seed=5, size=16)


class TestRemoval:
    def test_two_by_two(self):
        x = np.ones((1, 2, 2))
        out = perturb_least_salient(x, np.array([[0.1, 0.2], [0.3, 0.4]]), 25)
        np.testing.assert_array_equal(out[0], [[0, 1], [1, 1]])

    def test_most_salient(self):
        x = np.ones((1, 2, 2))
        out = perturb_most_salient(x, np.array([[0.1, 0.2], [0.3, 0.4]]), 25)
        np.testing.assert_array_equal(out[0], [[1, 1], [1, 0]])

    def test_k_zero_and_hundred(self, rng):
        x = rng.uniform(size=(3, 5, 5))
        s = rng.normal(size=(5, 5))
        np.testing.assert_array_equal(perturb_least_salient(x, s, 0), x)
        assert np.all(perturb_least_salient(x, s, 100, fill=0.25) == 0.25)

    def test_all_channels_filled(self, rng):
        x = rng.uniform(0.5, 1.0, size=(3, 4, 4))
        out = perturb_least_salient(x, np.arange(16.0).reshape(4, 4), 50)
        assert np.all(out[:, :2] == 0) and np.array_equal(out[:, 2:], x[:, 2:])

    def test_constant_map_tie_break(self):
        mask = removal_mask(np.zeros((3, 3)), 40)
        assert mask.sum() == 3
        np.testing.assert_array_equal(np.flatnonzero(mask), [0, 1, 2])
        np.testing.assert_array_equal(np.flatnonzero(removal_mask(np.zeros((3, 3)), 40, True)), [0, 1, 2])

    def test_count_is_floor(self):
        assert removal_mask(np.arange(10.0).reshape(2, 5), 15).sum() == math.floor(1.5)
        assert removal_mask(np.zeros((16, 16)), 10).sum() == 25

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            perturb_least_salient(np.zeros((1, 3, 3)), np.zeros((4, 4)), 10)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            removal_mask(np.zeros((2, 2)), 101)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (5, 5), elements=st.integers(-20, 20).map(lambda v: v / 4)),
    st.sampled_from([1, 10, 37, 50, 90]),
)
def test_selection_depends_only_on_order(s, k):
    # quarter-step values stay distinct under exp, so both maps are strictly increasing
    base = removal_mask(s, k)
    assert np.array_equal(base, removal_mask(np.exp(s), k))
    assert np.array_equal(base, removal_mask(3.0 * s + 1.0, k))


class TestCurves:
    def test_needs_zero(self):
        with pytest.raises(ValueError):
            EvalCurve("x", [1, 2], [0.1, 0.2], [0, 0], 3)

    def test_csv_and_json(self):
        c = EvalCurve("fullgrad[full]", [0, 5], [0.0, 0.25], [0.0, 0.125], 7, [0])
        rows = list(csv.reader(io.StringIO(curves_to_csv([c]))))
        assert rows[0] == ["method", "k", "mean", "stddev", "n"]
        assert rows[2] == ["fullgrad[full]", "5.0", "0.25", "0.125", "7"]
        assert json.loads(curves_to_json([c]))[0]["values"] == [0.0, 0.25]

    def test_pixel_curve_zero_and_deterministic(self, trained_model, bars_data):
        spec, params, _ = trained_model
        data = bars_data[1].subset(np.arange(40))
        a = pixel_perturbation_curve(spec, params, data, "fullgrad", [0, 5, 20], seed=3)
        b = pixel_perturbation_curve(spec, params, data, "fullgrad", [0, 5, 20], seed=3)
        assert sorted(a) == ["fullgrad[full]", "random"]
        for label in a:
            assert a[label].at(0) == 0.0
            assert a[label].values == b[label].values
        assert a["fullgrad[full]"].n_samples == 40

    def test_removal_fraction_zero(self, trained_model, bars_data):
        spec, params, _ = trained_model
        data = bars_data[1].subset(np.arange(20))
        curves = mnist_pixel_perturbation(spec, params, data, rf_grid=(0.5,))
        assert set(curves) == {"random", "gradient", "ig", "fullgrad[absonly]", "fullgrad[noabs]"}
        assert all(c.at(0) == 0.0 for c in curves.values())


class TestTraining:
    def test_deterministic(self, small_bars):
        cfg = TrainConfig(epochs=1, batch_size=32, seed=4)
        a, log_a = sgd_train(tiny_cnn(), small_bars, cfg)
        b, log_b = sgd_train(tiny_cnn(), small_bars, cfg)
        assert log_a == log_b
        for (_, _, u), (_, _, v) in zip(a.items(), b.items()):
            assert np.array_equal(u, v)

    def test_zero_lr_keeps_weights(self, small_bars):
        spec = tiny_cnn()
        trained, _ = sgd_train(spec, small_bars, TrainConfig(epochs=1, lr=0.0, seed=2))
        init = nw.init_params(spec, 2)
        for (_, _, u), (_, _, v) in zip(trained.items(trainable_only=True), init.items(trainable_only=True)):
            assert np.array_equal(u, v)

    def test_initial_loss_near_uniform(self, small_bars):
        _, log = sgd_train(desk_cnn(), small_bars, TrainConfig(epochs=0))
        assert abs(log[0]["loss"] - math.log(10)) <= 0.1 * math.log(10)

    def test_overfits_ten_samples(self):
        data = make_bars(10, seed=8, size=16)
        spec = tiny_cnn()
        params, _ = sgd_train(spec, data, TrainConfig(epochs=60, batch_size=5, lr=0.05))
        assert evaluate_accuracy(spec, params, data) == 1.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self, small_bars):
        with pytest.raises(TrainingDivergedError) as info:
            sgd_train(tiny_cnn(), small_bars, TrainConfig(epochs=5, lr=1e150, momentum=0.0))
        assert info.value.epoch >= 1

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestRoar:
    def test_k_zero_and_full_removal(self, small_bars):
        spec = tiny_cnn()
        cfg = TrainConfig(epochs=2, batch_size=32)
        params, _ = sgd_train(spec, small_bars, cfg)
        test = make_bars(100, seed=6, size=16, split="test")
        curve = roar_run(spec, params, small_bars, test, "fullgrad", [0, 100], seeds=[1, 2], config=cfg)
        baseline = np.mean(
            [evaluate_accuracy(spec, sgd_train(spec, small_bars, TrainConfig(epochs=2, batch_size=32, seed=s))[0], test) for s in (1, 2)]
        )
        assert curve.at(0) == pytest.approx(baseline, abs=0)
        majority = np.bincount(test.labels).max() / len(test)
        assert curve.at(100) <= majority
        assert curve.seeds == [1, 2] and len(curve.metadata["accuracies"]["0"]) == 2


class TestDigitFlip:
    def test_k_zero(self, trained_model, bars_data):
        spec, params, _ = trained_model
        eights = bars_data[1].of_class(8).subset(np.arange(10))
        mean, std, deltas = digit_flip_delta_logodds(spec, params, eights, "fullgrad", k=0)
        assert mean == 0.0 and std == 0.0 and deltas.shape == (10,)

    @pytest.mark.parametrize("method", ["smoothgradsq", "gradcam"])
    def test_unsigned_rejected(self, trained_model, bars_data, method):
        spec, params, _ = trained_model
        with pytest.raises(ConfigurationError):
            digit_flip_delta_logodds(spec, params, bars_data[1].of_class(8), method, k=10)


class TestDataset:
    def test_bars_shapes_and_range(self):
        d = make_bars(50, seed=0)
        assert d.images.shape == (50, 1, 16, 16)
        assert d.images.min() >= 0 and d.images.max() <= 1
        assert set(np.unique(d.labels)) <= set(range(10))

    def test_bars_seeded(self):
        assert np.array_equal(make_bars(20, seed=3).images, make_bars(20, seed=3).images)
        assert not np.array_equal(make_bars(20, seed=3).images, make_bars(20, seed=4).images)

    def test_label_range_checked(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1, 2, 2)), [0, 10])
