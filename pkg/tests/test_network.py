import json

import numpy as np
import pytest

from fullgrad import network as nw
from fullgrad.errors import DimensionError, ModelFormatError, SpecError
from fullgrad.models import desk_cnn, saturation_net

from conftest import randomize, random_conv_net


def small_spec(features=128):
    return nw.NetworkSpec(
        [nw.conv(3, 8, 3, padding=1), nw.relu(), nw.maxpool(2), nw.flatten(), nw.dense(features, 4)],
        (3, 8, 8),
        4,
    )


class TestValidate:
    def test_same_padding(self):
        spec = nw.NetworkSpec([nw.conv(3, 8, 3, padding=1), nw.flatten(), nw.dense(512, 2)], (3, 8, 8), 2)
        assert nw.validate_spec(spec)[0] == (8, 8, 8)

    def test_flatten_feeds_linear(self):
        assert nw.validate_spec(small_spec(128))[3] == (128,)

    def test_wrong_linear_width_named(self):
        with pytest.raises(SpecError) as info:
            nw.validate_spec(small_spec(100))
        assert info.value.layer == 4
        assert "layer 4" in str(info.value)

    def test_wrong_logit_count(self):
        spec = nw.NetworkSpec([nw.dense(3, 5)], (3,), 4)
        with pytest.raises(SpecError):
            nw.validate_spec(spec)

    def test_channel_mismatch(self):
        spec = nw.NetworkSpec([nw.conv(2, 4, 3), nw.flatten(), nw.dense(4, 2)], (3, 3, 3), 2)
        with pytest.raises(SpecError) as info:
            nw.validate_spec(spec)
        assert info.value.layer == 0

    def test_batchnorm_eps_positive(self):
        with pytest.raises((SpecError, ValueError)):
            nw.batchnorm(4, eps=0.0)

    def test_spec_round_trips_through_dict(self):
        spec = desk_cnn()
        assert nw.NetworkSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


class TestForward:
    def test_saturation_value(self):
        spec, params = saturation_net()
        logits, _ = nw.forward(spec, params, np.array([[2.0]]))
        assert logits[0, 0] == 1.0

    def test_bias_free_homogeneous(self, rng):
        spec, params = random_conv_net(rng, bias=False, batchnorm=False)
        x = rng.normal(size=(3,) + spec.input_shape)
        np.testing.assert_allclose(
            nw.forward(spec, params, 2 * x)[0], 2 * nw.forward(spec, params, x)[0], rtol=1e-12, atol=1e-14
        )

    def test_zero_input_bias_free(self, rng):
        spec, params = random_conv_net(rng, bias=False, batchnorm=False)
        logits, _ = nw.forward(spec, params, np.zeros((2,) + spec.input_shape))
        assert np.all(logits == 0.0)

    def test_eval_forward_is_pure(self, rng):
        spec, params = random_conv_net(rng)
        x = rng.normal(size=(4,) + spec.input_shape)
        before = params.copy()
        a, _ = nw.forward(spec, params, x)
        b, _ = nw.forward(spec, params, x)
        assert np.array_equal(a, b)
        for (_, _, u), (_, _, v) in zip(before.items(), params.items()):
            assert np.array_equal(u, v)

    def test_replay_bit_exact(self, rng):
        spec, params = random_conv_net(rng)
        logits, trace = nw.forward(spec, params, rng.normal(size=(3,) + spec.input_shape))
        assert len(trace) == len(spec.layers)
        assert np.array_equal(nw.replay(spec, params, trace), logits)
        assert np.array_equal(trace.logits, logits)

    def test_shape_mismatch(self):
        spec, params = saturation_net()
        with pytest.raises(DimensionError):
            nw.forward(spec, params, np.zeros((1, 2)))

    def test_train_mode_updates_running_stats(self, rng):
        spec = nw.NetworkSpec(
            [nw.conv(1, 2, 1, bias=False), nw.batchnorm(2), nw.flatten(), nw.dense(8, 2)], (1, 2, 2), 2
        )
        params = nw.init_params(spec, 0)
        x = rng.normal(3.0, 2.0, size=(16, 1, 2, 2))
        _, trace = nw.forward(spec, params, x, mode="train")
        z = trace.outputs[0]
        mean = z.mean(axis=(0, 2, 3))
        var = z.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(params[1]["running_mean"], nw.BN_MOMENTUM * mean)
        np.testing.assert_allclose(params[1]["running_var"], (1 - nw.BN_MOMENTUM) + nw.BN_MOMENTUM * var)
        # batch-normalised output is zero-mean per channel
        np.testing.assert_allclose(trace.outputs[1].mean(axis=(0, 2, 3)), 0.0, atol=1e-12)


class TestInit:
    def test_same_seed_identical(self):
        a, b = nw.init_params(desk_cnn(), 7), nw.init_params(desk_cnn(), 7)
        for (_, _, u), (_, _, v) in zip(a.items(), b.items()):
            assert np.array_equal(u, v)

    def test_different_seeds_differ(self):
        a, b = nw.init_params(desk_cnn(), 1), nw.init_params(desk_cnn(), 2)
        assert not np.array_equal(a[0]["weight"], b[0]["weight"])

    def test_he_variance(self):
        spec = nw.NetworkSpec([nw.dense(400, 300), nw.relu(), nw.dense(300, 2)], (400,), 2)
        w = nw.init_params(spec, 0)[0]["weight"]
        assert abs(w.var() / (2.0 / 400) - 1.0) < 0.2

    def test_biases_and_batchnorm_defaults(self):
        p = nw.init_params(desk_cnn(), 0)
        assert np.all(p[0]["bias"] == 0)
        assert np.all(p[1]["gamma"] == 1) and np.all(p[1]["beta"] == 0)
        assert np.all(p[1]["running_mean"] == 0) and np.all(p[1]["running_var"] == 1)


class TestModelFiles:
    @pytest.fixture
    def saved(self, tmp_path, rng):
        spec = desk_cnn()
        params = randomize(nw.init_params(spec, 3), rng)
        m, w = tmp_path / "model.json", tmp_path / "model.bin"
        nw.save_model(spec, params, m, w)
        return spec, params, m, w

    def test_round_trip(self, saved, rng):
        spec, params, m, w = saved
        spec2, params2 = nw.load_model(m, w)
        assert spec2 == spec
        x = rng.uniform(size=(5,) + spec.input_shape)
        a, _ = nw.forward(spec, params, x)
        b, _ = nw.forward(spec2, params2, x)
        assert np.abs(a - b).max() <= 1e-5 * max(1.0, np.abs(a).max())

    def test_blob_is_float32_little_endian(self, saved):
        _, params, _, w = saved
        assert w.stat().st_size == 4 * params.num_values()
        head = np.frombuffer(w.read_bytes()[:4], dtype="<f4")[0]
        assert head == np.float32(params[0]["weight"].flat[0])

    def test_truncated_blob(self, saved):
        _, _, m, w = saved
        w.write_bytes(w.read_bytes()[:-8])
        with pytest.raises(ModelFormatError, match="values"):
            nw.load_model(m, w)

    def test_bad_magic(self, saved):
        _, _, m, w = saved
        doc = json.loads(m.read_text())
        doc["magic"] = "NOPE"
        m.write_text(json.dumps(doc))
        with pytest.raises(ModelFormatError, match="magic"):
            nw.load_model(m, w)

    def test_permuted_manifest_caught_by_checksum(self, saved):
        _, _, m, w = saved
        doc = json.loads(m.read_text())
        tensors = doc["layers"][1]["tensors"]  # batch norm: four tensors of equal size
        offsets = [t["offset"] for t in tensors]
        tensors[0], tensors[1] = tensors[1], tensors[0]
        for t, off in zip(tensors, offsets):
            t["offset"] = off
        m.write_text(json.dumps(doc))
        with pytest.raises(ModelFormatError, match="checksum"):
            nw.load_model(m, w)

    def test_no_temp_files_left(self, saved, tmp_path):
        assert sorted(p.name for p in tmp_path.iterdir()) == ["model.bin", "model.json"]
