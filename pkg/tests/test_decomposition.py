import numpy as np
import pytest

from fullgrad import decomposition as D
from fullgrad import network as nw
from fullgrad.decomposition import (
    PostProcessor,
    completeness_residual,
    decompose,
    decompose_batch,
    fullgrad_saliency,
    layer_bias_map,
    postprocess,
)
from fullgrad.errors import CompletenessError, ConfigurationError, DimensionError
from fullgrad.models import desk_cnn, saturation_net

from conftest import randomize, random_conv_net


def same_size_net(rng):
    """Every bias map lives at input resolution and there are no dense biases."""
    spec = nw.NetworkSpec(
        [
            nw.conv(2, 3, 3, padding=1),
            nw.batchnorm(3),
            nw.relu(),
            nw.conv(3, 1, 3, padding=1),
            nw.relu(),
            nw.avgpool(6),
            nw.flatten(),
            nw.dense(1, 3, bias=False),
        ],
        (2, 6, 6),
        3,
    )
    return spec, randomize(nw.init_params(spec, 5), rng)


class TestDecompose:
    def test_saturation(self):
        spec, params = saturation_net()
        fg = decompose(spec, params, np.array([2.0]))
        assert fg.f_value == 1.0
        assert fg.input_gradient[0] * 2.0 == 0.0
        np.testing.assert_array_equal(fg.fc_bias_terms, [0.0, 1.0])
        assert completeness_residual(fg, np.array([2.0])) == 0.0

    def test_bias_free_has_no_terms(self, rng):
        spec, params = random_conv_net(rng, bias=False, batchnorm=False)
        x = rng.normal(size=spec.input_shape)
        fg = decompose(spec, params, x)
        assert fg.bias_maps == [] and fg.fc_bias_terms.size == 0
        assert abs(fg.f_value - np.sum(fg.input_gradient * x)) <= 1e-10 * max(1.0, abs(fg.f_value))

    def test_random_nets_complete(self, rng):
        for _ in range(10):
            spec, params = random_conv_net(rng)
            x = rng.normal(size=(10,) + spec.input_shape)
            for s, fg in enumerate(decompose_batch(spec, params, x)):
                assert abs(completeness_residual(fg, x[s])) <= 1e-8 * max(1.0, abs(fg.f_value))

    def test_smooth_activation_complete(self, rng):
        spec = nw.NetworkSpec(
            [nw.conv(1, 2, 3, padding=1), nw.sigmoid(), nw.flatten(), nw.dense(32, 4), nw.tanh(), nw.dense(4, 2)],
            (1, 4, 4),
            2,
        )
        params = randomize(nw.init_params(spec, 0), rng)
        x = rng.normal(size=(1, 4, 4))
        fg = decompose(spec, params, x, target=1)
        # sigmoid implicit bias is spatial, tanh implicit bias is not
        assert fg.layers() == [0, 1]
        assert abs(completeness_residual(fg, x)) <= 1e-8 * max(1.0, abs(fg.f_value))

    def test_trained_shape_model(self, rng):
        spec = desk_cnn()
        params = randomize(nw.init_params(spec, 1), rng, bias_scale=0.1)
        x = rng.uniform(size=(8,) + spec.input_shape)
        fgs = decompose_batch(spec, params, x)
        assert all(len(fg.bias_maps) == 8 + 8 + 16 + 16 for fg in fgs)

    def test_corrupted_entry_shifts_residual(self, rng):
        spec, params = random_conv_net(rng)
        x = rng.normal(size=spec.input_shape)
        fg = decompose(spec, params, x)
        fg.bias_maps[0][2][0, 0] += 1.0
        assert completeness_residual(fg, x) == pytest.approx(-1.0, abs=1e-9)

    def test_zero_network(self):
        spec = desk_cnn()
        params = nw.init_params(spec, 0)
        for _, name, arr in params.items():
            if name not in ("gamma", "running_var"):
                arr[...] = 0.0
        x = np.ones(spec.input_shape)
        fg = decompose(spec, params, x, target=0)
        assert fg.f_value == 0.0 and completeness_residual(fg, x) == 0.0

    def test_broken_backward_detected(self, rng, monkeypatch):
        spec, params = random_conv_net(rng)
        real = D.backward

        def broken(*a, **k):
            b = real(*a, **k)
            b.input_grad = b.input_grad + 1.0
            return b

        monkeypatch.setattr(D, "backward", broken)
        with pytest.raises(CompletenessError):
            decompose(spec, params, np.ones(spec.input_shape))

    def test_argmax_default_target(self, rng):
        spec, params = random_conv_net(rng)
        x = rng.normal(size=spec.input_shape)
        logits, _ = nw.forward(spec, params, x[None])
        assert decompose(spec, params, x).target == int(logits.argmax())


class TestLocality:
    def test_bias_gradient_depends_on_kernel_window(self, rng):
        # conv -> relu -> sum: the conv bias-gradient at i is b * [z_i > 0]
        spec = nw.NetworkSpec(
            [nw.conv(1, 1, 3, padding=1), nw.relu(), nw.flatten(), nw.dense(36, 1)], (1, 6, 6), 1
        )
        params = nw.Parameters(
            [
                {"weight": rng.normal(size=(1, 1, 3, 3)), "bias": np.array([0.3])},
                {},
                {},
                {"weight": np.ones((1, 36)), "bias": np.zeros(1)},
            ]
        )
        x = rng.normal(size=(1, 6, 6))
        base = decompose(spec, params, x).bias_maps[0][2]
        for j in np.ndindex(6, 6):
            for step in (-5.0, 5.0):
                xp = x.copy()
                xp[(0,) + j] += step
                changed = np.argwhere(decompose(spec, params, xp).bias_maps[0][2] != base)
                for i in changed:
                    assert max(abs(i[0] - j[0]), abs(i[1] - j[1])) <= 1


class TestPostprocess:
    def test_full(self):
        out = postprocess(np.array([[-2.0, 6.0]]), PostProcessor("full"))
        assert out.min() == 0.0 and out[0, 0] == 0.0
        assert out[0, 1] == pytest.approx(1.0)

    def test_noabs_keeps_sign(self):
        out = postprocess(np.array([[-2.0, 6.0]]), PostProcessor("noabs"))
        np.testing.assert_array_equal(out, [[-2.0, 6.0]])

    def test_absonly(self):
        out = postprocess(np.array([[-2.0, 6.0]]), PostProcessor("absonly"))
        np.testing.assert_array_equal(out, [[2.0, 6.0]])

    def test_constant_full_is_zero(self):
        assert np.all(postprocess(np.full((3, 3), 4.0), PostProcessor("full", (6, 6))) == 0)

    def test_upsamples(self):
        assert postprocess(np.ones((2, 2)), PostProcessor("noabs", (5, 7))).shape == (5, 7)

    def test_stack_rescaled_per_channel(self):
        stack = np.array([[[0.0, 1.0]], [[0.0, 100.0]]])
        np.testing.assert_allclose(postprocess(stack, PostProcessor("full")), [[[0, 1]], [[0, 1]]], atol=1e-9)

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            PostProcessor("sqrt")


class TestSaliency:
    def test_shape_and_sign(self, rng):
        spec, params = random_conv_net(rng)
        x = rng.normal(size=spec.input_shape)
        s = fullgrad_saliency(decompose(spec, params, x), x, PostProcessor("full"))
        assert s.shape == spec.input_shape[1:]
        assert np.all(s.values >= 0) and np.all(np.isfinite(s.values))

    def test_identity_psi_sums_to_output(self, rng):
        spec, params = same_size_net(rng)
        for x in rng.normal(size=(5,) + spec.input_shape):
            fg = decompose(spec, params, x)
            total = fullgrad_saliency(fg, x).values.sum()
            assert total == pytest.approx(fg.f_value, rel=1e-10, abs=1e-12)

    def test_identity_psi_needs_same_size(self, rng):
        spec = desk_cnn()
        params = randomize(nw.init_params(spec, 0), rng)
        x = rng.uniform(size=spec.input_shape)
        with pytest.raises(DimensionError):
            fullgrad_saliency(decompose(spec, params, x), x)

    def test_layer_maps_add_up(self, rng):
        spec = desk_cnn()
        params = randomize(nw.init_params(spec, 0), rng)
        x = rng.uniform(size=spec.input_shape)
        fg = decompose(spec, params, x)
        psi = PostProcessor("full")
        total = postprocess(fg.input_gradient * x, psi.sized((16, 16))).sum(axis=0)
        for layer in fg.layers():
            total = total + layer_bias_map(fg, layer, psi, (16, 16)).values
        np.testing.assert_allclose(total, fullgrad_saliency(fg, x, psi).values, rtol=1e-12)

    def test_single_conv_layer_map(self, rng):
        spec = nw.NetworkSpec([nw.conv(1, 2, 3), nw.relu(), nw.flatten(), nw.dense(8, 2)], (1, 4, 4), 2)
        params = randomize(nw.init_params(spec, 0), rng)
        x = rng.normal(size=(1, 4, 4))
        fg = decompose(spec, params, x)
        psi = PostProcessor("absonly", (4, 4))
        expected = sum(postprocess(m, psi) for _, _, m in fg.bias_maps)
        np.testing.assert_allclose(layer_bias_map(fg, 0, psi, (4, 4)).values, expected, rtol=1e-12)

    def test_zero_bias_layer_map(self, rng):
        spec = nw.NetworkSpec([nw.conv(1, 2, 3), nw.relu(), nw.flatten(), nw.dense(8, 2)], (1, 4, 4), 2)
        params = nw.init_params(spec, 0)
        x = rng.normal(size=(1, 4, 4))
        m = layer_bias_map(decompose(spec, params, x), 0, PostProcessor("full"), (4, 4))
        assert np.all(m.values == 0)

    def test_non_spatial_layer_rejected(self, rng):
        spec = nw.NetworkSpec([nw.conv(1, 2, 3), nw.relu(), nw.flatten(), nw.dense(8, 2)], (1, 4, 4), 2)
        params = randomize(nw.init_params(spec, 0), rng)
        x = rng.normal(size=(1, 4, 4))
        with pytest.raises(ConfigurationError):
            layer_bias_map(decompose(spec, params, x), 3, PostProcessor(), (4, 4))

    def test_batch_matches_single(self, rng):
        spec, params = random_conv_net(rng)
        x = rng.normal(size=(3,) + spec.input_shape)
        batch = D.fullgrad_saliency_batch(spec, params, x, psi=PostProcessor("noabs"))
        for s in range(3):
            single = fullgrad_saliency(decompose(spec, params, x[s]), x[s], PostProcessor("noabs"))
            np.testing.assert_allclose(batch[s], single.values, rtol=1e-12, atol=1e-15)
