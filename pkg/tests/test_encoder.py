"""Toy convolutional encoder: forward shapes, exact backward, checkpoints."""

import numpy as np
import pytest

from sfr.encoder import (
    ConvLayer,
    EncoderParams,
    ToyImage,
    conv2d_valid,
    encode,
    encode_backward,
    encode_raw,
    init_params,
    load_params,
    save_params,
)
from sfr.errors import FormatError, MismatchError
from sfr.oracle import finite_difference, relative_error


def random_image(rng, c, h, w):
    return ToyImage(rng.uniform(0.0, 1.0, size=(c, h, w)))


def expected_shape(h, w, layer_specs):
    # symbolic shape calculator: valid conv then optional floor-halving
    for _, _, k, down in layer_specs:
        h, w = h - k + 1, w - k + 1
        if down:
            h, w = h // 2, w // 2
    return h, w


class TestInit:
    def test_same_seed_bit_identical(self):
        spec = ((4, 1, 3, True), (8, 4, 3, False))
        a = init_params(spec, 11)
        b = init_params(spec, 11)
        for la, lb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(la.kernel, lb.kernel)
            np.testing.assert_array_equal(la.bias, lb.bias)

    def test_different_seeds_differ(self):
        spec = ((4, 1, 3, False),)
        assert not np.array_equal(init_params(spec, 1).layers[0].kernel, init_params(spec, 2).layers[0].kernel)

    def test_zero_layer_identity_adapter(self):
        params = init_params((), 0)
        rng = np.random.default_rng(0)
        img = ToyImage(rng.uniform(0, 1, (3, 4, 5)).astype(np.float32))
        out = encode(img, params)
        np.testing.assert_array_equal(out.values, img.values.astype(np.float32))

    def test_fan_in_scale_and_zero_bias(self):
        params = init_params(((64, 4, 3, False),), 5)
        kernel = params.layers[0].kernel
        assert abs(kernel.std() - 1.0 / np.sqrt(4 * 9)) < 0.02
        assert abs(kernel.mean()) < 0.01
        np.testing.assert_array_equal(params.layers[0].bias, 0.0)

    def test_broken_chain_rejected(self):
        with pytest.raises(ValueError, match="chain"):
            init_params(((4, 1, 3, False), (4, 8, 3, False)), 0)


class TestEncode:
    def test_unit_1x1_kernel_is_rectified_identity(self):
        layer = ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1), False)
        params = EncoderParams((layer,))
        img = ToyImage(np.array([[[0.2, 0.8], [0.0, 1.0]]]))
        out = encode_raw(img, params)
        np.testing.assert_array_equal(out, np.maximum(img.values, 0.0))

    def test_spec_shape_example(self):
        # 32x16 input, two k=3 layers with downsampling: 30x14 -> 15x7 -> 13x5 -> 6x2
        spec = ((4, 1, 3, True), (4, 4, 3, True))
        params = init_params(spec, 0)
        rng = np.random.default_rng(0)
        out = encode(random_image(rng, 1, 32, 16), params)
        assert (out.height, out.width) == (6, 2)

    def test_shape_law_random_stacks(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            depth = int(rng.integers(1, 4))
            specs = []
            in_c = 1
            for _ in range(depth):
                out_c = int(rng.integers(1, 5))
                specs.append((out_c, in_c, int(rng.integers(1, 4)), bool(rng.integers(0, 2))))
                in_c = out_c
            h, w = int(rng.integers(10, 30)), int(rng.integers(10, 30))
            eh, ew = expected_shape(h, w, specs)
            if eh < 1 or ew < 1:
                continue
            out = encode(random_image(rng, 1, h, w), init_params(specs, 1))
            assert (out.height, out.width) == (eh, ew)

    def test_too_small_input(self):
        params = init_params(((2, 1, 5, False),), 0)
        rng = np.random.default_rng(1)
        with pytest.raises(ValueError, match="smaller"):
            encode(random_image(rng, 1, 4, 4), params)

    def test_channel_mismatch(self):
        params = init_params(((2, 3, 3, False),), 0)
        rng = np.random.default_rng(2)
        with pytest.raises(MismatchError):
            encode(random_image(rng, 1, 8, 8), params)

    def test_conv_linear_before_rectification(self):
        rng = np.random.default_rng(3)
        kernel = rng.standard_normal((3, 2, 3, 3))
        x = rng.standard_normal((2, 6, 7))
        doubled = conv2d_valid(2.0 * x, kernel, np.zeros(3))
        np.testing.assert_allclose(doubled, 2.0 * conv2d_valid(x, kernel, np.zeros(3)), rtol=1e-12)


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        rng = np.random.default_rng(4)
        params = init_params(((3, 1, 3, True),), 4)
        img = random_image(rng, 1, 10, 9)
        out = encode_raw(img, params)
        grads = encode_backward(img, params, np.zeros_like(out))
        for g in grads:
            np.testing.assert_array_equal(g.kernel, 0.0)
            np.testing.assert_array_equal(g.bias, 0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        spec = ((3, 1, 3, True), (5, 3, 3, False))
        params = init_params(spec, 42)
        assert params.parameter_count() <= 5000
        img = random_image(rng, 1, 12, 11)
        upstream = rng.standard_normal(encode_raw(img, params).shape)

        for li in range(len(params.layers)):
            grads = encode_backward(img, params, upstream)

            def f_kernel(kernel, li=li):
                layers = list(params.layers)
                layers[li] = ConvLayer(kernel, params.layers[li].bias, params.layers[li].downsample)
                return float(np.sum(upstream * encode_raw(img, EncoderParams(tuple(layers)))))

            fd = finite_difference(f_kernel, params.layers[li].kernel, 1e-6)
            assert relative_error(grads[li].kernel, fd) < 1e-4

            def f_bias(bias, li=li):
                layers = list(params.layers)
                layers[li] = ConvLayer(params.layers[li].kernel, bias, params.layers[li].downsample)
                return float(np.sum(upstream * encode_raw(img, EncoderParams(tuple(layers)))))

            fd_b = finite_difference(f_bias, params.layers[li].bias, 1e-6)
            assert relative_error(grads[li].bias, fd_b) < 1e-4

    def test_dead_unit_gets_zero_gradient(self):
        # output channel 1 has a very negative bias: rectification kills it
        rng = np.random.default_rng(5)
        kernel = rng.standard_normal((2, 1, 3, 3)) * 0.1
        bias = np.array([0.0, -100.0])
        params = EncoderParams((ConvLayer(kernel, bias, False),))
        img = random_image(rng, 1, 8, 8)
        upstream = rng.standard_normal(encode_raw(img, params).shape)
        grads = encode_backward(img, params, upstream)
        np.testing.assert_array_equal(grads[0].kernel[1], 0.0)
        assert grads[0].bias[1] == 0.0
        assert np.abs(grads[0].kernel[0]).max() > 0

    def test_upstream_shape_checked(self):
        rng = np.random.default_rng(6)
        params = init_params(((2, 1, 3, False),), 0)
        img = random_image(rng, 1, 8, 8)
        with pytest.raises(MismatchError):
            encode_backward(img, params, np.zeros((2, 3, 3)))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_params(((4, 1, 3, True), (8, 4, 5, False)), 9)
        path = tmp_path / "enc.sfrf"
        save_params(params, path)
        loaded = load_params(path)
        assert len(loaded.layers) == 2
        for a, b in zip(loaded.layers, params.layers):
            assert a.downsample == b.downsample
            np.testing.assert_allclose(a.kernel, b.kernel, atol=1e-6)
            np.testing.assert_allclose(a.bias, b.bias, atol=1e-6)

    def test_file_level_round_trip_exact(self, tmp_path):
        params = init_params(((3, 1, 3, True),), 2)
        a, b = tmp_path / "a.sfrf", tmp_path / "b.sfrf"
        save_params(params, a)
        save_params(load_params(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_identity_adapter_checkpoint(self, tmp_path):
        path = tmp_path / "empty.sfrf"
        save_params(init_params((), 0), path)
        assert load_params(path).layers == ()

    def test_truncated_payload(self, tmp_path):
        params = init_params(((2, 1, 3, False),), 1)
        path = tmp_path / "enc.sfrf"
        save_params(params, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError, match="payload"):
            load_params(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "enc.sfrf"
        path.write_bytes(b"YYYY" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_params(path)


class TestToyImage:
    def test_range_enforced(self):
        with pytest.raises(ValueError):
            ToyImage(np.array([[[1.5]]]))
        with pytest.raises(ValueError):
            ToyImage(np.array([[[-0.1]]]))
