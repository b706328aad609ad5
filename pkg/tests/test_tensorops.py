import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinyfqa.tensorops import (
    bilinear_resize,
    channel_min_max,
    conv2d_strided,
    conv_output_size,
    to_grayscale,
)

from oracles import bilinear_reference, conv2d_reference, minmax_reference


class TestConv2dStrided:
    def test_published_shape_235_input(self, rng):
        image = rng.random((235, 235, 3))
        kernels = rng.normal(size=(4, 3, 7, 7))
        out = conv2d_strided(image, kernels, np.zeros(4), stride=5, padding=1)
        assert out.shape == (47, 47, 4)

    def test_delta_kernel_identity(self, rng):
        image = rng.random((9, 11, 1))
        delta = np.ones((1, 1, 1, 1))
        out = conv2d_strided(image, delta, np.zeros(1), stride=1, padding=0)
        assert np.array_equal(out[:, :, 0], image[:, :, 0])

    def test_matches_bruteforce_reference(self, rng):
        image = rng.random((16, 16, 3))
        kernels = rng.normal(size=(2, 3, 7, 7))
        bias = rng.normal(size=2)
        out = conv2d_strided(image, kernels, bias, stride=5, padding=1)
        ref = conv2d_reference(image, kernels, bias, stride=5, padding=1)
        assert out.shape == ref.shape
        assert np.abs(out - ref).max() < 1e-12

    def test_matches_reference_many_random_instances(self, rng):
        # the defining correctness sweep: 100+ random small geometries
        for _ in range(110):
            h, w = rng.integers(3, 15, size=2)
            kh = int(rng.integers(1, min(h, 6) + 1))
            kw = int(rng.integers(1, min(w, 6) + 1))
            c = int(rng.integers(1, 4))
            n = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 4))
            padding = int(rng.integers(0, 3))
            image = rng.normal(size=(h, w, c))
            kernels = rng.normal(size=(n, c, kh, kw))
            bias = rng.normal(size=n)
            out = conv2d_strided(image, kernels, bias, stride, padding)
            ref = conv2d_reference(image, kernels, bias, stride, padding)
            assert np.abs(out - ref).max() < 1e-12

    def test_linearity_zero_bias(self, rng):
        x = rng.normal(size=(20, 18, 3))
        y = rng.normal(size=(20, 18, 3))
        kernels = rng.normal(size=(2, 3, 5, 5))
        zero = np.zeros(2)
        a, b = 2.5, -1.25
        combined = conv2d_strided(a * x + b * y, kernels, zero, 2, 1)
        separate = a * conv2d_strided(x, kernels, zero, 2, 1) + b * conv2d_strided(
            y, kernels, zero, 2, 1
        )
        assert np.abs(combined - separate).max() < 1e-10 * max(
            1.0, np.abs(separate).max()
        )

    def test_channel_mismatch_raises(self, rng):
        with pytest.raises(ValueError, match="channel mismatch"):
            conv2d_strided(
                rng.random((8, 8, 2)), rng.normal(size=(1, 3, 3, 3)), np.zeros(1)
            )

    def test_kernel_larger_than_padded_input_raises(self, rng):
        with pytest.raises(ValueError, match="exceeds padded input"):
            conv2d_strided(
                rng.random((4, 4, 1)), rng.normal(size=(1, 1, 7, 7)), np.zeros(1)
            )

    def test_float32_inputs_stay_float32(self, rng):
        image = rng.random((16, 16, 3)).astype(np.float32)
        kernels = rng.normal(size=(1, 3, 3, 3)).astype(np.float32)
        out = conv2d_strided(image, kernels, np.zeros(1, dtype=np.float32))
        assert out.dtype == np.float32

    @settings(max_examples=80, deadline=None)
    @given(
        h=st.integers(1, 30),
        w=st.integers(1, 30),
        kh=st.integers(1, 8),
        kw=st.integers(1, 8),
        stride=st.integers(1, 6),
        padding=st.integers(0, 3),
    )
    def test_output_shape_follows_floor_formula(self, h, w, kh, kw, stride, padding):
        if kh > h + 2 * padding or kw > w + 2 * padding:
            with pytest.raises(ValueError):
                conv_output_size(h, kh, stride, padding)
                conv_output_size(w, kw, stride, padding)
            return
        image = np.zeros((h, w, 1))
        kernels = np.zeros((1, 1, kh, kw))
        out = conv2d_strided(image, kernels, np.zeros(1), stride, padding)
        assert out.shape[0] == (h + 2 * padding - kh) // stride + 1
        assert out.shape[1] == (w + 2 * padding - kw) // stride + 1


class TestChannelMinMax:
    def test_constant_grid(self):
        grid = np.full((4, 5, 3), 2.5)
        ext = channel_min_max(grid)
        assert np.all(ext.mins == 2.5) and np.all(ext.maxs == 2.5)
        assert np.all(ext.argmins == 0) and np.all(ext.argmaxs == 0)

    def test_row_major_sequence(self):
        grid = np.arange(9.0).reshape(3, 3, 1)
        ext = channel_min_max(grid)
        assert ext.mins[0] == 0 and ext.argmins[0] == 0
        assert ext.maxs[0] == 8 and ext.argmaxs[0] == 8

    def test_matches_exhaustive_scan(self, rng):
        grid = rng.normal(size=(5, 5, 4))
        ext = channel_min_max(grid)
        mins, maxs, argmins, argmaxs = minmax_reference(grid)
        assert np.array_equal(ext.mins, mins)
        assert np.array_equal(ext.maxs, maxs)
        assert np.array_equal(ext.argmins, argmins)
        assert np.array_equal(ext.argmaxs, argmaxs)

    def test_first_occurrence_under_duplicates(self, rng):
        # duplicated extremes: quantized values force ties
        grid = np.round(rng.random((5, 5, 4)) * 3) / 3.0
        ext = channel_min_max(grid)
        _, _, argmins, argmaxs = minmax_reference(grid)
        assert np.array_equal(ext.argmins, argmins)
        assert np.array_equal(ext.argmaxs, argmaxs)

    def test_bounds_every_entry(self, rng):
        grid = rng.normal(size=(6, 7, 3))
        ext = channel_min_max(grid)
        for k in range(3):
            assert np.all(grid[:, :, k] >= ext.mins[k])
            assert np.all(grid[:, :, k] <= ext.maxs[k])

    def test_empty_grid_raises(self):
        with pytest.raises(ValueError, match="empty"):
            channel_min_max(np.zeros((0, 3, 1)))


class TestToGrayscale:
    def test_white_is_one(self):
        assert to_grayscale(np.ones((1, 1, 3)))[0, 0, 0] == pytest.approx(1.0)

    def test_pure_red_coefficient(self):
        pixel = np.zeros((1, 1, 3))
        pixel[0, 0, 0] = 1.0
        assert to_grayscale(pixel)[0, 0, 0] == pytest.approx(0.299)

    def test_matches_per_pixel_formula(self, rng):
        image = rng.random((4, 6, 3))
        gray = to_grayscale(image)
        for r in range(4):
            for c in range(6):
                expected = (
                    0.299 * image[r, c, 0]
                    + 0.587 * image[r, c, 1]
                    + 0.114 * image[r, c, 2]
                )
                assert gray[r, c, 0] == pytest.approx(expected, abs=1e-12)

    def test_rejects_non_rgb(self, rng):
        with pytest.raises(ValueError, match=r"\(H, W, 3\)"):
            to_grayscale(rng.random((4, 4, 1)))


class TestBilinearResize:
    def test_identity_is_bit_exact(self, rng):
        image = rng.random((5, 7, 3)).astype(np.float32)
        out = bilinear_resize(image, 5, 7)
        assert np.array_equal(out, image)

    def test_linear_ramp_midpoint(self):
        image = np.array([[0.0, 1.0]]).reshape(1, 2, 1)
        out = bilinear_resize(image, 1, 3)
        assert np.allclose(out[0, :, 0], [0.0, 0.5, 1.0])

    def test_upsample_matches_closed_form(self, rng):
        ramp = (np.arange(16.0).reshape(4, 4) / 15.0)[..., None].repeat(2, axis=2)
        out = bilinear_resize(ramp, 7, 7)
        ref = bilinear_reference(ramp, 7, 7)
        assert np.abs(out - ref).max() < 1e-12

    def test_zero_target_raises(self, rng):
        with pytest.raises(ValueError, match="positive"):
            bilinear_resize(rng.random((4, 4, 1)), 0, 4)
