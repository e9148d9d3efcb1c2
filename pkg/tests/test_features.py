"""Feature map pooling, normalization, and the SFRF binary container."""

import numpy as np
import pytest

from sfr.errors import FormatError
from sfr.features import (
    DEFAULT_PYRAMID,
    FeatureMatrix,
    GlobalFeature,
    PyramidSpec,
    SpatialFeatureMap,
    global_average_pool,
    l2_normalize_columns,
    load_feature_map,
    load_pooled,
    pyramid_pool,
    save_feature_map,
    save_pooled,
)


def random_map(rng, c, h, w):
    return SpatialFeatureMap(rng.standard_normal((c, h, w)).astype(np.float32))


def loop_pool(values, kernels, stride=1):
    """Window-enumeration oracle: plain nested loops, one column per window."""
    c, h, w = values.shape
    cols = []
    for k in kernels:
        if k > min(h, w):
            continue
        for i in range(0, h - k + 1, stride):
            for j in range(0, w - k + 1, stride):
                cols.append(values[:, i:i + k, j:j + k].reshape(c, -1).mean(axis=1))
    return np.array(cols).T


class TestSfrfRoundTrip:
    def test_single_zero_entry(self, tmp_path):
        path = tmp_path / "one.sfrf"
        save_feature_map(SpatialFeatureMap(np.zeros((1, 1, 1), dtype=np.float32)), path)
        loaded = load_feature_map(path)
        assert (loaded.channels, loaded.height, loaded.width) == (1, 1, 1)
        assert loaded.values[0, 0, 0] == 0.0

    def test_random_map_bit_exact(self, tmp_path):
        rng = np.random.default_rng(42)
        fmap = random_map(rng, 16, 8, 4)
        path = tmp_path / "m.sfrf"
        save_feature_map(fmap, path)
        assert np.array_equal(load_feature_map(path).values, fmap.values)

    def test_payload_length(self, tmp_path):
        rng = np.random.default_rng(0)
        fmap = random_map(rng, 3, 5, 2)
        path = tmp_path / "m.sfrf"
        save_feature_map(fmap, path)
        data = path.read_bytes()
        assert len(data) - 4 == 16 + 4 * 3 * 5 * 2  # after the magic: header + binary32 grid

    def test_save_deterministic(self, tmp_path):
        rng = np.random.default_rng(1)
        fmap = random_map(rng, 2, 3, 3)
        a, b = tmp_path / "a.sfrf", tmp_path / "b.sfrf"
        save_feature_map(fmap, a)
        save_feature_map(fmap, b)
        assert a.read_bytes() == b.read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_feature_map(tmp_path / "nope.sfrf")

    def test_unwritable_destination(self, tmp_path):
        fmap = SpatialFeatureMap(np.zeros((1, 1, 1), dtype=np.float32))
        with pytest.raises(OSError):
            save_feature_map(fmap, tmp_path / "no" / "such" / "dir" / "m.sfrf")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sfrf"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(FormatError, match="magic"):
            load_feature_map(path)

    def test_bad_version(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "v.sfrf"
        save_feature_map(random_map(rng, 1, 2, 2), path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version"):
            load_feature_map(path)

    def test_declared_512_but_500_floats(self, tmp_path):
        import struct

        path = tmp_path / "short.sfrf"
        header = struct.pack("<4sIIII", b"SFRF", 1, 8, 8, 8)  # declares 512 values
        path.write_bytes(header + b"\x00" * (4 * 500))
        with pytest.raises(FormatError, match="500"):
            load_feature_map(path)

    def test_trailing_bytes(self, tmp_path):
        rng = np.random.default_rng(3)
        path = tmp_path / "t.sfrf"
        save_feature_map(random_map(rng, 1, 2, 2), path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_feature_map(path)

    def test_non_finite_payload(self, tmp_path):
        path = tmp_path / "nan.sfrf"
        values = np.array([[[np.nan]]], dtype=np.float32)
        import struct

        path.write_bytes(struct.pack("<4sIIII", b"SFRF", 1, 1, 1, 1) + values.tobytes())
        with pytest.raises(FormatError, match="non-finite"):
            load_feature_map(path)


class TestGlobalAveragePool:
    def test_constant_field(self):
        fmap = SpatialFeatureMap(np.full((4, 3, 5), 3.5, dtype=np.float32))
        np.testing.assert_allclose(global_average_pool(fmap).values, 3.5)

    def test_two_by_two_mean(self):
        fmap = SpatialFeatureMap(np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32))
        np.testing.assert_allclose(global_average_pool(fmap).values, [2.5])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(42)
        fmap = random_map(rng, 2, 4, 6)
        expected = [
            sum(float(fmap.values[c, i, j]) for i in range(4) for j in range(6)) / 24.0
            for c in range(2)
        ]
        np.testing.assert_allclose(global_average_pool(fmap).values, expected, rtol=1e-10)

    def test_full_grid_mean_when_not_square(self):
        # GAP is the full-grid mean; equal to a single min(H, W)-kernel pyramid
        # column only on square grids.
        rng = np.random.default_rng(5)
        square = random_map(rng, 3, 4, 4)
        col = pyramid_pool(square, PyramidSpec((4,))).columns[:, 0]
        np.testing.assert_allclose(global_average_pool(square).values, col, rtol=1e-12)

        rect = random_map(rng, 3, 4, 6)
        col = pyramid_pool(rect, PyramidSpec((4,))).columns
        gap = global_average_pool(rect).values
        assert col.shape[1] == 3
        assert not np.allclose(gap, col[:, 0])


class TestPyramidPool:
    def test_8x4_default_kernels_gives_70(self):
        rng = np.random.default_rng(7)
        pooled = pyramid_pool(random_map(rng, 4, 8, 4))
        assert pooled.count == 70  # 32 + 21 + 12 + 5
        assert pooled.dim == 4

    def test_4x4_gives_30(self):
        rng = np.random.default_rng(8)
        assert pyramid_pool(random_map(rng, 2, 4, 4)).count == 30  # 16 + 9 + 4 + 1

    def test_1x1_keeps_only_unit_kernel(self):
        rng = np.random.default_rng(9)
        assert pyramid_pool(random_map(rng, 5, 1, 1)).count == 1

    def test_count_law_random_shapes(self):
        rng = np.random.default_rng(42)
        for _ in range(30):
            c = int(rng.integers(1, 4))
            h = int(rng.integers(1, 9))
            w = int(rng.integers(1, 9))
            fmap = random_map(rng, c, h, w)
            expected = sum(
                (h - k + 1) * (w - k + 1) for k in DEFAULT_PYRAMID.kernel_sizes if k <= min(h, w)
            )
            assert pyramid_pool(fmap).count == expected

    def test_columns_match_loop_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            fmap = random_map(rng, int(rng.integers(1, 4)), int(rng.integers(2, 8)), int(rng.integers(2, 8)))
            expected = loop_pool(fmap.values.astype(np.float64), DEFAULT_PYRAMID.kernel_sizes)
            np.testing.assert_allclose(pyramid_pool(fmap).columns, expected, rtol=1e-6)

    def test_stride_two(self):
        rng = np.random.default_rng(11)
        fmap = random_map(rng, 2, 7, 6)
        spec = PyramidSpec((1, 2), stride=2)
        expected = loop_pool(fmap.values.astype(np.float64), (1, 2), stride=2)
        got = pyramid_pool(fmap, spec)
        assert got.count == expected.shape[1]
        np.testing.assert_allclose(got.columns, expected, rtol=1e-6)

    def test_all_kernels_too_big(self):
        rng = np.random.default_rng(12)
        with pytest.raises(ValueError, match="exceeds"):
            pyramid_pool(random_map(rng, 1, 2, 2), PyramidSpec((3, 4)))

    def test_kernel_spec_validation(self):
        with pytest.raises(ValueError):
            PyramidSpec((2, 2))
        with pytest.raises(ValueError):
            PyramidSpec((0, 1))
        with pytest.raises(ValueError):
            PyramidSpec((1, 2), stride=0)


class TestNormalization:
    def test_three_four_five(self):
        m = FeatureMatrix(np.array([[3.0], [4.0]]))
        np.testing.assert_allclose(l2_normalize_columns(m).columns, [[0.6], [0.8]])

    def test_idempotent(self):
        rng = np.random.default_rng(42)
        m = FeatureMatrix(rng.standard_normal((5, 7)))
        once = l2_normalize_columns(m)
        twice = l2_normalize_columns(once)
        np.testing.assert_allclose(twice.columns, once.columns, atol=1e-12)

    def test_zero_column_flagged_degenerate(self):
        m = FeatureMatrix(np.array([[1.0, 0.0], [1.0, 0.0]]))
        normalized = l2_normalize_columns(m)
        assert normalized.degenerate_columns == (1,)
        np.testing.assert_allclose(normalized.columns[:, 1], 0.0)
        np.testing.assert_allclose(np.linalg.norm(normalized.columns[:, 0]), 1.0)
        assert normalized.normalized

    def test_normalized_flag_checked(self):
        with pytest.raises(ValueError, match="unit length"):
            FeatureMatrix(np.array([[2.0], [0.0]]), normalized=True)


class TestTypeInvariants:
    def test_map_rejects_non_finite(self):
        with pytest.raises(ValueError):
            SpatialFeatureMap(np.array([[[np.inf]]]))

    def test_matrix_rejects_empty(self):
        with pytest.raises(ValueError):
            FeatureMatrix(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            FeatureMatrix(np.zeros((3, 0)))

    def test_global_rejects_nan(self):
        with pytest.raises(ValueError):
            GlobalFeature(np.array([1.0, np.nan]))

    def test_values_immutable(self):
        fmap = SpatialFeatureMap(np.ones((1, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            fmap.values[0, 0, 0] = 5.0


class TestPooledContainer:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        matrix = FeatureMatrix(rng.standard_normal((6, 11)).astype(np.float32))
        gap = GlobalFeature(rng.standard_normal(6).astype(np.float32))
        path = tmp_path / "pooled.sfrf"
        save_pooled(path, matrix, gap)
        got_m, got_g = load_pooled(path)
        np.testing.assert_array_equal(got_m.columns, matrix.columns)
        np.testing.assert_array_equal(got_g.values, gap.values)

    def test_trailing_garbage(self, tmp_path):
        rng = np.random.default_rng(14)
        path = tmp_path / "pooled.sfrf"
        save_pooled(
            path,
            FeatureMatrix(rng.standard_normal((2, 3)).astype(np.float32)),
            GlobalFeature(rng.standard_normal(2).astype(np.float32)),
        )
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load_pooled(path)
