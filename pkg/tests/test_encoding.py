import numpy as np
import pytest

from aspan import encoding
from aspan.tensor import ParameterError, Tensor


class TestSinusoidalPE:
    def test_origin_alternates_zero_one(self):
        pe = encoding.sinusoidal_pe(4, 4, 16)
        np.testing.assert_allclose(pe.grid[0, 0], [0.0, 1.0] * 8)

    def test_bounded(self):
        pe = encoding.sinusoidal_pe(20, 30, 32)
        assert pe.grid.min() >= -1.0 and pe.grid.max() <= 1.0

    def test_distinct_positions_distinct_codes(self):
        pe = encoding.sinusoidal_pe(16, 16, 32)
        flat = pe.grid.reshape(-1, 32)
        assert len(np.unique(flat.round(12), axis=0)) == 256

    def test_rejects_bad_dim(self):
        with pytest.raises(ParameterError):
            encoding.sinusoidal_pe(4, 4, 30)

    def test_x_is_column_axis(self):
        pe = encoding.sinusoidal_pe(3, 5, 8)
        # channel 0 is sin(w0 * x): varies along columns, constant down rows
        assert not np.allclose(pe.grid[0, 0, 0], pe.grid[0, 1, 0])
        np.testing.assert_allclose(pe.grid[:, 2, 0], pe.grid[0, 2, 0])


class TestNormalizedPE:
    def test_matching_extents_bitwise_equal(self):
        a = encoding.sinusoidal_pe(12, 10, 16)
        b = encoding.normalized_pe(12, 10, (12, 10), 16)
        np.testing.assert_array_equal(a.grid, b.grid)

    def test_double_resolution_realigns(self):
        train = encoding.sinusoidal_pe(8, 8, 16)
        test = encoding.normalized_pe(16, 16, (8, 8), 16)
        # position (2x, 2y) at test time encodes like (x, y) at train time
        np.testing.assert_allclose(test.grid[6, 4], train.grid[3, 2], atol=1e-12)

    def test_scaled_corner_stays_in_train_range(self):
        # scaled coordinates must stay inside [0, extent) seen at train time
        for test_extent in ((24, 36), (12, 9), (100, 7)):
            alpha, beta = encoding.pe_scales(test_extent, (8, 8))
            assert 0.0 <= (test_extent[1] - 1) * alpha < 8
            assert 0.0 <= (test_extent[0] - 1) * beta < 8

    def test_rejects_zero_extent(self):
        with pytest.raises(ParameterError):
            encoding.normalized_pe(0, 8, (8, 8), 16)


class TestAddPE:
    def test_zero_pe_keeps_features(self):
        rng = np.random.default_rng(0)
        f = Tensor(rng.standard_normal((4, 4, 8)))
        pe = encoding.sinusoidal_pe(4, 4, 8)
        pe.grid[:] = 0.0
        np.testing.assert_array_equal(encoding.add_pe(f, pe).data, f.data)

    def test_zero_features_give_pe(self):
        pe = encoding.sinusoidal_pe(4, 4, 8)
        out = encoding.add_pe(Tensor(np.zeros((4, 4, 8))), pe)
        np.testing.assert_array_equal(out.data, pe.grid)

    def test_add_then_subtract_roundtrip(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((4, 4, 8))
        pe = encoding.sinusoidal_pe(4, 4, 8)
        back = encoding.add_pe(Tensor(f), pe).data - pe.grid
        np.testing.assert_allclose(back, f, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            encoding.add_pe(Tensor(np.zeros((4, 4, 8))),
                            encoding.sinusoidal_pe(4, 5, 8))
