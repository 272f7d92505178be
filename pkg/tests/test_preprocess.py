import numpy as np
import pytest

from _oracles import brute_dilate, brute_erode, dense_gaussian_conv
from memseg import preprocess
from memseg.volume import DataError, ScalarVolume


def _vol(data, spacing=(0.5, 0.5, 0.5)):
    return ScalarVolume(data.shape, spacing, data.astype(np.float32))


class TestRollingBall:
    def test_constant_volume_becomes_zero(self):
        v = _vol(np.full((6, 6, 6), 0.3))
        out = preprocess.rolling_ball_subtract(v, 1.0)
        assert np.all(out.data == 0.0)

    def test_single_bright_voxel_survives(self):
        data = np.zeros((7, 7, 7))
        data[3, 3, 3] = 1.0
        out = preprocess.rolling_ball_subtract(_vol(data), 1.0)
        # opening erases the isolated peak, so the peak keeps its full value
        assert out.data[3, 3, 3] == 1.0
        assert np.all(out.data[data == 0] == 0.0)

    def test_ramp_plus_spike_matches_brute_force(self):
        rng = np.random.default_rng(5)
        ramp = np.linspace(0.0, 0.5, 9)[None, None, :] * np.ones((9, 9, 1))
        data = (ramp + 0.02 * rng.random((9, 9, 9))).astype(np.float32)
        data[4, 4, 4] = 1.0
        spacing = (0.5, 0.4, 0.6)
        radius = 1.1
        v = ScalarVolume(data.shape, spacing, data)
        out = preprocess.rolling_ball_subtract(v, radius)
        opened = brute_dilate(brute_erode(data, radius, spacing), radius, spacing)
        expect = np.clip(data - opened, 0.0, 1.0)
        assert np.array_equal(out.data, expect.astype(np.float32))
        # spike preserved, ramp strongly attenuated
        assert out.data[4, 4, 4] > 0.9
        assert out.data[0, 0, -1] < data[0, 0, -1]

    def test_erosion_dilation_match_brute_force(self):
        rng = np.random.default_rng(6)
        for _ in range(4):
            dims = tuple(rng.integers(4, 8, 3))
            spacing = tuple(rng.uniform(0.3, 0.7, 3))
            radius = float(rng.uniform(0.5, 1.5))
            data = rng.random(dims).astype(np.float32)
            er = preprocess.ellipsoid_erode(data, radius, spacing)
            assert np.array_equal(er, brute_erode(data, radius, spacing).astype(np.float32))
            dl = preprocess.ellipsoid_dilate(data, radius, spacing)
            assert np.array_equal(dl, brute_dilate(data, radius, spacing).astype(np.float32))

    def test_subvoxel_radius_warns_and_zeroes(self):
        v = _vol(np.random.default_rng(1).random((4, 4, 4)))
        with pytest.warns(UserWarning, match="below one voxel"):
            out = preprocess.rolling_ball_subtract(v, 0.2)
        assert np.all(out.data == 0.0)

    def test_antiextensive(self):
        rng = np.random.default_rng(7)
        data = rng.random((8, 8, 8)).astype(np.float32)
        opened = preprocess.ellipsoid_dilate(
            preprocess.ellipsoid_erode(data, 1.0, (0.5, 0.5, 0.5)), 1.0, (0.5, 0.5, 0.5))
        assert np.all(opened <= data + 1e-7)

    def test_rejects_nonpositive_radius(self):
        with pytest.raises(DataError):
            preprocess.rolling_ball_subtract(_vol(np.zeros((2, 2, 2))), 0.0)


class TestResample:
    def test_identity_spacing_bitwise(self):
        rng = np.random.default_rng(2)
        v = _vol(rng.random((4, 5, 6)), spacing=(0.5, 0.4, 0.3))
        out = preprocess.resample(v, (0.5, 0.4, 0.3))
        assert np.array_equal(out.data, v.data)

    def test_halving_x_spacing_doubles_x_dim(self):
        v = _vol(np.zeros((4, 4, 10)), spacing=(1, 1, 1))
        out = preprocess.resample(v, (1, 1, 0.5))
        assert abs(out.dims[2] - 20) <= 1
        assert out.dims[:2] == (4, 4)

    def test_linear_ramp_analytic(self):
        ramp = np.linspace(0.0, 1.0, 16).reshape(1, 1, 16)
        v = _vol(ramp, spacing=(1, 1, 1))
        out = preprocess.resample(v, (1, 1, 0.5))
        xs = np.clip(np.arange(out.dims[2]) * 0.5, 0, 15)
        expect = xs / 15.0
        assert np.abs(out.data[0, 0] - expect).max() < 1e-6

    def test_range_preserved(self):
        rng = np.random.default_rng(3)
        v = _vol(rng.random((5, 6, 7)))
        out = preprocess.resample(v, (0.31, 0.77, 0.49))
        assert out.data.min() >= v.data.min() - 1e-7
        assert out.data.max() <= v.data.max() + 1e-7

    def test_collapsing_dim_rejected(self):
        v = _vol(np.zeros((2, 2, 2)))
        with pytest.raises(DataError):
            preprocess.resample(v, (100.0, 0.5, 0.5))


class TestHistogramMatch:
    def test_self_reference_is_quantization(self):
        rng = np.random.default_rng(4)
        v = _vol(rng.random((4, 4, 4)))
        cdf = preprocess.volume_cdf(v)
        out = preprocess.histogram_match(v, cdf)
        levels = np.minimum((v.data.astype(np.float64) * 256).astype(int), 255)
        assert np.allclose(out.data, (levels + 0.5) / 256)

    def test_uniform_to_uniform_identity_within_quantization(self):
        data = (np.arange(256, dtype=np.float64)[None, None, :] + 0.5) / 256
        v = _vol(data)
        ref = np.arange(1, 257) / 256.0
        out = preprocess.histogram_match(v, ref)
        assert np.abs(out.data - data).max() <= (1.0 / 256 + 1e-9)

    def test_two_level_maps_to_reference_levels(self):
        v = _vol(np.array([0.2, 0.8] * 4).reshape(1, 2, 4))
        ref = np.zeros(256)
        ref[int(0.1 * 256):] = 0.5
        ref[int(0.9 * 256):] = 1.0
        out = preprocess.histogram_match(v, ref)
        got = np.unique(out.data)
        # direct CDF inversion: lows land in the 0.1 bin, highs in the 0.9 bin
        assert np.allclose(got, [(int(0.1 * 256) + 0.5) / 256, (int(0.9 * 256) + 0.5) / 256])

    def test_idempotent(self):
        rng = np.random.default_rng(8)
        v = _vol(rng.random((5, 5, 5)))
        ref = np.minimum(np.linspace(0, 1.3, 256), 1.0)
        ref[-1] = 1.0
        once = preprocess.histogram_match(v, ref)
        twice = preprocess.histogram_match(once, ref)
        assert np.array_equal(once.data, twice.data)

    def test_order_preserved_weakly(self):
        rng = np.random.default_rng(9)
        v = _vol(rng.random((4, 4, 4)))
        ref = preprocess.volume_cdf(_vol(rng.random((4, 4, 4)) ** 2))
        out = preprocess.histogram_match(v, ref)
        a = v.data.ravel().argsort(kind="stable")
        mapped = out.data.ravel()[a]
        assert np.all(np.diff(mapped) >= -1e-9)

    def test_constant_input_warns(self):
        v = _vol(np.full((3, 3, 3), 0.4))
        ref = np.arange(1, 257) / 256.0
        with pytest.warns(UserWarning, match="constant"):
            out = preprocess.histogram_match(v, ref)
        assert np.array_equal(out.data, v.data)

    def test_bad_reference_rejected(self):
        v = _vol(np.random.default_rng(0).random((3, 3, 3)))
        with pytest.raises(DataError):
            preprocess.histogram_match(v, np.linspace(1, 0, 256))
        with pytest.raises(DataError):
            preprocess.histogram_match(v, np.linspace(0, 0.9, 256))

    def test_cdf_sidecar_roundtrip(self, tmp_path):
        cdf = np.arange(1, 257) / 256.0
        p = tmp_path / "ref.f64"
        preprocess.write_reference_cdf(cdf, p)
        assert p.stat().st_size == 256 * 8
        back = preprocess.read_reference_cdf(p)
        assert np.array_equal(back, cdf)


class TestFallbackProbmap:
    def test_constant_becomes_zero_with_warning(self):
        v = _vol(np.full((4, 4, 4), 0.6))
        with pytest.warns(UserWarning, match="constant"):
            out = preprocess.fallback_probmap(v, 0.5)
        assert np.all(out.data == 0.0)

    def test_sigma_zero_is_minmax_only(self):
        rng = np.random.default_rng(10)
        data = rng.random((4, 4, 4)) * 0.5 + 0.2
        v = _vol(data)
        out = preprocess.fallback_probmap(v, 0.0)
        lo, hi = data.min(), data.max()
        assert np.allclose(out.data, (v.data - lo) / (hi - lo), atol=1e-6)
        assert out.data.min() == 0.0 and out.data.max() == 1.0

    def test_bright_plane_matches_gaussian_oracle(self):
        data = np.zeros((9, 9, 9))
        data[:, 4, :] = 1.0
        spacing = (0.5, 0.5, 0.5)
        v = ScalarVolume(data.shape, spacing, data.astype(np.float32))
        out = preprocess.fallback_probmap(v, 0.5)
        # plane voxels near 1, distant voxels near 0
        assert out.data[:, 4, :].min() > 0.9
        assert out.data[:, 0, :].max() < 0.1
        # interior values match a dense normalized-Gaussian oracle after min-max
        g = dense_gaussian_conv(data, spacing, 0.5)
        ones = dense_gaussian_conv(np.ones_like(data), spacing, 0.5)
        g = g / ones  # normalized smoothing with edge handling
        gm = (g - g.min()) / (g.max() - g.min())
        core = (slice(2, 7),) * 3
        assert np.abs(out.data[core] - gm[core]).max() < 0.02

    def test_never_nan_and_in_range(self):
        rng = np.random.default_rng(11)
        v = _vol(rng.random((6, 6, 6)))
        out = preprocess.fallback_probmap(v, 0.7)
        assert np.all(np.isfinite(out.data))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_requires_unit_range(self):
        with pytest.raises(DataError):
            preprocess.fallback_probmap(
                ScalarVolume((1, 1, 2), (1, 1, 1), np.array([0.0, 2.0], np.float32)), 0.5)


def test_preprocess_params_validation():
    with pytest.raises(DataError):
        preprocess.PreprocessParams(ball_radius=0.0)
    with pytest.raises(DataError):
        preprocess.PreprocessParams(target_spacing=(1.0, 0.0, 1.0))
    preprocess.PreprocessParams(reference_cdf=np.arange(1, 257) / 256.0)
