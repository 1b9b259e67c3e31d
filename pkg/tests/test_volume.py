import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvseg.volume import (
    IGNORE,
    LabelMap,
    SpacingPolicy,
    Volume,
    clip_zscore,
    otsu_foreground,
    require_same_grid,
    resample,
    rescale_unit,
    same_grid,
    validate_scheme,
)


def _vol(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(data, dtype=np.float32), spacing)


class TestContainers:
    def test_volume_casts_to_float32(self):
        v = Volume(np.zeros((3, 4, 5), dtype=np.float64), (1, 1, 1))
        assert v.data.dtype == np.float32
        assert v.dims == (3, 4, 5)

    def test_volume_rejects_non_3d(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((3, 4)), (1, 1, 1))
        with pytest.raises(ValueError):
            Volume(np.zeros((3, 4, 5, 6)), (1, 1, 1))

    def test_volume_rejects_nan(self):
        data = np.zeros((3, 3, 3))
        data[1, 1, 1] = np.nan
        with pytest.raises(ValueError):
            Volume(data, (1, 1, 1))

    def test_bad_spacing(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((3, 3, 3)), (1.0, -1.0, 1.0))
        with pytest.raises(ValueError):
            Volume(np.zeros((3, 3, 3)), (1.0, 1.0))

    def test_labelmap_requires_integers(self):
        with pytest.raises(ValueError):
            LabelMap(np.zeros((3, 3, 3), dtype=np.float32), (1, 1, 1))
        with pytest.raises(ValueError):
            LabelMap(np.full((3, 3, 3), -1, dtype=np.int16), (1, 1, 1))

    def test_labelmap_compacts_to_uint8(self):
        lm = LabelMap(np.full((3, 3, 3), 255, dtype=np.int64), (1, 1, 1))
        assert lm.data.dtype == np.uint8
        # parcellation maps keep wide atlas ids
        wide = LabelMap(np.full((3, 3, 3), 4000, dtype=np.int32), (1, 1, 1))
        assert wide.data.dtype == np.int32

    def test_validate_scheme(self):
        ok = LabelMap(np.array([[[0, 1], [2, 3]], [[255, 0], [1, 2]]], dtype=np.uint8), (1, 1, 1))
        validate_scheme(ok)
        bad = LabelMap(np.full((2, 2, 2), 7, dtype=np.uint8), (1, 1, 1))
        with pytest.raises(ValueError):
            validate_scheme(bad)

    def test_same_grid(self):
        a = _vol(np.zeros((3, 3, 3)))
        b = _vol(np.ones((3, 3, 3)))
        c = _vol(np.zeros((3, 3, 3)), spacing=(2, 1, 1))
        assert same_grid(a, b)
        assert not same_grid(a, c)
        with pytest.raises(ValueError):
            require_same_grid(a, c)

    def test_spacing_survives_float32_round_trip(self):
        v = _vol(np.zeros((3, 3, 3)), spacing=(0.1, 0.1, 0.1))
        assert v.spacing == tuple(float(np.float32(0.1)) for _ in range(3))


class TestSpacingPolicy:
    def test_agnostic_takes_no_spacing(self):
        with pytest.raises(ValueError):
            SpacingPolicy("agnostic", (1, 1, 1))

    def test_target_requires_spacing(self):
        with pytest.raises(ValueError):
            SpacingPolicy("target")

    def test_agnostic_resample_is_bit_identical(self):
        rng = np.random.default_rng(0)
        v = _vol(rng.normal(size=(7, 9, 5)), spacing=(0.7, 1.0, 3.0))
        out = resample(v, SpacingPolicy.agnostic())
        assert out is v

    def test_native_target_preserves_dims_and_values(self):
        rng = np.random.default_rng(1)
        v = _vol(rng.normal(size=(8, 6, 10)), spacing=(0.8, 1.0, 1.25))
        out = resample(v, SpacingPolicy.target(v.spacing))
        assert out.dims == v.dims
        np.testing.assert_allclose(out.data, v.data, atol=1e-6)

    def test_ramp_trilinear_matches_closed_form(self):
        # trilinear interpolation reproduces a separable linear ramp exactly
        i, j, k = np.meshgrid(np.arange(10), np.arange(12), np.arange(8), indexing="ij")
        v = _vol(2.0 * i + 3.0 * j + 5.0 * k, spacing=(1.0, 1.0, 1.0))
        target = (0.5, 0.75, 2.0)
        out = resample(v, SpacingPolicy.target(target))
        assert out.dims == (20, 16, 4)
        oi, oj, ok = np.meshgrid(
            np.arange(20), np.arange(16), np.arange(4), indexing="ij"
        )
        # output index o samples input coordinate o * (target / native), clamped
        ci = np.minimum(oi * 0.5, 9.0)
        cj = np.minimum(oj * 0.75, 11.0)
        ck = np.minimum(ok * 2.0, 7.0)
        np.testing.assert_allclose(out.data, 2.0 * ci + 3.0 * cj + 5.0 * ck, atol=1e-6)

    def test_labels_resample_nearest_only(self):
        lm = LabelMap(np.ones((4, 4, 4), dtype=np.uint8), (1, 1, 1))
        with pytest.raises(ValueError):
            resample(lm, SpacingPolicy.target((2, 2, 2)), interp="trilinear")
        out = resample(lm, SpacingPolicy.target((2, 2, 2)), interp="nearest")
        assert out.dims == (2, 2, 2)
        assert set(np.unique(out.data)) <= {0, 1}

    def test_nearest_picks_closest_sample(self):
        data = np.arange(8, dtype=np.float32).reshape(8, 1, 1) * np.ones((1, 1, 1), np.float32)
        v = Volume(np.ascontiguousarray(np.broadcast_to(data, (8, 1, 1))), (1, 1, 1))
        out = resample(v, SpacingPolicy.target((2, 1, 1)), interp="nearest")
        np.testing.assert_array_equal(out.data[:, 0, 0], [0, 2, 4, 6])

    def test_collapsing_target_rejected(self):
        v = _vol(np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            resample(v, SpacingPolicy.target((100.0, 1.0, 1.0)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_agnostic_identity_property(self, seed):
        rng = np.random.default_rng(seed)
        dims = tuple(int(d) for d in rng.integers(2, 7, size=3))
        v = _vol(rng.normal(size=dims), spacing=tuple(rng.uniform(0.4, 3.0, size=3)))
        assert resample(v, SpacingPolicy.agnostic()) is v


class TestOtsu:
    def test_bimodal_split(self):
        rng = np.random.default_rng(2)
        data = np.concatenate([
            rng.normal(0.2, 0.02, size=2000),
            rng.normal(0.8, 0.02, size=2000),
        ])
        rng.shuffle(data)
        v = _vol(data.reshape(20, 20, 10))
        thr, mask = otsu_foreground(v)
        # variance is flat across the empty gap; ties break toward the low edge
        low_top = float(v.data[v.data < 0.5].max())
        high_bottom = float(v.data[v.data > 0.5].min())
        assert low_top <= thr < high_bottom
        assert mask.sum() == 2000

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(3)
        v = _vol(rng.uniform(size=(8, 8, 8)))
        thr, _ = otsu_foreground(v)
        data = v.data.astype(np.float64)
        hist, edges = np.histogram(data, bins=256, range=(data.min(), data.max()))
        centers = 0.5 * (edges[:-1] + edges[1:])
        best, best_t = -np.inf, None
        for t in range(255):
            w0 = hist[: t + 1].sum()
            w1 = hist[t + 1 :].sum()
            if w0 == 0 or w1 == 0:
                continue
            mu0 = (hist[: t + 1] * centers[: t + 1]).sum() / w0
            mu1 = (hist[t + 1 :] * centers[t + 1 :]).sum() / w1
            var_b = w0 * w1 * (mu0 - mu1) ** 2
            if var_b > best:
                best, best_t = var_b, t
        assert thr == pytest.approx(float(edges[best_t + 1]), abs=1e-12)

    def test_constant_volume_rejected(self):
        with pytest.raises(ValueError):
            otsu_foreground(_vol(np.ones((4, 4, 4))))


class TestIntensity:
    def test_rescale_unit_range(self):
        rng = np.random.default_rng(4)
        v = _vol(rng.normal(3.0, 2.0, size=(6, 6, 6)))
        out = rescale_unit(v)
        assert float(out.data.min()) == 0.0
        assert float(out.data.max()) == 1.0

    def test_rescale_unit_masked_zeroes_outside(self):
        v = _vol(np.arange(27, dtype=np.float32).reshape(3, 3, 3))
        mask = v.data >= 10
        out = rescale_unit(v, mask)
        assert np.all(out.data[~mask] == 0.0)
        assert float(out.data[mask].min()) == 0.0
        assert float(out.data[mask].max()) == 1.0

    def test_rescale_constant_rejected(self):
        with pytest.raises(ValueError):
            rescale_unit(_vol(np.full((3, 3, 3), 5.0)))

    def test_clip_zscore_statistics(self):
        rng = np.random.default_rng(5)
        v = _vol(rng.normal(10.0, 4.0, size=(16, 16, 16)))
        out = clip_zscore(v)
        region = np.clip(
            v.data.astype(np.float64),
            *np.percentile(v.data.astype(np.float64), [0.5, 99.5]),
        )
        expect = (region - region.mean()) / region.std()
        np.testing.assert_allclose(out.data, expect.astype(np.float32), atol=1e-6)

    def test_clip_zscore_clips_outliers(self):
        data = np.zeros((10, 10, 10), dtype=np.float32)
        data[0, 0, 0] = 1000.0
        data += np.random.default_rng(6).normal(0, 1, size=data.shape).astype(np.float32)
        out = clip_zscore(_vol(data))
        # the spike is pulled to the clipped maximum, not 250 sigma away
        assert out.data[0, 0, 0] < 10.0

    def test_clip_zscore_masked_applies_everywhere(self):
        rng = np.random.default_rng(7)
        v = _vol(rng.normal(size=(8, 8, 8)))
        mask = np.zeros(v.dims, dtype=bool)
        mask[:4] = True
        out = clip_zscore(v, mask)
        assert out.dims == v.dims
        region = v.data[mask].astype(np.float64)
        p_lo, p_hi = np.percentile(region, [0.5, 99.5])
        clipped = np.clip(region, p_lo, p_hi)
        expect = (np.clip(v.data.astype(np.float64), p_lo, p_hi) - clipped.mean()) / clipped.std()
        np.testing.assert_allclose(out.data, expect.astype(np.float32), atol=1e-6)

    def test_clip_zscore_constant_rejected(self):
        with pytest.raises(ValueError):
            clip_zscore(_vol(np.full((4, 4, 4), 2.0)))
