"""Containers, view slicing, normalization, padding."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvfusion import (
    InconsistentStack,
    IntensityVolume,
    LabelVolume,
    ProbVolume,
    ShrinkNotAllowed,
    SliceStack,
    ViewAxis,
    ZeroVariance,
    assemble_volume,
    extract_slices,
    one_hot,
    pad_to,
    slice_array,
    stack_modalities,
    unslice_array,
    zscore_normalize,
)


def random_prob(rng, dims, k=5, dtype=np.float64):
    raw = rng.random(dims + (k,))
    return ProbVolume((raw / raw.sum(axis=-1, keepdims=True)).astype(dtype))


small_dims = st.tuples(
    st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)
)


class TestViewAxis:
    def test_axis_assignment(self):
        assert ViewAxis.AXIAL.axis == 0
        assert ViewAxis.CORONAL.axis == 1
        assert ViewAxis.SAGITTAL.axis == 2

    def test_parse_accepts_any_case(self):
        assert ViewAxis.parse("axial") is ViewAxis.AXIAL
        assert ViewAxis.parse(" Coronal ") is ViewAxis.CORONAL
        assert ViewAxis.parse("SAGITTAL") is ViewAxis.SAGITTAL

    def test_parse_rejects_unknown(self):
        with pytest.raises(ValueError, match="unknown view"):
            ViewAxis.parse("oblique")


class TestContainers:
    def test_intensity_requires_4d(self):
        with pytest.raises(ValueError, match="4D"):
            IntensityVolume(np.zeros((3, 3, 3)))

    def test_intensity_rejects_nan(self):
        bad = np.zeros((1, 2, 2, 2), dtype=np.float32)
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            IntensityVolume(bad)

    def test_intensity_data_is_readonly(self):
        vol = IntensityVolume(np.zeros((1, 2, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            vol.data[0, 0, 0, 0] = 1.0

    def test_label_range_checked(self):
        with pytest.raises(ValueError, match="labels must lie"):
            LabelVolume(np.full((2, 2, 2), 5, dtype=np.int64), n_classes=5)

    def test_label_rejects_float(self):
        with pytest.raises(ValueError, match="integer"):
            LabelVolume(np.zeros((2, 2, 2), dtype=np.float32))

    def test_label_casts_to_uint8(self):
        lab = LabelVolume(np.ones((2, 2, 2), dtype=np.int64), n_classes=5)
        assert lab.data.dtype == np.uint8

    def test_prob_voxel_sums_checked(self):
        bad = np.full((1, 1, 1, 5), 0.3)
        with pytest.raises(ValueError, match="sums deviate"):
            ProbVolume(bad)

    def test_prob_range_checked(self):
        bad = np.zeros((1, 1, 1, 5))
        bad[0, 0, 0] = [1.5, -0.5, 0, 0, 0]
        with pytest.raises(ValueError, match="outside"):
            ProbVolume(bad)

    def test_prob_preserves_dtype(self):
        rng = np.random.default_rng(0)
        assert random_prob(rng, (2, 2, 2), dtype=np.float32).data.dtype == np.float32
        assert random_prob(rng, (2, 2, 2), dtype=np.float64).data.dtype == np.float64

    def test_stack_modalities_concatenates(self):
        a = IntensityVolume(np.zeros((1, 2, 2, 2), dtype=np.float32))
        b = IntensityVolume(np.ones((3, 2, 2, 2), dtype=np.float32))
        merged = stack_modalities([a, b])
        assert merged.modalities == 4
        assert merged.data[0].max() == 0.0
        assert merged.data[1].min() == 1.0

    def test_stack_modalities_rejects_mismatch(self):
        a = IntensityVolume(np.zeros((1, 2, 2, 2), dtype=np.float32))
        b = IntensityVolume(np.zeros((1, 3, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="share spatial dims"):
            stack_modalities([a, b])


class TestSlicing:
    # Oracle: slice i of a view is the sub-array at fixed index i along
    # the view's axis, verified by direct indexing.
    def test_slice_matches_direct_indexing(self):
        rng = np.random.default_rng(1)
        arr = rng.random((4, 5, 6, 3))
        for view, pick in [
            (ViewAxis.AXIAL, lambda i: arr[i, :, :, :]),
            (ViewAxis.CORONAL, lambda i: arr[:, i, :, :]),
            (ViewAxis.SAGITTAL, lambda i: arr[:, :, i, :]),
        ]:
            stack = slice_array(arr, view)
            for i in range(arr.shape[view.axis]):
                np.testing.assert_array_equal(stack[i], pick(i))

    def test_slice_is_zero_copy(self):
        arr = np.zeros((3, 4, 5, 2))
        assert slice_array(arr, ViewAxis.CORONAL).base is arr

    def test_unslice_inverts_slice(self):
        rng = np.random.default_rng(2)
        arr = rng.random((3, 4, 5, 2))
        for view in ViewAxis:
            np.testing.assert_array_equal(
                unslice_array(slice_array(arr, view), view), arr
            )

    def test_inplane_dims_per_view(self):
        vol = IntensityVolume(np.zeros((2, 4, 5, 6), dtype=np.float32))
        assert extract_slices(vol, ViewAxis.AXIAL).data.shape == (4, 5, 6, 2)
        assert extract_slices(vol, ViewAxis.CORONAL).data.shape == (5, 4, 6, 2)
        assert extract_slices(vol, ViewAxis.SAGITTAL).data.shape == (6, 4, 5, 2)

    def test_intensity_round_trip_bit_exact(self):
        rng = np.random.default_rng(3)
        vol = IntensityVolume(rng.random((4, 3, 5, 7)).astype(np.float32))
        for view in ViewAxis:
            back = assemble_volume(extract_slices(vol, view))
            assert back.data.dtype == vol.data.dtype
            np.testing.assert_array_equal(back.data, vol.data)

    def test_prob_round_trip_bit_exact(self):
        rng = np.random.default_rng(4)
        vol = random_prob(rng, (3, 4, 5), dtype=np.float32)
        for view in ViewAxis:
            back = assemble_volume(extract_slices(vol, view))
            np.testing.assert_array_equal(back.data, vol.data)

    def test_stack_shape_validated(self):
        with pytest.raises(InconsistentStack):
            SliceStack(
                view=ViewAxis.AXIAL,
                data=np.zeros((3, 4, 5, 1)),
                volume_dims=(9, 9, 9),
                kind="intensity",
            )

    def test_stack_kind_validated(self):
        with pytest.raises(ValueError, match="kind"):
            SliceStack(
                view=ViewAxis.AXIAL,
                data=np.zeros((2, 2, 2, 1)),
                volume_dims=(2, 2, 2),
                kind="labels",
            )

    @settings(deadline=None, max_examples=50)
    @given(dims=small_dims, view=st.sampled_from(list(ViewAxis)), seed=st.integers(0, 2**16))
    def test_round_trip_property(self, dims, view, seed):
        rng = np.random.default_rng(seed)
        vol = IntensityVolume(rng.random((2,) + dims).astype(np.float32))
        back = assemble_volume(extract_slices(vol, view))
        np.testing.assert_array_equal(back.data, vol.data)


class TestZScore:
    # Oracle: plain two-pass mean/std over the support.
    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(5)
        data = rng.normal(2.0, 3.0, size=(2, 4, 4, 4))
        data[:, :2, 0, 0] = 0.0
        vol = IntensityVolume(data)
        out = zscore_normalize(vol).data
        for m in range(2):
            support = data[m][data[m] != 0]
            mean = support.sum() / support.size
            var = ((support - mean) ** 2).sum() / support.size
            expected = (data[m][data[m] != 0] - mean) / np.sqrt(var)
            np.testing.assert_allclose(out[m][data[m] != 0], expected, atol=1e-12)

    def test_zero_voxels_untouched(self):
        data = np.zeros((1, 3, 3, 3))
        data[0, 1] = [[1, 2, 3]] * 3
        out = zscore_normalize(IntensityVolume(data)).data
        assert (out[0][data[0] == 0] == 0).all()

    def test_support_statistics(self):
        rng = np.random.default_rng(6)
        data = rng.normal(5.0, 2.0, size=(1, 6, 6, 6))
        data[0, :3] = 0.0
        out = zscore_normalize(IntensityVolume(data)).data
        support = out[0][data[0] != 0]
        assert abs(support.mean()) < 1e-9
        assert abs(support.std() - 1.0) < 1e-9

    def test_all_voxels_mode(self):
        rng = np.random.default_rng(7)
        data = rng.normal(1.0, 1.0, size=(1, 4, 4, 4))
        data[0, 0, 0, 0] = 0.0
        out = zscore_normalize(IntensityVolume(data), nonzero_only=False).data
        assert abs(out[0].mean()) < 1e-9
        assert abs(out[0].std() - 1.0) < 1e-9

    def test_constant_support_raises(self):
        data = np.zeros((1, 3, 3, 3))
        data[0, 0] = 4.0
        with pytest.raises(ZeroVariance, match="constant"):
            zscore_normalize(IntensityVolume(data))

    def test_tiny_support_raises(self):
        data = np.zeros((1, 3, 3, 3))
        data[0, 0, 0, 0] = 1.0
        with pytest.raises(ZeroVariance, match="at least 2"):
            zscore_normalize(IntensityVolume(data))

    def test_modalities_independent(self):
        rng = np.random.default_rng(8)
        data = np.stack([rng.normal(0, 1, (4, 4, 4)), rng.normal(50, 9, (4, 4, 4))])
        data[data == 0] = 0.5
        out = zscore_normalize(IntensityVolume(data)).data
        for m in range(2):
            assert abs(out[m][data[m] != 0].mean()) < 1e-9

    @settings(deadline=None, max_examples=30)
    @given(scale=st.floats(0.5, 100.0), seed=st.integers(0, 2**16))
    def test_scale_invariance_on_positive_support(self, scale, seed):
        # Same support either way, so the standardized values agree.
        rng = np.random.default_rng(seed)
        data = rng.uniform(1.0, 2.0, size=(1, 3, 3, 3))
        a = zscore_normalize(IntensityVolume(data)).data
        b = zscore_normalize(IntensityVolume(data * scale)).data
        np.testing.assert_allclose(a, b, atol=1e-9)


class TestPadding:
    def test_pads_high_end_with_zeros(self):
        rng = np.random.default_rng(9)
        vol = IntensityVolume(rng.random((2, 3, 4, 5)).astype(np.float32))
        out = pad_to(vol, (4, 6, 5))
        assert out.dims == (4, 6, 5)
        np.testing.assert_array_equal(out.data[:, :3, :4, :5], vol.data)
        assert out.data[:, 3:].max() == 0.0
        assert out.data[:, :, 4:].max() == 0.0

    def test_labels_pad_with_class_zero(self):
        lab = LabelVolume(np.full((2, 2, 2), 3, dtype=np.uint8), n_classes=5)
        out = pad_to(lab, (3, 3, 3))
        assert out.data[2].max() == 0
        assert (out.data[:2, :2, :2] == 3).all()
        assert out.n_classes == 5

    def test_equal_dims_is_identity(self):
        vol = IntensityVolume(np.ones((1, 2, 2, 2), dtype=np.float32))
        np.testing.assert_array_equal(pad_to(vol, (2, 2, 2)).data, vol.data)

    def test_shrink_rejected(self):
        vol = IntensityVolume(np.ones((1, 4, 4, 4), dtype=np.float32))
        with pytest.raises(ShrinkNotAllowed):
            pad_to(vol, (4, 3, 4))


class TestOneHot:
    def test_identity_on_arange(self):
        np.testing.assert_array_equal(
            one_hot(np.arange(5), n_classes=5), np.eye(5)
        )

    def test_label_volume_carries_n_classes(self):
        lab = LabelVolume(np.array([[[0, 4]]], dtype=np.uint8), n_classes=5)
        oh = one_hot(lab)
        assert oh.shape == (1, 1, 2, 5)
        assert oh[0, 0, 0, 0] == 1.0
        assert oh[0, 0, 1, 4] == 1.0

    def test_plain_array_needs_n_classes(self):
        with pytest.raises(ValueError, match="n_classes"):
            one_hot(np.zeros((2, 2), dtype=np.int64))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            one_hot(np.array([5]), n_classes=5)

    @settings(deadline=None, max_examples=30)
    @given(seed=st.integers(0, 2**16))
    def test_rows_sum_to_one_and_argmax_recovers(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 5, size=(3, 4))
        oh = one_hot(labels, n_classes=5)
        assert (oh.sum(axis=-1) == 1.0).all()
        np.testing.assert_array_equal(oh.argmax(axis=-1), labels)
