import numpy as np
import pytest

from nsf.errors import InvalidArgumentError, OrientationError
from nsf.volume import (
    DeformationField,
    IntensityVolume,
    LabelVolume,
    apply_deformation,
    flip_lr,
    make_affine,
    resample,
    resample_labels,
    resample_to_grid,
    upsample_control_grid,
)


# ---------------------------------------------------------------------------
# resample
# ---------------------------------------------------------------------------


def test_resample_identity_spacing_returns_identical_data():
    rng = np.random.default_rng(0)
    vol = IntensityVolume.from_spacing(rng.random((5, 6, 7)))
    out = resample(vol, (1.0, 1.0, 1.0))
    assert out.dims == vol.dims
    assert np.array_equal(out.data, vol.data)
    assert np.array_equal(out.affine, vol.affine)


@pytest.mark.parametrize("spacing", [(0.5, 0.5, 0.5), (2.0, 2.0, 2.0), (1.7, 0.9, 2.3), (3.3, 0.4, 1.1)])
def test_resample_preserves_constants(spacing):
    vol = IntensityVolume.from_spacing(np.full((5, 5, 5), 7.0))
    out = resample(vol, spacing)
    np.testing.assert_allclose(out.data, 7.0, atol=1e-6)
    np.testing.assert_allclose(out.voxel_size, spacing)


def test_resample_midpoints_are_neighbor_means():
    # 2x2x2 cube to 0.5mm: odd output voxels sit exactly between input centers
    rng = np.random.default_rng(1)
    corners = rng.random((2, 2, 2)) * 10
    vol = IntensityVolume.from_spacing(corners)
    out = resample(vol, (0.5, 0.5, 0.5))
    assert out.dims == (4, 4, 4)
    # hand-computed trilinear weights at (0.5, 0, 0): mean of the two x-neighbors
    assert out.data[1, 0, 0] == pytest.approx((corners[0, 0, 0] + corners[1, 0, 0]) / 2, abs=1e-12)
    assert out.data[0, 1, 0] == pytest.approx((corners[0, 0, 0] + corners[0, 1, 0]) / 2, abs=1e-12)
    assert out.data[0, 0, 1] == pytest.approx((corners[0, 0, 0] + corners[0, 0, 1]) / 2, abs=1e-12)
    center = corners.mean()
    assert out.data[1, 1, 1] == pytest.approx(center, abs=1e-12)
    # even indices coincide with input centers
    assert out.data[0, 0, 0] == corners[0, 0, 0]
    assert out.data[2, 2, 2] == corners[1, 1, 1]


def test_resample_field_of_view_within_one_voxel():
    rng = np.random.default_rng(2)
    vol = IntensityVolume.from_spacing(rng.random((11, 13, 9)))
    for spacing in ((2.0, 3.0, 1.4), (0.7, 0.7, 0.7)):
        out = resample(vol, spacing)
        extent_in = np.asarray(vol.dims) * vol.voxel_size
        extent_out = np.asarray(out.dims) * out.voxel_size
        assert np.all(extent_out >= extent_in - 1e-9)
        assert np.all(extent_out - extent_in <= np.asarray(spacing) + 1e-9)


def test_resample_rejects_bad_arguments():
    vol = IntensityVolume.from_spacing(np.ones((3, 3, 3)))
    with pytest.raises(InvalidArgumentError):
        resample(vol, (0.0, 1.0, 1.0))
    with pytest.raises(InvalidArgumentError):
        resample(vol, (-1.0, 1.0, 1.0))
    with pytest.raises(InvalidArgumentError):
        resample(vol, (1.0, 1.0, 1.0), method="cubic")
    with pytest.raises(InvalidArgumentError):
        IntensityVolume.from_spacing(np.ones((0, 3, 3)))


# ---------------------------------------------------------------------------
# resample_labels
# ---------------------------------------------------------------------------


def test_resample_labels_identity_and_uniform():
    rng = np.random.default_rng(3)
    lab = LabelVolume.from_spacing(rng.integers(0, 5, (4, 5, 6), dtype=np.int32))
    same = resample_labels(lab, (1.0, 1.0, 1.0))
    assert np.array_equal(same.data, lab.data)
    uniform = LabelVolume.from_spacing(np.full((4, 4, 4), 3, dtype=np.int32))
    for spacing in ((2.0, 2.0, 2.0), (0.6, 1.3, 3.0)):
        out = resample_labels(uniform, spacing)
        assert out.label_set() == {3}


def test_resample_labels_checkerboard_matches_bruteforce_nearest():
    ii, jj, kk = np.indices((4, 4, 4))
    board = ((ii + jj + kk) % 2).astype(np.int32)
    lab = LabelVolume.from_spacing(board)
    out = resample_labels(lab, (2.0, 2.0, 2.0))

    # oracle: nearest input center to each output center, lowest index on ties
    centers = np.arange(4)
    expected = np.empty(out.dims, dtype=np.int32)
    for i in range(out.dims[0]):
        for j in range(out.dims[1]):
            for k in range(out.dims[2]):
                src = [int(np.argmin(np.abs(centers - 2.0 * t))) for t in (i, j, k)]
                expected[i, j, k] = board[tuple(src)]
    assert np.array_equal(out.data, expected)
    assert out.label_set() <= lab.label_set()


def test_resample_roundtrip_preserves_mean_within_1_percent():
    rng = np.random.default_rng(4)
    vol = IntensityVolume.from_spacing(rng.random((12, 12, 12)) + 0.5)
    down = resample(vol, (2.0, 2.0, 2.0))
    back = resample_to_grid(down, vol.dims, vol.affine)
    assert abs(back.data.mean() - vol.data.mean()) / vol.data.mean() < 0.01


# ---------------------------------------------------------------------------
# apply_deformation
# ---------------------------------------------------------------------------


def test_identity_field_is_bit_identical():
    rng = np.random.default_rng(5)
    vol = IntensityVolume.from_spacing(rng.random((6, 7, 8)))
    lab = LabelVolume.from_spacing(rng.integers(0, 4, (6, 7, 8), dtype=np.int32))
    fld = DeformationField.identity(vol.dims)
    assert np.array_equal(apply_deformation(vol, fld).data, vol.data)
    assert np.array_equal(apply_deformation(lab, fld).data, lab.data)


def test_integer_translation_is_exact_shift_with_background_fill():
    rng = np.random.default_rng(6)
    data = rng.random((8, 8, 8)) * 5 + 1
    vol = IntensityVolume.from_spacing(data)
    shift = np.zeros((2, 2, 2, 3))
    shift[..., 0] = 2.0  # +2mm along world x == +2 voxels
    out = apply_deformation(vol, DeformationField(shift, vol.dims))
    expected = np.zeros_like(data)
    expected[:-2] = data[2:]
    np.testing.assert_array_equal(out.data, expected)


def test_label_warp_never_invents_labels():
    rng = np.random.default_rng(7)
    lab = LabelVolume.from_spacing(rng.integers(0, 6, (9, 9, 9), dtype=np.int32))
    for seed in range(5):
        grid = np.random.default_rng(seed).normal(0, 2.5, (4, 4, 4, 3))
        out = apply_deformation(lab, DeformationField(grid, lab.dims))
        assert out.label_set() <= lab.label_set() | {0}


def test_deformation_dim_mismatch_rejected():
    vol = IntensityVolume.from_spacing(np.ones((4, 4, 4)))
    fld = DeformationField.identity((5, 4, 4))
    with pytest.raises(InvalidArgumentError):
        apply_deformation(vol, fld)


def test_upsample_control_grid_reproduces_linear_fields():
    # corner-aligned trilinear interpolation is exact for affine functions
    dims = (9, 7, 5)
    g = 3
    axes = [np.linspace(0, d - 1.0, g) for d in dims]
    px, py, pz = np.meshgrid(*axes, indexing="ij")
    ctrl = 2.0 * px - 0.5 * py + 3.0 * pz + 1.0
    full = upsample_control_grid(ctrl, dims)
    ii, jj, kk = np.indices(dims).astype(float)
    np.testing.assert_allclose(full, 2.0 * ii - 0.5 * jj + 3.0 * kk + 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# flip_lr
# ---------------------------------------------------------------------------


def test_flip_is_exact_involution(toy_schema):
    rng = np.random.default_rng(8)
    for _ in range(25):
        vol = IntensityVolume.from_spacing(rng.random((5, 6, 7)))
        lab = LabelVolume.from_spacing(rng.integers(0, 6, (5, 6, 7), dtype=np.int32))
        assert np.array_equal(flip_lr(flip_lr(vol, toy_schema), toy_schema).data, vol.data)
        assert np.array_equal(flip_lr(flip_lr(lab, toy_schema), toy_schema).data, lab.data)


def test_flip_swaps_lateral_ids_and_mirrors_position(toy_schema):
    lab = np.zeros((5, 5, 5), dtype=np.int32)
    lab[1, 2, 2] = 3  # left-hippocampus
    out = flip_lr(LabelVolume.from_spacing(lab), toy_schema)
    assert out.data[1, 2, 2] == 0
    assert out.data[3, 2, 2] == 4  # right-hippocampus at the mirrored voxel


def test_flip_keeps_wmh_and_midline_ids(toy_schema):
    lab = np.zeros((5, 5, 5), dtype=np.int32)
    lab[0, 1, 1] = 5  # wmh
    lab[4, 3, 3] = 1  # white-matter (midline in the toy schema)
    out = flip_lr(LabelVolume.from_spacing(lab), toy_schema)
    assert out.data[4, 1, 1] == 5
    assert out.data[0, 3, 3] == 1


def test_flip_respects_affine_axis(toy_schema):
    # voxel axis 1 carries world x: flip must mirror along axis 1
    affine = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    rng = np.random.default_rng(9)
    vol = IntensityVolume(rng.random((4, 5, 6)), affine)
    out = flip_lr(vol, toy_schema)
    assert np.array_equal(out.data, vol.data[:, ::-1, :])


def test_flip_ambiguous_orientation_raises(toy_schema):
    theta = np.pi / 4
    affine = make_affine()
    affine[:2, :2] = [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    vol = IntensityVolume(np.ones((3, 3, 3)), affine)
    with pytest.raises(OrientationError):
        flip_lr(vol, toy_schema)


# ---------------------------------------------------------------------------
# type invariants
# ---------------------------------------------------------------------------


def test_volume_invariants():
    with pytest.raises(InvalidArgumentError):
        IntensityVolume.from_spacing(np.array([[[np.nan]]]))
    with pytest.raises(InvalidArgumentError):
        LabelVolume.from_spacing(np.full((2, 2, 2), -1, dtype=np.int32))
    with pytest.raises(InvalidArgumentError):
        LabelVolume.from_spacing(np.ones((2, 2, 2)))  # float labels
    with pytest.raises(InvalidArgumentError):
        IntensityVolume(np.ones((2, 2, 2)), np.zeros((4, 4)))  # singular affine
    vol = IntensityVolume.from_spacing(np.ones((2, 3, 4)), voxel_size=(0.5, 2.0, 3.0))
    np.testing.assert_allclose(vol.voxel_size, (0.5, 2.0, 3.0), atol=1e-12)
    assert vol.voxel_volume_mm3 == pytest.approx(3.0)
