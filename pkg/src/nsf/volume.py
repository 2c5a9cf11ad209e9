"""Value-type 3D volumes with world-space affine geometry.

Data is stored x-fastest (Fortran-contiguous ``(nx, ny, nz)`` arrays), which
matches the on-disk voxel order of the interchange format.  Volumes are
treated as immutable: every operation returns a new volume and never writes
into its inputs, so they can be shared freely across threads.
"""

from dataclasses import dataclass

import numpy as np

from ._kernels import nearest_gather, trilinear_gather
from .errors import InvalidArgumentError, OrientationError


def make_affine(voxel_size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    """Axis-aligned voxel-to-world matrix (RAS-style, no rotation)."""
    aff = np.eye(4)
    aff[0, 0], aff[1, 1], aff[2, 2] = voxel_size
    aff[:3, 3] = origin
    return aff


def _check_affine(affine):
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise InvalidArgumentError(f"affine must be 4x4, got {affine.shape}")
    if not np.all(np.isfinite(affine)):
        raise InvalidArgumentError("affine contains non-finite entries")
    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise InvalidArgumentError("affine is not invertible")
    return affine


class _Volume:
    """Geometry shared by both volume types."""

    @classmethod
    def from_spacing(cls, data, voxel_size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        return cls(data, make_affine(voxel_size, origin))

    @property
    def dims(self):
        return self.data.shape

    @property
    def voxel_size(self):
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    @property
    def voxel_volume_mm3(self):
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    def with_data(self, data):
        """Same grid, new voxel values."""
        return type(self)(data, self.affine)


@dataclass(frozen=True, eq=False)
class IntensityVolume(_Volume):
    """Scalar 3D image with voxel-to-world affine geometry."""

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.asfortranarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidArgumentError(f"expected non-empty 3D data, got shape {data.shape}")
        if np.isnan(data).any():
            raise InvalidArgumentError("intensity data contains NaN")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", _check_affine(self.affine))


@dataclass(frozen=True, eq=False)
class LabelVolume(_Volume):
    """Integer label map on the same geometric model as IntensityVolume."""

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise InvalidArgumentError(f"labels must be integers, got dtype {data.dtype}")
        data = np.asfortranarray(data, dtype=np.int32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidArgumentError(f"expected non-empty 3D labels, got shape {data.shape}")
        if data.min() < 0:
            raise InvalidArgumentError("negative label id")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", _check_affine(self.affine))

    def label_set(self):
        return set(np.unique(self.data).tolist())


@dataclass(frozen=True, eq=False)
class DeformationField:
    """World-space displacement vectors (mm) on a control grid.

    The control grid spans the target volume with its corner control points
    on the corner voxels; it is upsampled trilinearly to ``target_dims`` when
    applied.  An all-zero grid is exactly the identity map.
    """

    grid: np.ndarray  # (gx, gy, gz, 3)
    target_dims: tuple

    def __post_init__(self):
        grid = np.ascontiguousarray(self.grid, dtype=np.float64)
        if grid.ndim != 4 or grid.shape[3] != 3 or min(grid.shape[:3]) < 1:
            raise InvalidArgumentError(f"field grid must be (gx,gy,gz,3), got {grid.shape}")
        if not np.all(np.isfinite(grid)):
            raise InvalidArgumentError("deformation field contains non-finite values")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "target_dims", tuple(int(d) for d in self.target_dims))
        if len(self.target_dims) != 3 or min(self.target_dims) < 1:
            raise InvalidArgumentError(f"bad target dims {self.target_dims}")

    @classmethod
    def identity(cls, dims, control_dims=(2, 2, 2)):
        return cls(np.zeros((*control_dims, 3)), tuple(dims))


# ---------------------------------------------------------------------------
# Coordinate plumbing
# ---------------------------------------------------------------------------


def _output_coords(dims_out, matrix):
    """Voxel coordinates of an output grid mapped through a 4x4 matrix.

    Returns three flat float64 arrays in Fortran (x-fastest) order.
    """
    i = np.arange(dims_out[0], dtype=np.float64).reshape(-1, 1, 1)
    j = np.arange(dims_out[1], dtype=np.float64).reshape(1, -1, 1)
    k = np.arange(dims_out[2], dtype=np.float64).reshape(1, 1, -1)
    coords = []
    for row in range(3):
        c = matrix[row, 0] * i + matrix[row, 1] * j + matrix[row, 2] * k + matrix[row, 3]
        coords.append(np.broadcast_to(c, dims_out).ravel(order="F"))
    return coords


def _gather_to_volume(kind, vol, xs, ys, zs, dims_out, affine_out, fill, clamp):
    if kind == "trilinear":
        flat = trilinear_gather(vol.data, xs, ys, zs, float(fill), clamp)
        data = flat.reshape(dims_out, order="F")
        return IntensityVolume(data, affine_out)
    flat = nearest_gather(vol.data, xs, ys, zs, vol.data.dtype.type(fill), clamp)
    data = flat.reshape(dims_out, order="F")
    return LabelVolume(data, affine_out)


def _target_grid(vol, target_spacing):
    spacing = np.asarray(target_spacing, dtype=np.float64)
    if spacing.shape != (3,) or np.any(spacing <= 0) or not np.all(np.isfinite(spacing)):
        raise InvalidArgumentError(f"target spacing must be 3 positive reals, got {target_spacing}")
    vs = vol.voxel_size
    extent = np.asarray(vol.dims) * vs
    dims_out = np.maximum(1, np.ceil(extent / spacing - 1e-6)).astype(int)
    direction = vol.affine[:3, :3] / vs
    affine_out = np.eye(4)
    affine_out[:3, :3] = direction * spacing
    affine_out[:3, 3] = vol.affine[:3, 3]
    return tuple(dims_out), affine_out, spacing


def _resample_onto(kind, vol, dims_out, affine_out, fill=0):
    matrix = np.linalg.inv(vol.affine) @ affine_out
    xs, ys, zs = _output_coords(dims_out, matrix)
    return _gather_to_volume(kind, vol, xs, ys, zs, dims_out, affine_out, fill, clamp=True)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def resample(vol, target_spacing, method="trilinear"):
    """Resample an intensity volume to a new voxel spacing.

    The field of view is preserved within one voxel (output dims are the
    ceiling of extent/spacing) and voxel (0,0,0) keeps its world position.
    Edge samples interpolate clamped border values, so constants survive any
    spacing exactly.
    """
    if method != "trilinear":
        raise InvalidArgumentError(f"unsupported interpolation {method!r}")
    if not isinstance(vol, IntensityVolume):
        raise InvalidArgumentError("resample expects an IntensityVolume")
    dims_out, affine_out, spacing = _target_grid(vol, target_spacing)
    if np.allclose(spacing, vol.voxel_size, rtol=0.0, atol=1e-9):
        return IntensityVolume(vol.data, vol.affine)
    return _resample_onto("trilinear", vol, dims_out, affine_out)


def resample_labels(vol, target_spacing):
    """Nearest-neighbor counterpart of :func:`resample` for label maps."""
    if not isinstance(vol, LabelVolume):
        raise InvalidArgumentError("resample_labels expects a LabelVolume")
    dims_out, affine_out, spacing = _target_grid(vol, target_spacing)
    if np.allclose(spacing, vol.voxel_size, rtol=0.0, atol=1e-9):
        return LabelVolume(vol.data, vol.affine)
    return _resample_onto("nearest", vol, dims_out, affine_out)


def resample_to_grid(vol, dims, affine):
    """Trilinear resample onto an explicit (dims, affine) grid."""
    dims = tuple(int(d) for d in dims)
    return _resample_onto("trilinear", vol, dims, _check_affine(affine))


def resample_labels_to_grid(vol, dims, affine):
    """Nearest-neighbor resample of labels onto an explicit grid."""
    dims = tuple(int(d) for d in dims)
    return _resample_onto("nearest", vol, dims, _check_affine(affine))


def apply_deformation(vol, field, background=0):
    """Warp a volume by a displacement field.

    Intensity volumes are pulled back with trilinear interpolation, label
    volumes with nearest-neighbor; samples displaced out of the field of view
    take ``background`` (0 intensity / background label id).
    """
    if tuple(field.target_dims) != tuple(vol.dims):
        raise InvalidArgumentError(
            f"field target dims {field.target_dims} do not match volume dims {vol.dims}"
        )
    disp = _upsample_field(field)
    lin_inv = np.linalg.inv(vol.affine[:3, :3])
    # displacement is world mm; convert to voxel offsets of this grid
    off = disp @ lin_inv.T

    base = np.eye(4)
    xs, ys, zs = _output_coords(vol.dims, base)
    xs = xs + off[..., 0].ravel(order="F")
    ys = ys + off[..., 1].ravel(order="F")
    zs = zs + off[..., 2].ravel(order="F")

    kind = "trilinear" if isinstance(vol, IntensityVolume) else "nearest"
    fill = 0.0 if kind == "trilinear" else int(background)
    return _gather_to_volume(kind, vol, xs, ys, zs, vol.dims, vol.affine, fill, clamp=False)


def upsample_control_grid(grid, dims):
    """Corner-aligned trilinear upsampling of a control grid to full dims.

    ``grid`` is (gx, gy, gz) for scalar fields or (gx, gy, gz, c) for vector
    fields; corner control points land exactly on corner voxels, so linear
    functions of position are reproduced exactly.
    """
    grid = np.asarray(grid, dtype=np.float64)
    scalar = grid.ndim == 3
    if scalar:
        grid = grid[..., None]
    gdims = grid.shape[:3]
    dims = tuple(int(d) for d in dims)
    if gdims == dims:
        return grid[..., 0] if scalar else grid
    axes = []
    for n, g in zip(dims, gdims):
        if n == 1 or g == 1:
            axes.append(np.zeros(n))
        else:
            axes.append(np.arange(n, dtype=np.float64) * ((g - 1) / (n - 1)))
    i = axes[0].reshape(-1, 1, 1)
    j = axes[1].reshape(1, -1, 1)
    k = axes[2].reshape(1, 1, -1)
    xs = np.broadcast_to(i, dims).ravel(order="F")
    ys = np.broadcast_to(j, dims).ravel(order="F")
    zs = np.broadcast_to(k, dims).ravel(order="F")
    out = np.empty((*dims, grid.shape[3]))
    for c in range(grid.shape[3]):
        comp = np.asfortranarray(grid[..., c])
        out[..., c] = trilinear_gather(comp, xs, ys, zs, 0.0, True).reshape(dims, order="F")
    return out[..., 0] if scalar else out


def _upsample_field(field):
    return upsample_control_grid(field.grid, field.target_dims)


def find_lr_axis(affine):
    """Voxel axis most aligned with world left-right (largest |x| column entry)."""
    scores = np.abs(affine[0, :3])
    order = np.argsort(scores)[::-1]
    best, runner_up = scores[order[0]], scores[order[1]]
    if best < 1e-9 or runner_up >= best * (1.0 - 1e-6):
        raise OrientationError(f"left-right axis is ambiguous for affine x-row {affine[0, :3]}")
    return int(order[0])


def flip_lr(vol, schema):
    """Mirror a volume across the left-right axis.

    Label volumes additionally exchange lateral pair ids so the flipped map
    stays anatomically consistent.  Exact involution: flipping twice returns
    the original volume bit for bit.
    """
    axis = find_lr_axis(vol.affine)
    data = np.flip(vol.data, axis=axis)
    if isinstance(vol, IntensityVolume):
        return IntensityVolume(data, vol.affine)
    lut = schema.lateral_swap_lut()
    if vol.data.max() >= lut.shape[0]:
        raise InvalidArgumentError("label volume contains ids outside the schema")
    return LabelVolume(lut[data], vol.affine)


def validate_labels(vol, schema):
    """Raise unless every voxel value is a member of the schema."""
    present = vol.label_set()
    unknown = present - set(schema.ids)
    if unknown:
        raise InvalidArgumentError(f"labels not in schema: {sorted(unknown)}")
