"""Randomized synthetic MRI generation.

One draw takes a (real 1mm T1w, label map) pair and produces a training
sample: a randomly deformed label map, a label-conditioned Gaussian-mixture
rendering of it corrupted by a smooth multiplicative bias field and a
simulated acquisition (orientation/resolution via Gaussian slice-profile
smoothing, then upsampling back to the 1mm grid), plus the deformed real
image (WM-median normalized) and the bias field as regression targets.

Everything is a pure function of (inputs, config, rng stream): a fixed seed
reproduces a sample bit for bit, and independent rng streams can run in
parallel workers.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter1d

from ._kernels import gmm_synthesize
from .errors import DegenerateInputError, InvalidArgumentError
from .volume import (
    DeformationField,
    IntensityVolume,
    LabelVolume,
    apply_deformation,
    make_affine,
    resample,
    resample_to_grid,
    upsample_control_grid,
    validate_labels,
)

REGIMES = ("isotropic-1mm", "clinical-2d", "portable-stock", "lowfield-isotropic")
ORIENTATIONS = ("axial", "coronal", "sagittal")
_SLICE_AXIS = {"sagittal": 0, "coronal": 1, "axial": 2}

# WM mean above this -> T1w-like (dark lesions); below -> T2/FLAIR-like (bright)
T1_CONTRAST_THRESHOLD = 128.0

# fixed intensity scale the generator works on; the WMH mean is drawn on the
# constrained side of the WM mean within these bounds
INTENSITY_RANGE = (0.0, 255.0)

# Gaussian slice profile: FWHM equals the simulated slice spacing
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class GeneratorConfig:
    """All randomization ranges of the generator.

    The noise std range and bias strength default to twice the values used
    for high-field-only synthesis, to cover low-SNR portable acquisitions.
    """

    mean_range: tuple = (0.0, 255.0)
    std_range: tuple = (1.0, 30.0)  # doubled from the (1, 15) high-field default
    bias_log_sigma: float = 0.6  # doubled from 0.3
    bias_grid: int = 4
    rotation_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    shear_max: float = 0.1
    translation_mm: float = 10.0
    nonlin_grid: int = 10
    nonlin_sigma_mm: float = 3.0
    regime_probs: tuple = (0.25, 0.25, 0.25, 0.25)  # aligned with REGIMES
    clinical_spacing_range: tuple = (2.5, 8.5)
    portable_inplane_range: tuple = (1.4, 1.8)
    portable_spacing: float = 5.0
    lowfield_range: tuple = (2.0, 5.0)
    seed: int = 1234

    def __post_init__(self):
        for name in ("mean_range", "std_range", "scale_range",
                     "clinical_spacing_range", "portable_inplane_range", "lowfield_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise InvalidArgumentError(f"{name} must be (lo, hi) with lo <= hi, got {(lo, hi)}")
        if self.mean_range[0] < INTENSITY_RANGE[0] or self.mean_range[1] > INTENSITY_RANGE[1]:
            raise InvalidArgumentError(f"mean_range must lie within {INTENSITY_RANGE}")
        if self.std_range[0] < 0:
            raise InvalidArgumentError("std_range must be non-negative")
        for name in ("bias_log_sigma", "rotation_deg", "shear_max",
                     "translation_mm", "nonlin_sigma_mm"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0")
        if self.bias_grid < 2 or self.nonlin_grid < 2:
            raise InvalidArgumentError("control grids need at least 2 points per axis")
        probs = np.asarray(self.regime_probs, dtype=np.float64)
        if probs.shape != (4,) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise InvalidArgumentError(f"regime_probs must be 4 non-negatives summing to 1, got {self.regime_probs}")

    def identity_geometry(self):
        """Copy with every geometric augmentation disabled."""
        return replace(
            self,
            rotation_deg=0.0,
            scale_range=(1.0, 1.0),
            shear_max=0.0,
            translation_mm=0.0,
            nonlin_sigma_mm=0.0,
        )


@dataclass(frozen=True)
class TrainingPair:
    """A real 1mm T1w scan and its label map on the same grid."""

    image: IntensityVolume
    labels: LabelVolume

    def __post_init__(self):
        if self.image.dims != self.labels.dims:
            raise InvalidArgumentError(
                f"image dims {self.image.dims} != label dims {self.labels.dims}"
            )
        if not np.allclose(self.image.affine, self.labels.affine, atol=1e-4):
            raise InvalidArgumentError("image and labels disagree on the affine")


@dataclass(frozen=True)
class GMMParams:
    """Per-label intensity Gaussians, aligned with the schema channel order."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        stds = np.asarray(self.stds, dtype=np.float64)
        if means.shape != stds.shape or means.ndim != 1:
            raise InvalidArgumentError("means/stds must be matching 1D arrays")
        if np.any(stds < 0):
            raise InvalidArgumentError("negative std")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)

    def wm_mean(self, schema):
        idx = [schema.index_of(i) for i in schema.wm_ids]
        return float(np.mean(self.means[idx]))

    def wmh_mean(self, schema):
        return float(self.means[schema.index_of(schema.wmh_id)])

    def satisfies_wmh_constraint(self, schema):
        wm = self.wm_mean(schema)
        wmh = self.wmh_mean(schema)
        return wmh < wm if wm > T1_CONTRAST_THRESHOLD else wmh > wm

    def as_table(self, schema):
        return {
            int(lab): {"mean": float(m), "std": float(s)}
            for (lab, _), m, s in zip(schema.labels, self.means, self.stds)
        }


@dataclass(frozen=True)
class ResolutionSpec:
    """One simulated acquisition geometry."""

    regime: str
    voxel_size: tuple
    orientation: str = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise InvalidArgumentError(f"unknown regime {self.regime!r}")
        vs = tuple(float(v) for v in self.voxel_size)
        if len(vs) != 3 or min(vs) <= 0:
            raise InvalidArgumentError(f"bad simulated voxel size {self.voxel_size}")
        object.__setattr__(self, "voxel_size", vs)
        if self.regime in ("clinical-2d", "portable-stock"):
            if self.orientation not in ORIENTATIONS:
                raise InvalidArgumentError(f"2D regime needs an orientation, got {self.orientation!r}")
        elif self.orientation is not None:
            raise InvalidArgumentError(f"{self.regime} takes no orientation")

    @property
    def slice_axis(self):
        return _SLICE_AXIS[self.orientation] if self.orientation else None


@dataclass(frozen=True)
class SynthSample:
    """One generator draw; all four volumes share the 1mm grid."""

    synth: IntensityVolume
    labels: LabelVolume
    target_image: IntensityVolume
    target_bias: IntensityVolume

    def __post_init__(self):
        ref = self.synth
        for other in (self.labels, self.target_image, self.target_bias):
            if other.dims != ref.dims or not np.allclose(other.affine, ref.affine, atol=1e-6):
                raise InvalidArgumentError("sample volumes must share one grid")
        if self.target_bias.data.min() <= 0:
            raise InvalidArgumentError("bias field must be strictly positive")

    def validate(self, schema):
        validate_labels(self.labels, schema)
        wm_mask = np.isin(self.labels.data, schema.wm_ids)
        med = np.median(self.target_image.data[wm_mask])
        if abs(med - 1.0) > 1e-3:
            raise InvalidArgumentError(f"target image WM median is {med}, expected 1")


@dataclass(frozen=True)
class SampleInfo:
    """Reproducibility record for one draw (manifest material)."""

    resolution: ResolutionSpec
    gmm: GMMParams
    deformation_max_mm: float = float("nan")


# ---------------------------------------------------------------------------
# Randomized draws
# ---------------------------------------------------------------------------


def sample_gmm_params(schema, config, rng):
    """Draw per-label Gaussians; the WMH mean is tied to the WM mean.

    When the WM mean is above 128 the appearance is T1w-like and the WMH mean
    is drawn below it; otherwise T2/FLAIR-like and drawn above it (uniform on
    the constrained interval either way).
    """
    lo, hi = config.mean_range
    means = rng.uniform(lo, hi, size=schema.num_labels)
    wm_idx = [schema.index_of(i) for i in schema.wm_ids]
    wm_mean = float(np.mean(means[wm_idx]))
    wmh_idx = schema.index_of(schema.wmh_id)
    if wm_mean > T1_CONTRAST_THRESHOLD:
        means[wmh_idx] = rng.uniform(INTENSITY_RANGE[0], wm_mean)
    else:
        means[wmh_idx] = rng.uniform(wm_mean, INTENSITY_RANGE[1])
    stds = rng.uniform(config.std_range[0], config.std_range[1], size=schema.num_labels)
    return GMMParams(means=means, stds=stds)


def _rotation_matrix(angles_rad):
    ax, ay, az = angles_rad
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def sample_deformation(dims, config, rng):
    """Random affine (about the volume center) composed with a smooth field.

    The combined displacement is sampled on the nonlinear control grid; the
    affine part is linear, so corner-aligned trilinear upsampling reproduces
    it exactly.  All ranges zero -> exact identity field.
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 1:
        raise InvalidArgumentError(f"bad dims {dims}")

    rot = np.deg2rad(rng.uniform(-config.rotation_deg, config.rotation_deg, 3))
    scale = rng.uniform(config.scale_range[0], config.scale_range[1], 3)
    shear = rng.uniform(-config.shear_max, config.shear_max, 3)
    trans = rng.uniform(-config.translation_mm, config.translation_mm, 3)

    shear_m = np.eye(3)
    shear_m[0, 1], shear_m[0, 2], shear_m[1, 2] = shear
    lin = _rotation_matrix(rot) @ shear_m @ np.diag(scale)

    g = config.nonlin_grid
    noise = rng.normal(0.0, config.nonlin_sigma_mm, size=(g, g, g, 3))

    center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    axes = [np.linspace(0.0, d - 1.0, g) for d in dims]
    px, py, pz = np.meshgrid(*axes, indexing="ij")
    rel = np.stack([px - center[0], py - center[1], pz - center[2]], axis=-1)
    affine_disp = rel @ (lin - np.eye(3)).T + trans
    return DeformationField(grid=affine_disp + noise, target_dims=dims)


def sample_bias_field(dims, config, rng, affine=None):
    """exp of a trilinearly upsampled coarse grid of N(0, sigma^2) log-gains."""
    dims = tuple(int(d) for d in dims)
    g = config.bias_grid
    log_ctrl = rng.normal(0.0, config.bias_log_sigma, size=(g, g, g))
    log_full = upsample_control_grid(log_ctrl, dims)
    if affine is None:
        affine = make_affine()
    return IntensityVolume(np.exp(log_full), affine)


def sample_resolution(config, rng):
    """Draw one of the four acquisition regimes and its geometry."""
    idx = int(rng.choice(4, p=np.asarray(config.regime_probs)))
    regime = REGIMES[idx]
    if regime == "isotropic-1mm":
        return ResolutionSpec(regime, (1.0, 1.0, 1.0))
    if regime == "clinical-2d":
        orientation = ORIENTATIONS[int(rng.integers(3))]
        spacing = float(rng.uniform(*config.clinical_spacing_range))
        vs = [1.0, 1.0, 1.0]
        vs[_SLICE_AXIS[orientation]] = spacing
        return ResolutionSpec(regime, tuple(vs), orientation)
    if regime == "portable-stock":
        inplane = float(rng.uniform(*config.portable_inplane_range))
        return ResolutionSpec(regime, (inplane, inplane, config.portable_spacing), "axial")
    vs = rng.uniform(config.lowfield_range[0], config.lowfield_range[1], 3)
    return ResolutionSpec(regime, tuple(float(v) for v in vs))


# ---------------------------------------------------------------------------
# Deterministic pipeline stages
# ---------------------------------------------------------------------------


def _require_1mm(vol):
    if not np.allclose(vol.voxel_size, 1.0, atol=1e-3):
        raise InvalidArgumentError(f"expected a 1mm grid, got voxel size {vol.voxel_size}")


def simulate_acquisition(vol, spec):
    """Slice-profile smoothing + down/up-sampling through the simulated grid.

    Axes whose simulated spacing exceeds 1mm are blurred with a Gaussian of
    FWHM equal to that spacing, the volume is resampled to the simulated
    voxel size, then brought back onto the input's 1mm grid.
    """
    _require_1mm(vol)
    vs = np.asarray(spec.voxel_size)
    if spec.regime == "isotropic-1mm" or np.all(vs <= 1.0 + 1e-9):
        return IntensityVolume(vol.data, vol.affine)
    data = vol.data
    for axis in range(3):
        if vs[axis] > 1.0 + 1e-9:
            sigma = vs[axis] * FWHM_TO_SIGMA  # in voxels == mm on the 1mm grid
            data = gaussian_filter1d(data, sigma, axis=axis, mode="nearest")
    low = resample(IntensityVolume(data, vol.affine), tuple(vs))
    return resample_to_grid(low, vol.dims, vol.affine)


def normalize_wm_median(img, labels, schema):
    """Scale an image so the median intensity over WM voxels is 1."""
    if img.dims != labels.dims:
        raise InvalidArgumentError("image/label grids differ")
    mask = np.isin(labels.data, schema.wm_ids)
    if not mask.any():
        raise DegenerateInputError("no white-matter voxels to normalize against")
    med = float(np.median(img.data[mask]))
    if not math.isfinite(med) or abs(med) < 1e-12:
        raise DegenerateInputError(f"degenerate WM median {med}")
    return img.with_data(img.data / med)


def synthesize_intensities(labels, schema, params, rng):
    """Voxelwise draw from the label-conditioned GMM, clamped at 0."""
    lut = schema.id_to_index_lut()
    if labels.data.max() >= lut.shape[0]:
        raise InvalidArgumentError("label volume contains ids outside the schema")
    channel = lut[labels.data]
    if channel.min() < 0:
        raise InvalidArgumentError("label volume contains ids outside the schema")
    flat_idx = np.ascontiguousarray(channel.ravel(order="F"))
    noise = rng.standard_normal(flat_idx.shape[0])
    flat = gmm_synthesize(flat_idx, params.means, params.stds, noise)
    return IntensityVolume(flat.reshape(labels.dims, order="F"), labels.affine)


def generate_sample(pair, schema, config, rng, with_info=False):
    """One full generator draw; see the module docstring for the stages.

    The rng stream is consumed in a fixed order (deformation, GMM, image
    noise, bias, resolution), so a given (pair, config, seed) always yields
    the same sample.
    """
    _require_1mm(pair.image)
    validate_labels(pair.labels, schema)

    fld = sample_deformation(pair.labels.dims, config, rng)
    labels = apply_deformation(pair.labels, fld, background=schema.background_id)
    real = apply_deformation(pair.image, fld)

    params = sample_gmm_params(schema, config, rng)
    gmm_img = synthesize_intensities(labels, schema, params, rng)

    bias = sample_bias_field(labels.dims, config, rng, affine=labels.affine)
    corrupted = IntensityVolume(gmm_img.data * bias.data, labels.affine)

    spec = sample_resolution(config, rng)
    synth = simulate_acquisition(corrupted, spec)

    target = normalize_wm_median(real, labels, schema)
    sample = SynthSample(synth=synth, labels=labels, target_image=target, target_bias=bias)
    if not with_info:
        return sample
    info = SampleInfo(
        resolution=spec,
        gmm=params,
        deformation_max_mm=float(np.linalg.norm(fld.grid, axis=-1).max()),
    )
    return sample, info
