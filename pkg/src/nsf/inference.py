"""Test-time pipeline: normalize, resample to 1mm, predict, flip-average.

Predictors are pluggable: an in-process stub for tests and an external
process speaking the NIfTI exchange protocol (one float32 input file in, one
L+2-channel float32 file out, plus a JSON sidecar declaring the schema hash
and channel order).  Whatever the input resolution, the segmentation always
comes back on a 1mm isotropic grid.
"""

import json
import os
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np

from . import nifti
from .errors import ContractError, DegenerateInputError, InvalidArgumentError
from .metrics import (
    PredictionBundle,
    ROIReport,
    hard_dice,
    pearson_correlation,
    roi_volumes,
    spearman_correlation,
)
from .schema import DEFAULT_EVAL_ROI_IDS, schema_hash
from .volume import (
    IntensityVolume,
    LabelVolume,
    find_lr_axis,
    flip_lr,
    resample,
    resample_labels_to_grid,
)

CHANNEL_ORDER = "labels,image,bias"
NORM_ROBUST = "robust-minmax-01"
NORM_NONE = "none"


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    """Per-case output: hard segmentation plus the raw network by-products."""

    segmentation: LabelVolume
    posterior: np.ndarray
    pred_image: IntensityVolume
    pred_bias: IntensityVolume
    report: ROIReport


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------


class StubPredictor:
    """Testing double that decodes voxel intensities as label ids.

    Emulates a perfectly flip-equivariant model: lateral pair membership is
    re-derived from which side of the volume midplane a voxel sits on, so a
    mirrored input produces the mirrored, laterally swapped posterior.  The
    predicted image echoes the input; the predicted bias is 1 everywhere.
    """

    normalization = NORM_NONE

    def __init__(self, schema):
        self.schema = schema
        self.num_channels = schema.num_labels + 2

    def __call__(self, vol):
        schema = self.schema
        ids = np.rint(vol.data).astype(np.int32)
        lut = schema.id_to_index_lut()
        if ids.min() < 0 or ids.max() >= lut.shape[0] or (lut[ids] < 0).any():
            raise InvalidArgumentError("stub input does not encode schema label ids")

        left_of = np.arange(lut.shape[0], dtype=np.int32)
        right_of = np.arange(lut.shape[0], dtype=np.int32)
        for left, right in schema.lateral_pairs:
            left_of[left] = left_of[right] = left
            right_of[left] = right_of[right] = right

        i = np.arange(vol.dims[0], dtype=np.float64).reshape(-1, 1, 1)
        j = np.arange(vol.dims[1], dtype=np.float64).reshape(1, -1, 1)
        k = np.arange(vol.dims[2], dtype=np.float64).reshape(1, 1, -1)
        aff = vol.affine
        world_x = aff[0, 0] * i + aff[0, 1] * j + aff[0, 2] * k + aff[0, 3]
        center = np.array([(d - 1) / 2.0 for d in vol.dims])
        center_x = aff[0, :3] @ center + aff[0, 3]
        on_right = np.broadcast_to(world_x > center_x, vol.dims)
        ids = np.where(on_right, right_of[ids], left_of[ids])

        stack = np.zeros((schema.num_labels, *vol.dims))
        channel = lut[ids]
        ii, jj, kk = np.indices(vol.dims)
        stack[channel, ii, jj, kk] = 1.0
        ones = IntensityVolume(np.ones(vol.dims), vol.affine)
        return PredictionBundle(stack, vol, ones, schema)


class UniformPredictor:
    """Degenerate predictor: the same flat posterior everywhere (for tie tests)."""

    normalization = NORM_NONE

    def __init__(self, schema):
        self.schema = schema
        self.num_channels = schema.num_labels + 2

    def __call__(self, vol):
        num = self.schema.num_labels
        stack = np.full((num, *vol.dims), 1.0 / num)
        ones = IntensityVolume(np.ones(vol.dims), vol.affine)
        return PredictionBundle(stack, vol, ones, self.schema)


class ExternalPredictor:
    """Subprocess predictor speaking the NIfTI exchange protocol.

    Constructed from a JSON descriptor::

        {"command": ["mypredict", "{input}", "{output}"],
         "channels": 40, "schema_hash": "...",
         "normalization": "robust-minmax-01"}

    The command is run once per volume with {input}/{output} substituted by
    temp file paths; it must exit 0 and write an L+2-channel float32 NIfTI
    plus an ``<output>.json`` sidecar repeating the schema hash and channel
    order.  Any deviation raises ContractError.
    """

    def __init__(self, descriptor_path, schema):
        with open(descriptor_path, "r", encoding="utf-8") as fh:
            desc = json.load(fh)
        self.schema = schema
        self.command = [str(c) for c in desc["command"]]
        self.num_channels = int(desc["channels"])
        self.normalization = desc.get("normalization", NORM_ROBUST)
        expected = schema_hash(schema)
        if desc.get("schema_hash") != expected:
            raise ContractError(
                f"predictor schema hash {desc.get('schema_hash')!r} != {expected!r}"
            )
        if self.num_channels != schema.num_labels + 2:
            raise ContractError(
                f"predictor declares {self.num_channels} channels, schema needs {schema.num_labels + 2}"
            )

    def __call__(self, vol):
        num_labels = self.schema.num_labels
        with tempfile.TemporaryDirectory(prefix="nsf-predict-") as tmp:
            in_path = os.path.join(tmp, "input.nii.gz")
            out_path = os.path.join(tmp, "output.nii.gz")
            nifti.write_volume(vol, in_path, datatype=np.float32)
            cmd = [c.replace("{input}", in_path).replace("{output}", out_path) for c in self.command]
            proc = subprocess.run(cmd, capture_output=True, text=True)
            if proc.returncode != 0:
                raise ContractError(
                    f"predictor exited {proc.returncode}: {proc.stderr.strip()[-500:]}"
                )
            if not os.path.exists(out_path):
                raise ContractError("predictor wrote no output volume")
            sidecar_path = out_path + ".json"
            if not os.path.exists(sidecar_path):
                raise ContractError("predictor wrote no JSON sidecar")
            with open(sidecar_path, "r", encoding="utf-8") as fh:
                sidecar = json.load(fh)
            if sidecar.get("schema_hash") != schema_hash(self.schema):
                raise ContractError("sidecar schema hash mismatch")
            if sidecar.get("channel_order") != CHANNEL_ORDER:
                raise ContractError(f"unexpected channel order {sidecar.get('channel_order')!r}")
            channels = nifti.read_stack(out_path)
        if len(channels) != num_labels + 2:
            raise ContractError(
                f"predictor returned {len(channels)} channels, expected {num_labels + 2}"
            )
        if channels[0].dims != vol.dims:
            raise ContractError("predictor changed the grid")
        stack = np.stack([c.data for c in channels[:num_labels]], axis=0)
        image = channels[num_labels]
        bias_data = np.maximum(channels[num_labels + 1].data, 1e-30)
        bias = IntensityVolume(bias_data, image.affine)
        return PredictionBundle(stack, image, bias, self.schema)


# ---------------------------------------------------------------------------
# Segmentation pipeline
# ---------------------------------------------------------------------------


def robust_minmax(vol, lo_pct=1.0, hi_pct=99.0):
    """Map the [p1, p99] intensity window to [0, 1], clipping outside it."""
    lo, hi = np.percentile(vol.data, (lo_pct, hi_pct))
    if hi - lo < 1e-12:
        return vol.with_data(np.zeros(vol.dims))
    return vol.with_data(np.clip((vol.data - lo) / (hi - lo), 0.0, 1.0))


def _argmax_lowest_id(stack, schema):
    ids = np.asarray(schema.ids)
    order = np.argsort(ids, kind="stable")
    # ascending-id channel order + first-maximum argmax = lowest-id tie-break
    winner = np.argmax(stack[order], axis=0)
    return ids[order][winner].astype(np.int32)


def _flip_bundle_back(bundle, schema):
    axis = find_lr_axis(bundle.affine)
    perm = schema.channel_swap_permutation()
    stack = np.flip(bundle.soft_labels, axis=axis + 1)[perm]
    image = flip_lr(bundle.pred_image, schema)
    bias = flip_lr(bundle.pred_bias, schema)
    return PredictionBundle(stack, image, bias, schema)


def _predict(predictor, vol, tile_voxels):
    if tile_voxels is not None and int(np.prod(vol.dims)) > tile_voxels:
        return tiled_predict(predictor, vol, tile_voxels)
    return predictor(vol)


def segment(input_vol, predictor, tta=True, tile_voxels=None):
    """Full test-time pipeline; always returns a 1mm isotropic result.

    With ``tta`` the posterior is the average of the straight pass and the
    left-right-flipped pass (flipped back, lateral channels swapped); argmax
    ties resolve to the lowest label id.
    """
    schema = predictor.schema
    if predictor.num_channels != schema.num_labels + 2:
        raise ContractError(
            f"predictor metadata declares {predictor.num_channels} channels, "
            f"schema needs {schema.num_labels + 2}"
        )
    vol = input_vol
    if predictor.normalization == NORM_ROBUST:
        vol = robust_minmax(vol)
    vol = resample(vol, (1.0, 1.0, 1.0))

    bundle = _predict(predictor, vol, tile_voxels)
    if tta:
        flipped = flip_lr(vol, schema)
        mirrored = _flip_bundle_back(_predict(predictor, flipped, tile_voxels), schema)
        stack = (bundle.soft_labels + mirrored.soft_labels) / 2.0
        image = vol.with_data((bundle.pred_image.data + mirrored.pred_image.data) / 2.0)
        bias = vol.with_data((bundle.pred_bias.data + mirrored.pred_bias.data) / 2.0)
        bundle = PredictionBundle(stack, image, bias, schema)

    seg = LabelVolume(_argmax_lowest_id(bundle.soft_labels, schema), vol.affine)
    report = roi_volumes(seg, schema)
    return SegmentationResult(
        segmentation=seg,
        posterior=bundle.soft_labels,
        pred_image=bundle.pred_image,
        pred_bias=bundle.pred_bias,
        report=report,
    )


# ---------------------------------------------------------------------------
# Tiled prediction
# ---------------------------------------------------------------------------


def _tile_slices(n, patch, overlap):
    if patch >= n:
        return [(0, n)]
    stride = max(1, patch - overlap)
    starts = list(range(0, n - patch, stride)) + [n - patch]
    return [(s, s + patch) for s in sorted(set(starts))]


def _ramp(start, stop, n, overlap):
    w = np.ones(stop - start)
    edge = min(overlap, stop - start)
    if start > 0:
        w[:edge] = np.minimum(w[:edge], (np.arange(edge) + 1.0) / (edge + 1.0))
    if stop < n:
        w[-edge:] = np.minimum(w[-edge:], (np.arange(edge, 0, -1.0)) / (edge + 1.0))
    return w


def tiled_predict(predictor, vol, max_voxels, overlap=16):
    """Patch-wise prediction with linear blending over 16-voxel overlaps."""
    schema = predictor.schema
    patch = max(int(round(max_voxels ** (1.0 / 3.0))), 2 * overlap)
    dims = vol.dims
    num_labels = schema.num_labels
    acc = np.zeros((num_labels + 2, *dims))
    den = np.zeros(dims)
    for x0, x1 in _tile_slices(dims[0], patch, overlap):
        for y0, y1 in _tile_slices(dims[1], patch, overlap):
            for z0, z1 in _tile_slices(dims[2], patch, overlap):
                sub_aff = vol.affine.copy()
                sub_aff[:3, 3] = vol.affine[:3, 3] + vol.affine[:3, :3] @ np.array(
                    [x0, y0, z0], dtype=np.float64
                )
                sub = IntensityVolume(vol.data[x0:x1, y0:y1, z0:z1], sub_aff)
                bundle = predictor(sub)
                w = (
                    _ramp(x0, x1, dims[0], overlap)[:, None, None]
                    * _ramp(y0, y1, dims[1], overlap)[None, :, None]
                    * _ramp(z0, z1, dims[2], overlap)[None, None, :]
                )
                acc[:num_labels, x0:x1, y0:y1, z0:z1] += w * bundle.soft_labels
                acc[num_labels, x0:x1, y0:y1, z0:z1] += w * bundle.pred_image.data
                acc[num_labels + 1, x0:x1, y0:y1, z0:z1] += w * bundle.pred_bias.data
                den[x0:x1, y0:y1, z0:z1] += w
    acc /= den
    image = IntensityVolume(acc[num_labels], vol.affine)
    bias = IntensityVolume(np.maximum(acc[num_labels + 1], 1e-30), vol.affine)
    return PredictionBundle(acc[:num_labels], image, bias, schema)


# ---------------------------------------------------------------------------
# Dataset evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseEvaluation:
    name: str
    dice: dict
    pred_volumes: dict
    ref_volumes: dict
    pred_lateral: dict
    ref_lateral: dict
    pred_wmh_mm3: float
    ref_wmh_mm3: float


@dataclass(frozen=True)
class DatasetReport:
    cases: list
    mean_dice: dict
    anatomy_mean_dice: float
    wmh_mean_dice: float
    correlations: dict  # key -> {"pearson": r, "spearman": rho} or None
    mean_pred_wmh_mm3: float


def _safe_corr(xs, ys):
    try:
        return {
            "pearson": pearson_correlation(xs, ys),
            "spearman": spearman_correlation(xs, ys),
        }
    except (InvalidArgumentError, DegenerateInputError):
        return None


def evaluate_dataset(cases, predictor, tta=True, eval_roi_ids=None, names=None, tile_voxels=None):
    """Segment every case and score it against its reference labels.

    ``cases`` is a list of (input IntensityVolume, reference LabelVolume);
    references on other grids are resampled (nearest-neighbor) onto the 1mm
    prediction grid.  Volume correlations across cases need >= 3 cases and
    nonzero variance; degenerate entries are reported as None.
    """
    if not cases:
        raise InvalidArgumentError("evaluate_dataset needs at least one case")
    schema = predictor.schema
    if eval_roi_ids is None:
        if set(DEFAULT_EVAL_ROI_IDS) <= set(schema.ids):
            eval_roi_ids = list(DEFAULT_EVAL_ROI_IDS)
        else:
            skip = {schema.background_id, schema.wmh_id}
            eval_roi_ids = [i for i in schema.ids if i not in skip]
    if names is None:
        names = [f"case{i:03d}" for i in range(len(cases))]

    evaluated = []
    for name, (input_vol, reference) in zip(names, cases):
        result = segment(input_vol, predictor, tta=tta, tile_voxels=tile_voxels)
        seg = result.segmentation
        if reference.dims != seg.dims or not np.allclose(reference.affine, seg.affine, atol=1e-6):
            reference = resample_labels_to_grid(reference, seg.dims, seg.affine)
        dice = hard_dice(seg, reference, list(eval_roi_ids) + [schema.wmh_id])
        ref_report = roi_volumes(reference, schema)
        evaluated.append(
            CaseEvaluation(
                name=name,
                dice=dice,
                pred_volumes=result.report.volumes_mm3,
                ref_volumes=ref_report.volumes_mm3,
                pred_lateral=result.report.lateral_averages_mm3,
                ref_lateral=ref_report.lateral_averages_mm3,
                pred_wmh_mm3=result.report.wmh_volume_mm3,
                ref_wmh_mm3=ref_report.wmh_volume_mm3,
            )
        )

    mean_dice = {
        lab: float(np.mean([c.dice[lab] for c in evaluated]))
        for lab in list(eval_roi_ids) + [schema.wmh_id]
    }
    anatomy = [mean_dice[lab] for lab in eval_roi_ids]
    correlations = {}
    if len(evaluated) >= 3:
        for lab in list(eval_roi_ids) + [schema.wmh_id]:
            xs = [c.ref_volumes[lab] for c in evaluated]
            ys = [c.pred_volumes[lab] for c in evaluated]
            correlations[schema.names[lab]] = _safe_corr(xs, ys)
        for key in evaluated[0].pred_lateral:
            xs = [c.ref_lateral[key] for c in evaluated]
            ys = [c.pred_lateral[key] for c in evaluated]
            correlations[f"{key} (lateral mean)"] = _safe_corr(xs, ys)

    return DatasetReport(
        cases=evaluated,
        mean_dice=mean_dice,
        anatomy_mean_dice=float(np.mean(anatomy)) if anatomy else float("nan"),
        wmh_mean_dice=mean_dice[schema.wmh_id],
        correlations=correlations,
        mean_pred_wmh_mm3=float(np.mean([c.pred_wmh_mm3 for c in evaluated])),
    )
