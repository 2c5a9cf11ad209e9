"""Composite multi-task loss and evaluation metrics.

Pure numeric reductions, independent of any learning framework: the
four-term loss (cross-entropy, average soft Dice, L1 on the predicted image,
L1 on the log bias field), hard Dice, ROI volumes, and volume correlations.
"""

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInputError, DomainError, InvalidArgumentError
from .volume import IntensityVolume

DICE_EPS = 1e-6
CE_PROB_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class PredictionBundle:
    """Network output: L softmax channels plus image and bias regressions.

    ``soft_labels`` is (L, nx, ny, nz) in the schema's channel order.
    """

    soft_labels: np.ndarray
    pred_image: IntensityVolume
    pred_bias: IntensityVolume
    schema: object

    def __post_init__(self):
        stack = np.asarray(self.soft_labels, dtype=np.float64)
        if stack.ndim != 4 or stack.shape[0] != self.schema.num_labels:
            raise InvalidArgumentError(
                f"soft labels must be (L={self.schema.num_labels}, nx, ny, nz), got {stack.shape}"
            )
        if stack.shape[1:] != self.pred_image.dims or stack.shape[1:] != self.pred_bias.dims:
            raise InvalidArgumentError("bundle grids differ")
        if not np.allclose(self.pred_image.affine, self.pred_bias.affine, atol=1e-6):
            raise InvalidArgumentError("bundle affines differ")
        if stack.min() < 0:
            raise InvalidArgumentError("negative soft-label probability")
        sums = stack.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-4:
            raise InvalidArgumentError("soft-label channels must sum to 1 per voxel")
        if self.pred_bias.data.min() <= 0:
            raise InvalidArgumentError("predicted bias field must be strictly positive")
        object.__setattr__(self, "soft_labels", stack)

    @property
    def dims(self):
        return self.pred_image.dims

    @property
    def affine(self):
        return self.pred_image.affine


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    avg_dice: float
    l1_image: float
    l1_logbias: float
    total: float

    def __post_init__(self):
        if self.ce < 0 or not 0.0 <= self.avg_dice <= 1.0 or self.l1_image < 0 or self.l1_logbias < 0:
            raise InvalidArgumentError(f"loss terms out of range: {self}")
        if self.total != self.ce - self.avg_dice + self.l1_image + self.l1_logbias:
            raise InvalidArgumentError("total must equal ce - avg_dice + l1_image + l1_logbias")


def _target_channels(pred, target):
    if target.dims != pred.dims or not np.allclose(target.affine, pred.affine, atol=1e-6):
        raise InvalidArgumentError("prediction and target grids differ")
    lut = pred.schema.id_to_index_lut()
    if target.data.max() >= lut.shape[0]:
        raise InvalidArgumentError("target labels outside the schema")
    idx = lut[target.data].ravel()
    if idx.min() < 0:
        raise InvalidArgumentError("target labels outside the schema")
    return idx


def cross_entropy(pred, target):
    """Mean over voxels of -log p(true label), probabilities floored at 1e-12."""
    idx = _target_channels(pred, target)
    flat = pred.soft_labels.reshape(pred.schema.num_labels, -1)
    p_true = flat[idx, np.arange(idx.shape[0])]
    return float(-np.log(np.maximum(p_true, CE_PROB_FLOOR)).mean())


def soft_dice_average(pred, target, include_background=True):
    """Unweighted mean over labels of the soft Dice overlap.

    Per label: 2 * sum(p * y) / (sum(p) + sum(y) + eps).  A label that is
    absent from the target and predicted with zero mass scores 0, which
    penalizes false positives on lesion-free targets.
    """
    idx = _target_channels(pred, target)
    num_labels = pred.schema.num_labels
    flat = pred.soft_labels.reshape(num_labels, -1)
    p_true = flat[idx, np.arange(idx.shape[0])]
    inter = np.bincount(idx, weights=p_true, minlength=num_labels)
    target_counts = np.bincount(idx, minlength=num_labels).astype(np.float64)
    pred_mass = flat.sum(axis=1)
    dice = 2.0 * inter / (pred_mass + target_counts + DICE_EPS)
    if not include_background:
        keep = np.ones(num_labels, dtype=bool)
        keep[pred.schema.index_of(pred.schema.background_id)] = False
        dice = dice[keep]
    return float(dice.mean())


def composite_loss(pred, sample, include_background=True):
    """Four equally weighted terms: CE - AvgDice + L1(image) + L1(log bias)."""
    ce = cross_entropy(pred, sample.labels)
    avg_dice = soft_dice_average(pred, sample.labels, include_background)
    if sample.target_image.dims != pred.dims or sample.target_bias.dims != pred.dims:
        raise InvalidArgumentError("prediction and sample grids differ")
    if pred.pred_bias.data.min() <= 0 or sample.target_bias.data.min() <= 0:
        raise DomainError("bias fields must be strictly positive")
    l1_image = float(np.abs(pred.pred_image.data - sample.target_image.data).mean())
    l1_logbias = float(
        np.abs(np.log(pred.pred_bias.data) - np.log(sample.target_bias.data)).mean()
    )
    return LossBreakdown(
        ce=ce,
        avg_dice=avg_dice,
        l1_image=l1_image,
        l1_logbias=l1_logbias,
        total=ce - avg_dice + l1_image + l1_logbias,
    )


def hard_dice(a, b, label_ids):
    """Per-label 2|A∩B| / (|A|+|B|); 1 when both sides are empty, 0 when one is."""
    if a.dims != b.dims or not np.allclose(a.affine, b.affine, atol=1e-6):
        raise InvalidArgumentError("segmentations must share one grid")
    m = int(max(a.data.max(), b.data.max(), max(label_ids))) + 1
    count_a = np.bincount(a.data.ravel(), minlength=m)
    count_b = np.bincount(b.data.ravel(), minlength=m)
    agree = a.data == b.data
    inter = np.bincount(a.data[agree].ravel(), minlength=m)
    out = {}
    for lab in label_ids:
        na, nb = int(count_a[lab]), int(count_b[lab])
        if na == 0 and nb == 0:
            out[int(lab)] = 1.0
        else:
            out[int(lab)] = 2.0 * inter[lab] / (na + nb)
    return out


def _pair_base_name(schema, left, right):
    names = schema.names
    ln, rn = names[left], names[right]
    for prefix in ("left-", "right-"):
        if ln.startswith(prefix):
            ln = ln[len(prefix):]
        if rn.startswith(prefix):
            rn = rn[len(prefix):]
    return ln if ln == rn else f"{names[left]}|{names[right]}"


@dataclass(frozen=True)
class ROIReport:
    """Per-label volumes (and optionally Dice vs a reference) for one subject."""

    volumes_mm3: dict
    wmh_volume_mm3: float
    lateral_averages_mm3: dict
    dice: dict = None

    def __post_init__(self):
        if any(v < 0 for v in self.volumes_mm3.values()) or self.wmh_volume_mm3 < 0:
            raise InvalidArgumentError("negative volume")
        if self.dice is not None and any(not 0.0 <= d <= 1.0 for d in self.dice.values()):
            raise InvalidArgumentError("Dice out of [0, 1]")


def roi_volumes(seg, schema, reference=None):
    """Label volumes in mm^3 (count x voxel volume), plus lateral averages."""
    m = max(schema.ids) + 1
    if seg.data.max() >= m:
        raise InvalidArgumentError("segmentation contains ids outside the schema")
    counts = np.bincount(seg.data.ravel(), minlength=m)
    vox = seg.voxel_volume_mm3
    volumes = {int(lab): float(counts[lab] * vox) for lab in schema.ids}
    lateral = {
        _pair_base_name(schema, left, right): (volumes[left] + volumes[right]) / 2.0
        for left, right in schema.lateral_pairs
    }
    dice = None
    if reference is not None:
        dice = hard_dice(seg, reference, schema.ids)
    return ROIReport(
        volumes_mm3=volumes,
        wmh_volume_mm3=volumes[schema.wmh_id],
        lateral_averages_mm3=lateral,
        dice=dice,
    )


def pearson_correlation(x, y):
    """Product-moment correlation of two equal-length vectors (n >= 3)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 3:
        raise InvalidArgumentError(f"need two equal vectors of length >= 3, got {x.shape}/{y.shape}")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError("zero variance in correlation input")
    r = float(dx @ dy) / (sx * sy)
    return min(max(r, -1.0), 1.0)


def spearman_correlation(x, y):
    """Rank correlation (average ranks for ties); robustness companion to Pearson."""
    return pearson_correlation(rankdata(x), rankdata(y))


# ---------------------------------------------------------------------------
# Per-subject report emission
# ---------------------------------------------------------------------------


def roi_report_rows(report, schema, subject=""):
    rows = []
    names = schema.names
    for lab in schema.ids:
        rows.append(
            {
                "subject": subject,
                "id": lab,
                "name": names[lab],
                "volume_mm3": report.volumes_mm3[lab],
                "dice": "" if report.dice is None else report.dice.get(lab, ""),
            }
        )
    return rows


def write_roi_report_csv(report, schema, path, subject=""):
    rows = roi_report_rows(report, schema, subject)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["subject", "id", "name", "volume_mm3", "dice"])
        writer.writeheader()
        writer.writerows(rows)


def write_roi_report_json(report, schema, path, subject=""):
    payload = {
        "subject": subject,
        "labels": roi_report_rows(report, schema, subject),
        "wmh_volume_mm3": report.wmh_volume_mm3,
        "lateral_averages_mm3": report.lateral_averages_mm3,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
