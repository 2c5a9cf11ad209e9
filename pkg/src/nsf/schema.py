"""Label schemas: the label set, lateral pairs, and WM/WMH identities.

A schema defines L, the number of segmentation channels, and is the single
source of truth for channel ordering.  Schemas are exchanged as JSON files
(see ``load_schema``/``save_schema``); ``schema_hash`` is the canonical
identifier used by the predictor exchange protocol.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class LabelSchema:
    """Ordered label set; the order defines the channel layout."""

    labels: tuple  # ((id, name), ...)
    lateral_pairs: tuple  # ((left_id, right_id), ...)
    wm_ids: tuple
    wmh_id: int
    background_id: int

    def __post_init__(self):
        ids = [int(i) for i, _ in self.labels]
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError("duplicate label ids in schema")
        id_set = set(ids)
        paired = set()
        for left, right in self.lateral_pairs:
            if left == right:
                raise InvalidArgumentError(f"degenerate lateral pair ({left},{right})")
            if left in paired or right in paired:
                raise InvalidArgumentError("label appears in more than one lateral pair")
            if left not in id_set or right not in id_set:
                raise InvalidArgumentError("lateral pair references unknown label id")
            paired.update((left, right))
        if self.wmh_id in paired:
            raise InvalidArgumentError("wmh_id must not be a lateral label")
        for i in (*self.wm_ids, self.wmh_id, self.background_id):
            if i not in id_set:
                raise InvalidArgumentError(f"schema id {i} not in label list")

    @property
    def num_labels(self):
        """L: the channel count of the segmentation softmax."""
        return len(self.labels)

    @property
    def ids(self):
        return tuple(int(i) for i, _ in self.labels)

    @property
    def names(self):
        return {int(i): n for i, n in self.labels}

    def index_of(self, label_id):
        try:
            return self.ids.index(label_id)
        except ValueError:
            raise InvalidArgumentError(f"label id {label_id} not in schema") from None

    def id_to_index_lut(self):
        """Dense lookup: label id -> channel index (-1 for ids not in schema)."""
        lut = np.full(max(self.ids) + 1, -1, dtype=np.int32)
        for idx, lab in enumerate(self.ids):
            lut[lab] = idx
        return lut

    def lateral_swap_lut(self):
        """Dense lookup: label id -> id of the contralateral label (identity for midline)."""
        lut = np.arange(max(self.ids) + 1, dtype=np.int32)
        for left, right in self.lateral_pairs:
            lut[left] = right
            lut[right] = left
        return lut

    def channel_swap_permutation(self):
        """Channel permutation that exchanges lateral pairs in a posterior stack."""
        perm = np.arange(self.num_labels, dtype=np.int64)
        for left, right in self.lateral_pairs:
            li, ri = self.index_of(left), self.index_of(right)
            perm[li], perm[ri] = ri, li
        return perm

    def to_payload(self):
        return {
            "labels": [[int(i), str(n)] for i, n in self.labels],
            "lateral_pairs": [[int(a), int(b)] for a, b in self.lateral_pairs],
            "wm_ids": [int(i) for i in self.wm_ids],
            "wmh_id": int(self.wmh_id),
            "background_id": int(self.background_id),
        }


def schema_hash(schema):
    """sha256 over the canonical JSON serialization (sorted keys, no spaces)."""
    blob = json.dumps(schema.to_payload(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def schema_from_payload(payload):
    try:
        return LabelSchema(
            labels=tuple((int(i), str(n)) for i, n in payload["labels"]),
            lateral_pairs=tuple((int(a), int(b)) for a, b in payload["lateral_pairs"]),
            wm_ids=tuple(int(i) for i in payload["wm_ids"]),
            wmh_id=int(payload["wmh_id"]),
            background_id=int(payload["background_id"]),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidArgumentError(f"malformed schema payload: {exc}") from exc


def load_schema(path):
    with open(path, "r", encoding="utf-8") as fh:
        return schema_from_payload(json.load(fh))


def save_schema(schema, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_payload(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Built-in schemas
# ---------------------------------------------------------------------------

# FreeSurfer-flavored ids: 36 brain structures (16 lateral pairs + 4 midline)
# plus the WMH class and background.
_LATERAL = [
    (2, 41, "cerebral-white-matter"),
    (3, 42, "cerebral-cortex"),
    (4, 43, "lateral-ventricle"),
    (5, 44, "inferior-lateral-ventricle"),
    (7, 46, "cerebellum-white-matter"),
    (8, 47, "cerebellum-cortex"),
    (10, 49, "thalamus"),
    (11, 50, "caudate"),
    (12, 51, "putamen"),
    (13, 52, "pallidum"),
    (17, 53, "hippocampus"),
    (18, 54, "amygdala"),
    (26, 58, "accumbens-area"),
    (28, 60, "ventral-dc"),
    (30, 62, "vessel"),
    (31, 63, "choroid-plexus"),
]
_MIDLINE = [
    (14, "third-ventricle"),
    (15, "fourth-ventricle"),
    (16, "brain-stem"),
    (24, "csf"),
]
WMH_ID = 77


def default_schema():
    """36 anatomical ROIs + WMH + background, FreeSurfer-style ids."""
    labels = [(0, "background")]
    for left, right, name in _LATERAL:
        labels.append((left, f"left-{name}"))
        labels.append((right, f"right-{name}"))
    labels.extend(_MIDLINE)
    labels.append((WMH_ID, "wmh"))
    labels.sort(key=lambda entry: entry[0])
    return LabelSchema(
        labels=tuple(labels),
        lateral_pairs=tuple((left, right) for left, right, _ in _LATERAL),
        wm_ids=(2, 41),
        wmh_id=WMH_ID,
        background_id=0,
    )


# Evaluation default: brainstem + 11 left/right structure pairs (23 ROIs).
DEFAULT_EVAL_ROI_IDS = (
    16,  # brain-stem
    2, 41,  # cerebral white matter
    3, 42,  # cerebral cortex
    7, 46,  # cerebellum white matter
    8, 47,  # cerebellum cortex
    10, 49,  # thalamus
    11, 50,  # caudate
    12, 51,  # putamen
    13, 52,  # pallidum
    17, 53,  # hippocampus
    18, 54,  # amygdala
    26, 58,  # accumbens
)


def toy_schema():
    """Small 4-ROI + WMH schema for desk-scale experiments and tests."""
    return LabelSchema(
        labels=(
            (0, "background"),
            (1, "white-matter"),
            (2, "gray-matter"),
            (3, "left-hippocampus"),
            (4, "right-hippocampus"),
            (5, "wmh"),
        ),
        lateral_pairs=((3, 4),),
        wm_ids=(1,),
        wmh_id=5,
        background_id=0,
    )
