"""Label schema files and their canonical hash.

The hash identifies the schema across the exchange protocol: sha256 over the
canonical JSON form (sorted keys, compact separators) of the payload with
keys labels / lateral_pairs / wm_ids / wmh_id / background_id.
"""

import hashlib
import json
from dataclasses import dataclass


@dataclass(frozen=True)
class Schema:
    labels: tuple  # ((id, name), ...), order defines the channel layout
    lateral_pairs: tuple
    wm_ids: tuple
    wmh_id: int
    background_id: int

    @property
    def num_labels(self):
        return len(self.labels)

    @property
    def ids(self):
        return tuple(int(i) for i, _ in self.labels)

    def id_to_channel(self):
        import numpy as np

        lut = np.full(max(self.ids) + 1, -1, dtype=np.int64)
        for idx, (lab, _) in enumerate(self.labels):
            lut[lab] = idx
        return lut

    def payload(self):
        return {
            "labels": [[int(i), str(n)] for i, n in self.labels],
            "lateral_pairs": [[int(a), int(b)] for a, b in self.lateral_pairs],
            "wm_ids": [int(i) for i in self.wm_ids],
            "wmh_id": int(self.wmh_id),
            "background_id": int(self.background_id),
        }


def schema_hash(schema):
    blob = json.dumps(schema.payload(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def load_schema(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return schema_from_payload(payload)


def schema_from_payload(payload):
    return Schema(
        labels=tuple((int(i), str(n)) for i, n in payload["labels"]),
        lateral_pairs=tuple((int(a), int(b)) for a, b in payload["lateral_pairs"]),
        wm_ids=tuple(int(i) for i in payload["wm_ids"]),
        wmh_id=int(payload["wmh_id"]),
        background_id=int(payload["background_id"]),
    )
