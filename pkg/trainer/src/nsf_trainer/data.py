"""Streaming of generator output (NIfTI quadruples) into training batches.

Samples are the files written by the generator CLI: per index, four volumes
``sample_NNNN_{synth,labels,image,bias}.nii.gz`` on a shared 1mm grid.  The
network input is the synthetic volume normalized with the same robust min-max
window the predictor declares; targets are channel indices, the WM-median
normalized real image, and the log bias field.
"""

import os
import queue
import re
import threading
from dataclasses import dataclass

import numpy as np

from . import niftio

_SYNTH_RE = re.compile(r"^(sample_\d+)_synth\.nii(\.gz)?$")


@dataclass(frozen=True)
class SamplePaths:
    synth: str
    labels: str
    image: str
    bias: str


def scan_sample_dir(sample_dir):
    out = []
    for name in sorted(os.listdir(sample_dir)):
        m = _SYNTH_RE.match(name)
        if not m:
            continue
        stem, gz = m.group(1), m.group(2) or ""
        paths = SamplePaths(
            synth=os.path.join(sample_dir, name),
            labels=os.path.join(sample_dir, f"{stem}_labels.nii{gz}"),
            image=os.path.join(sample_dir, f"{stem}_image.nii{gz}"),
            bias=os.path.join(sample_dir, f"{stem}_bias.nii{gz}"),
        )
        if all(os.path.exists(p) for p in (paths.labels, paths.image, paths.bias)):
            out.append(paths)
    return out


def robust_minmax01(arr, lo_pct=1.0, hi_pct=99.0):
    """The exchange protocol's input normalization: [p1, p99] -> [0, 1], clipped."""
    lo, hi = np.percentile(arr, (lo_pct, hi_pct))
    if hi - lo < 1e-12:
        return np.zeros_like(arr)
    return np.clip((arr - lo) / (hi - lo), 0.0, 1.0)


def load_sample(paths, id_to_channel):
    synth, _ = niftio.read(paths.synth)
    labels, _ = niftio.read(paths.labels)
    image, _ = niftio.read(paths.image)
    bias, _ = niftio.read(paths.bias)
    labels = labels.astype(np.int64)
    if labels.max() >= id_to_channel.shape[0] or (id_to_channel[labels] < 0).any():
        raise ValueError(f"{paths.labels}: label ids outside the schema")
    return {
        "input": robust_minmax01(synth).astype(np.float32),
        "target_idx": id_to_channel[labels],
        "target_image": image.astype(np.float32),
        "target_logbias": np.log(bias).astype(np.float32),
    }


def load_all(sample_dir, schema):
    paths = scan_sample_dir(sample_dir)
    if not paths:
        raise FileNotFoundError(f"no sample quadruples under {sample_dir}")
    lut = schema.id_to_channel()
    return [load_sample(p, lut) for p in paths]


def crop(sample, corner, patch):
    sl = tuple(slice(c, c + patch) for c in corner)
    return {k: v[sl] for k, v in sample.items()}


def center_crop(sample, patch):
    dims = sample["input"].shape
    corner = [(d - patch) // 2 for d in dims]
    return crop(sample, corner, patch)


class PatchStream:
    """Background producer of random training patches (bounded prefetch queue).

    One producer thread with its own rng keeps the draw order, and therefore
    the whole run, deterministic for a fixed seed.
    """

    def __init__(self, samples, patch, seed, prefetch=4):
        for s in samples:
            if min(s["input"].shape) < patch:
                raise ValueError(f"sample dims {s['input'].shape} smaller than patch {patch}")
        self.samples = samples
        self.patch = patch
        self.rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
        self.queue = queue.Queue(maxsize=prefetch)
        self.stop = threading.Event()
        self.thread = threading.Thread(target=self._produce, daemon=True)
        self.thread.start()

    def _produce(self):
        while not self.stop.is_set():
            idx = int(self.rng.integers(len(self.samples)))
            sample = self.samples[idx]
            dims = sample["input"].shape
            corner = [int(self.rng.integers(0, d - self.patch + 1)) for d in dims]
            item = crop(sample, corner, self.patch)
            while not self.stop.is_set():
                try:
                    self.queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def next(self):
        return self.queue.get()

    def close(self):
        self.stop.set()
        try:
            while True:
                self.queue.get_nowait()
        except queue.Empty:
            pass
        self.thread.join(timeout=2.0)
