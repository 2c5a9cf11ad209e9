"""Exchange-protocol predictor: NIfTI in, L+2-channel NIfTI + sidecar out.

Invocation (what export_predictor bakes into the descriptor)::

    nsf-unet-predict --checkpoint ckpt.pt [--expect-hash H] INPUT OUTPUT

The input must already be on a ~1mm grid and normalized per the declared
convention (the caller applies it).  Output channels: L softmax posteriors in
schema order, the predicted image, and the predicted bias field (exp of the
log-bias head, hence strictly positive).  Runs are deterministic: the same
input produces byte-identical output.
"""

import argparse
import json
import sys

import numpy as np
import torch
import torch.nn.functional as F

from . import niftio
from .unet import UNet3D

CHANNEL_ORDER = "labels,image,bias"


def load_model(checkpoint_path):
    checkpoint = torch.load(checkpoint_path, weights_only=True)
    model = UNet3D(
        checkpoint["channels"],
        levels=checkpoint["levels"],
        features=checkpoint["features"],
        gn_groups=checkpoint["gn_groups"],
    )
    model.load_state_dict(checkpoint["state_dict"])
    model.eval()
    return model, checkpoint


def predict_volume(model, data):
    """Forward pass with replicate padding up to the pooling stride."""
    stride = 2 ** (model.levels - 1)
    dims = data.shape
    padded = [(-d) % stride for d in dims]
    x = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))[None, None]
    if any(padded):
        x = F.pad(x, (0, padded[2], 0, padded[1], 0, padded[0]), mode="replicate")
    with torch.no_grad():
        out = model(x)
        logits, image, logbias = model.split_heads(out)
        probs = torch.softmax(logits, dim=1)
    probs = probs[0, :, : dims[0], : dims[1], : dims[2]].numpy()
    image = image[0, : dims[0], : dims[1], : dims[2]].numpy()
    bias = np.exp(logbias[0, : dims[0], : dims[1], : dims[2]].numpy())
    return probs, image, bias


def main(argv=None):
    parser = argparse.ArgumentParser(prog="nsf-unet-predict")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--expect-hash", default=None)
    parser.add_argument("input")
    parser.add_argument("output")
    args = parser.parse_args(argv)

    torch.manual_seed(0)
    torch.set_num_threads(max(1, torch.get_num_threads()))

    model, checkpoint = load_model(args.checkpoint)
    if args.expect_hash and args.expect_hash != checkpoint["schema_hash"]:
        print(
            f"schema hash mismatch: checkpoint {checkpoint['schema_hash']} "
            f"!= expected {args.expect_hash}",
            file=sys.stderr,
        )
        return 4

    data, affine = niftio.read(args.input)
    if data.ndim != 3:
        print(f"expected a 3D input volume, got shape {data.shape}", file=sys.stderr)
        return 3
    voxel = np.linalg.norm(affine[:3, :3], axis=0)
    if not np.allclose(voxel, 1.0, atol=1e-3):
        print(f"input grid is {voxel} mm, protocol requires 1mm isotropic", file=sys.stderr)
        return 3

    probs, image, bias = predict_volume(model, data)
    stack = np.concatenate([probs, image[None], bias[None]], axis=0)
    niftio.write(np.moveaxis(stack, 0, -1), affine, args.output, datatype=np.float32)
    with open(args.output + ".json", "w", encoding="utf-8") as fh:
        json.dump(
            {"schema_hash": checkpoint["schema_hash"], "channel_order": CHANNEL_ORDER},
            fh,
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
