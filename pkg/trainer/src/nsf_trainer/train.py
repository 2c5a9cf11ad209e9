"""Adam training of the U-Net on generator output, plus predictor export."""

import argparse
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import data as data_mod
from .losses import composite_loss
from .schemas import load_schema, schema_hash
from .unet import UNet3D

NORMALIZATION = "robust-minmax-01"
CHANNEL_ORDER = "labels,image,bias"


@dataclass
class TrainConfig:
    sample_dir: str
    schema_path: str
    checkpoint_path: str
    patch_size: int = 160  # desk-scale runs override to 32
    batch_size: int = 1
    learning_rate: float = 1e-4
    iterations: int = 100_000
    val_every: int = 50
    val_count: int = 2
    seed: int = 0
    levels: int = 5
    features: int = 64
    gn_groups: int = 8
    include_background: bool = True

    def __post_init__(self):
        stride = 2 ** (self.levels - 1)
        if self.patch_size % stride:
            raise ValueError(f"patch size {self.patch_size} not divisible by {stride}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")


def _batch_tensors(items):
    inputs = torch.stack([torch.from_numpy(i["input"])[None] for i in items])
    return {
        "input": inputs,
        "target_idx": [torch.from_numpy(i["target_idx"]) for i in items],
        "target_image": [torch.from_numpy(i["target_image"]) for i in items],
        "target_logbias": [torch.from_numpy(i["target_logbias"]) for i in items],
    }


def _batch_loss(model, batch, include_background):
    out = model(batch["input"])
    totals, terms_acc = [], {}
    for b in range(out.shape[0]):
        logits, image, logbias = model.split_heads(out[b : b + 1])
        probs = torch.softmax(logits[0], dim=0)
        total, terms = composite_loss(
            probs,
            batch["target_idx"][b],
            image[0],
            logbias[0],
            batch["target_image"][b],
            batch["target_logbias"][b],
            include_background,
        )
        totals.append(total)
        for k, v in terms.items():
            terms_acc.setdefault(k, []).append(float(v.detach()))
    mean_terms = {k: float(np.mean(v)) for k, v in terms_acc.items()}
    return torch.stack(totals).mean(), mean_terms


def _dump_bad_batch(batch, path):
    arrays = {"input": batch["input"].numpy()}
    for key in ("target_idx", "target_image", "target_logbias"):
        for b, t in enumerate(batch[key]):
            arrays[f"{key}_{b}"] = t.numpy()
    np.savez(path, **arrays)


def train(config):
    """Run the optimization; returns the checkpoint path.

    Aborts with a diagnostic dump of the offending batch if the loss goes
    non-finite.
    """
    torch.manual_seed(config.seed)
    schema = load_schema(config.schema_path)
    samples = data_mod.load_all(config.sample_dir, schema)
    if len(samples) <= config.val_count:
        raise ValueError(
            f"need more than val_count={config.val_count} samples, found {len(samples)}"
        )
    val_samples = samples[: config.val_count]
    train_samples = samples[config.val_count :]
    val_batch = _batch_tensors([data_mod.center_crop(s, config.patch_size) for s in val_samples])

    model = UNet3D(
        schema.num_labels + 2,
        levels=config.levels,
        features=config.features,
        gn_groups=config.gn_groups,
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    stream = data_mod.PatchStream(train_samples, config.patch_size, config.seed)

    train_curve, val_curve = [], []
    try:
        for iteration in range(config.iterations):
            model.train()
            items = [stream.next() for _ in range(config.batch_size)]
            batch = _batch_tensors(items)
            total, terms = _batch_loss(model, batch, config.include_background)
            loss_value = float(total.detach())
            if not math.isfinite(loss_value):
                dump = config.checkpoint_path + ".bad_batch.npz"
                _dump_bad_batch(batch, dump)
                raise RuntimeError(
                    f"non-finite loss {loss_value} at iteration {iteration}; batch dumped to {dump}"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            train_curve.append({"iteration": iteration, **terms})

            if iteration % config.val_every == 0 or iteration == config.iterations - 1:
                model.eval()
                with torch.no_grad():
                    _, val_terms = _batch_loss(model, val_batch, config.include_background)
                val_curve.append({"iteration": iteration, **val_terms})
    finally:
        stream.close()

    checkpoint = {
        "state_dict": model.state_dict(),
        "levels": config.levels,
        "features": config.features,
        "gn_groups": config.gn_groups,
        "channels": schema.num_labels + 2,
        "schema_payload": schema.payload(),
        "schema_hash": schema_hash(schema),
        "normalization": NORMALIZATION,
        "train_curve": train_curve,
        "val_curve": val_curve,
    }
    os.makedirs(os.path.dirname(os.path.abspath(config.checkpoint_path)), exist_ok=True)
    torch.save(checkpoint, config.checkpoint_path)
    return config.checkpoint_path


def export_predictor(checkpoint_path, descriptor_path):
    """Write the exchange-protocol descriptor pointing at this checkpoint."""
    checkpoint = torch.load(checkpoint_path, weights_only=True)
    descriptor = {
        "command": [
            "nsf-unet-predict",
            "--checkpoint",
            os.path.abspath(checkpoint_path),
            "--expect-hash",
            checkpoint["schema_hash"],
            "{input}",
            "{output}",
        ],
        "channels": checkpoint["channels"],
        "schema_hash": checkpoint["schema_hash"],
        "normalization": checkpoint["normalization"],
    }
    with open(descriptor_path, "w", encoding="utf-8") as fh:
        json.dump(descriptor, fh, indent=2)
        fh.write("\n")
    return descriptor_path


def main(argv=None):
    parser = argparse.ArgumentParser(prog="nsf-unet-train")
    parser.add_argument("--samples", required=True, help="generator output directory")
    parser.add_argument("--schema", required=True)
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--iterations", type=int, default=100_000)
    parser.add_argument("--patch-size", type=int, default=160)
    parser.add_argument("--features", type=int, default=64)
    parser.add_argument("--learning-rate", type=float, default=1e-4)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--export", default=None, help="also write a predictor descriptor here")
    args = parser.parse_args(argv)
    config = TrainConfig(
        sample_dir=args.samples,
        schema_path=args.schema,
        checkpoint_path=args.checkpoint,
        iterations=args.iterations,
        patch_size=args.patch_size,
        features=args.features,
        learning_rate=args.learning_rate,
        seed=args.seed,
    )
    path = train(config)
    if args.export:
        export_predictor(path, args.export)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
