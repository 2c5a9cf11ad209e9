"""Shared toy world: pairs -> generator CLI -> quadruples -> trained checkpoint.

The generator is the other component; we only touch it through its CLI and
the NIfTI files it writes.  The desk-scale training run is session-scoped
because it takes a few minutes; every test that needs a checkpoint reuses it.
"""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from nsf_trainer import niftio

TOY_SCHEMA = {
    "labels": [
        [0, "background"],
        [1, "white-matter"],
        [2, "gray-matter"],
        [3, "left-hippocampus"],
        [4, "right-hippocampus"],
        [5, "wmh"],
    ],
    "lateral_pairs": [[3, 4]],
    "wm_ids": [1],
    "wmh_id": 5,
    "background_id": 0,
}

# narrowed randomization: the desk-scale budget trains appearance fitting,
# not full contrast agnosticity (that needs the real corpus and ~1e5 iters)
EASY_GENERATOR_CFG = """\
std_range = 0.5, 3
bias_log_sigma = 0.1
regime_probs = 1, 0, 0, 0
rotation_deg = 8
scale_range = 0.95, 1.05
shear_max = 0.05
translation_mm = 3
nonlin_sigma_mm = 1.5
"""


def build_toy_pairs(pair_dir, n=32, cases=3, seed=0):
    os.makedirs(pair_dir, exist_ok=True)
    idx = np.indices((n, n, n)).astype(float)
    rng = np.random.default_rng(seed)
    for case in range(cases):
        center = (n - 1) / 2 + rng.uniform(-2, 2, 3)
        r = np.sqrt(((idx - center.reshape(3, 1, 1, 1)) ** 2).sum(0))
        radius = 8.0 + case
        lab = np.zeros((n, n, n), dtype=np.int32)
        lab[r < radius + 3] = 2
        lab[r < radius] = 1
        lab[(idx[0] < center[0] - radius / 2) & (r < radius)] = 3
        lab[(idx[0] > center[0] + radius / 2) & (r < radius)] = 4
        lab[(r > radius) & (r < radius + 1.2) & (idx[2] > center[2] + 2)] = 5
        img = (
            80.0 + 40.0 * (lab == 1) + 70.0 * (lab == 2) + 20.0 * (lab > 2)
            + rng.random((n, n, n))
        )
        niftio.write(lab, np.eye(4), os.path.join(pair_dir, f"c{case}_labels.nii.gz"), datatype=np.int32)
        niftio.write(img, np.eye(4), os.path.join(pair_dir, f"c{case}_image.nii.gz"), datatype=np.float32)


@pytest.fixture(scope="session")
def toy_world(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy-world")
    schema_path = str(root / "schema.json")
    with open(schema_path, "w", encoding="utf-8") as fh:
        json.dump(TOY_SCHEMA, fh)
    pair_dir = str(root / "pairs")
    build_toy_pairs(pair_dir)
    cfg_path = str(root / "generator.cfg")
    with open(cfg_path, "w", encoding="utf-8") as fh:
        fh.write(EASY_GENERATOR_CFG)

    sample_dir = str(root / "samples")
    proc = subprocess.run(
        [sys.executable, "-m", "nsf.cli", "--command", "generate",
         "--input", pair_dir, "--output", sample_dir, "--schema", schema_path,
         "--config", cfg_path, "--count", "12", "--seed", "31", "--workers", "2"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, f"generator CLI failed: {proc.stderr}"
    return {"root": str(root), "schema": schema_path, "samples": sample_dir}


@pytest.fixture(scope="session")
def trained_checkpoint(toy_world):
    """Desk-scale training run (a few minutes); shared across the session."""
    import time

    from nsf_trainer.train import TrainConfig, train

    config = TrainConfig(
        sample_dir=toy_world["samples"],
        schema_path=toy_world["schema"],
        checkpoint_path=os.path.join(toy_world["root"], "desk.pt"),
        patch_size=32,
        iterations=1200,
        val_every=50,
        val_count=2,
        learning_rate=1e-3,
        features=32,  # spec width is 64; narrowed to fit the CPU time budget
        seed=0,
    )
    start = time.perf_counter()
    path = train(config)
    elapsed = time.perf_counter() - start
    return {"path": path, "elapsed_s": elapsed, "config": config, **toy_world}
