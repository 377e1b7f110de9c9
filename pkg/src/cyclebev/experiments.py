"""Desk-scale experiment configuration shared by the acceptance suite and the
pilot scripts.

Images are rendered at 56x112 (quarter of the default pixel count) so that
the paired-seed VT comparison fits a single-CPU budget; the BEV grid keeps
its default 100x100 cells over 50 m.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import replace  # noqa: F401  (re-exported for scripts)
from pathlib import Path

import numpy as np

from . import dataset_io, training
from .eval_report import compute_iou
from .geometry import GridSpec, default_rig
from .scene_synth import SceneParams, generate_dataset

IMAGE_SIZE = (56, 112)
GRID = GridSpec()
N_TRAIN = 200
N_VAL = 50
IVT_EPOCHS = 30
VT_EPOCHS = 20
# the library default (2e-4) leaves the desk-scale VT far from converged in 30 epochs
VT_LR = 1e-3
# scaled so the cycle gradient is about a quarter of the BCE gradient
# (pilot/records/grad_scale.json); 0.4 makes it about four times larger
VT_LAMBDA3 = 0.025
AE_EPOCHS = 10
SEEDS = (0, 1, 2)
DATA_SEED = 7
PILOT_DATA_SEED = 1000
PILOT_SEED = 100


def vt_config(mode: str, seed: int, epochs: int = VT_EPOCHS, lambda3: float = VT_LAMBDA3):
    """Training config of one VT run in the paired comparison."""
    return training.TrainConfig(mode=mode, epochs=epochs, seed=seed, learning_rate=VT_LR,
                                weights=training.LossWeights(lambda3=lambda3))


def rig():
    return default_rig(*IMAGE_SIZE)


def cache_dir() -> Path | None:
    env = os.environ.get("CYCLEBEV_CACHE")
    return Path(env) if env else None


def bundles(data_seed: int, n: int, params: SceneParams = SceneParams()):
    """Scenes ``0..n-1`` of dataset ``data_seed``; cached under ``$CYCLEBEV_CACHE`` if set."""
    key = hashlib.sha256(json.dumps(
        {"seed": data_seed, "n": n, "size": IMAGE_SIZE, "grid": GRID.to_dict(),
         "params": params.to_dict()}, sort_keys=True).encode()).hexdigest()[:12]
    root = cache_dir()
    if root is not None and (root / key / "manifest.json").exists():
        out, _, _ = dataset_io.read_dataset(root / key)
        return out
    out = generate_dataset(n, data_seed, rig(), GRID, params)
    if root is not None:
        dataset_io.write_dataset(root / key, out, rig(), GRID)
    return out


def datasets(data_seed: int = DATA_SEED, n_train: int = N_TRAIN, n_val: int = N_VAL):
    """Train/val split of one generated dataset as ``TensorData``."""
    scenes = bundles(data_seed, n_train + n_val)
    r = rig()
    return (training.TensorData.from_bundles(scenes[:n_train], r, GRID),
            training.TensorData.from_bundles(scenes[n_train:], r, GRID))


def net_config(data: training.TensorData, **overrides):
    return training.default_net_config(data, **overrides)


def background_pv_miou(val: training.TensorData) -> float:
    """mIoU of predicting no class anywhere in the PV maps."""
    zeros = np.zeros(tuple(val.pv.shape), dtype=np.float32)
    return compute_iou(zeros, val.pv.numpy()).average
