"""Shared fixtures: the full-scale dataset and trained model are built once
and cached on disk so repeated test runs skip training."""

import os
from pathlib import Path

import numpy as np
import pytest

from noiseopt import diffusion as df
from noiseopt import motiondata as md
from noiseopt.denoiser import load_params, save_params

CACHE_VERSION = "v1"
DATASET_SEED = 202
DATASET_COUNT = 2048
TRAIN_EPOCHS = 120
TRAIN_SEED = 11


def cache_dir() -> Path:
    root = os.environ.get("NOISEOPT_TEST_CACHE",
                          str(Path(__file__).parent / "_cache"))
    path = Path(root) / CACHE_VERSION
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_or_build_dataset() -> list[md.Motion]:
    path = cache_dir() / "dataset.mbin"
    if path.exists():
        motions, _ = md.load_mbin(path)
        return motions
    motions = md.make_dataset(DATASET_COUNT, seed=DATASET_SEED)
    md.save_mbin(path, motions, metadata={"seed": DATASET_SEED})
    return motions


def load_or_train_model():
    path = cache_dir() / "model.dnow"
    if path.exists():
        return load_params(path)
    dataset = load_or_build_dataset()
    config = df.TrainConfig(epochs=TRAIN_EPOCHS, seed=TRAIN_SEED)
    result = df.train(dataset, config)
    save_params(path, result.params)
    curve = cache_dir() / "train_curve.csv"
    lines = ["kind,index,loss"]
    lines += [f"step,{i},{v:.8g}" for i, v in enumerate(result.train_curve)]
    lines += [f"epoch,{i},{v:.8g}" for i, v in enumerate(result.val_curve)]
    curve.write_text("\n".join(lines) + "\n")
    return result.params


@pytest.fixture(scope="session")
def dataset():
    return load_or_build_dataset()


@pytest.fixture(scope="session")
def trained_model():
    return load_or_train_model()


@pytest.fixture(scope="session")
def held_out_walks():
    """Motions drawn from a seed stream disjoint from the training data."""
    return [md.generate_sequence(
        md.sample_gait_params(np.random.default_rng([7007, i]), False),
        seed=900_000 + i) for i in range(64)]


@pytest.fixture(scope="session")
def held_out_jumpy():
    return [md.generate_sequence(
        md.sample_gait_params(np.random.default_rng([8008, i]), True),
        seed=800_000 + i) for i in range(16)]
