"""Shared fixtures.

Trained models and datasets are cached on disk under tests/_artifacts so
repeated runs skip the expensive work; delete that directory for a cold run.
"""

import warnings
from pathlib import Path

import pytest
import torch

from featre.attacks import TriggerSpec, poison_dataset
from featre.datakit import build_reference_set, ensure_dataset
from featre.modelkit import TrainConfig, load_checkpoint, save_checkpoint, train

torch.set_num_threads(1)

ARTIFACTS = Path(__file__).parent / "_artifacts"


@pytest.fixture(scope="session")
def mnist_data():
    return ensure_dataset(ARTIFACTS / "data", "mnist")


def _cached_model(path: Path, build):
    if path.exists():
        model, _ = load_checkpoint(path)
        return model
    model, dataset, seed, attack = build()
    save_checkpoint(path, model, dataset, seed, attack)
    return model


@pytest.fixture(scope="session")
def benign_model(mnist_data):
    train_ds, _, stats = mnist_data

    def build():
        cfg = TrainConfig(epochs=6, learning_rate=0.05, seed=21)
        model, _ = train(train_ds, "small_cnn_4c2f", cfg, stats)
        return model, "mnist", cfg.seed, None

    return _cached_model(ARTIFACTS / "models" / "benign.pt", build)


PATCH_SPEC = TriggerSpec("patch", target=3, poison_rate=0.05, seed=101)


@pytest.fixture(scope="session")
def trojan_model(mnist_data):
    train_ds, _, stats = mnist_data

    def build():
        cfg = TrainConfig(epochs=6, learning_rate=0.05, seed=11)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            poisoned = poison_dataset(train_ds, PATCH_SPEC)
            model, _ = train(poisoned, "small_cnn_4c2f", cfg, stats)
        return model, "mnist", cfg.seed, PATCH_SPEC

    return _cached_model(ARTIFACTS / "models" / "trojan_patch.pt", build)


@pytest.fixture(scope="session")
def reference_images(mnist_data):
    _, test_ds, _ = mnist_data
    refset = build_reference_set(test_ds, 10, seed=0)
    return {c: test_ds.images[idx] for c, idx in refset.per_class.items()}
