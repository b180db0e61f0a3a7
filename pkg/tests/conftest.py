import numpy as np
import pytest

from scribsal.data import DatasetManifest, load_sample, preprocess, synth_dataset
from scribsal.trainer import TrainConfig, init_train_state


@pytest.fixture(scope="session")
def vdt_manifest(tmp_path_factory) -> DatasetManifest:
    root = tmp_path_factory.mktemp("vdt_data")
    return synth_dataset(root, n=4, side=64, modality_tags={"v", "d", "t"}, seed=7)


@pytest.fixture(scope="session")
def vdt_samples(vdt_manifest):
    return [
        preprocess(load_sample(vdt_manifest, sid), 64)
        for sid in vdt_manifest.sample_ids
    ]


def tiny_config(**overrides) -> TrainConfig:
    """Small-but-real model config keeping trainer tests fast."""
    base = dict(
        depth=2,
        embed_dim=32,
        heads=4,
        lora_rank=4,
        image_side=64,
        patch=16,
        epochs=1,
        lr=1e-3,
        seed=0,
        prompt_k=6,
        modality_tags=("v", "d"),
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture()
def tiny_state():
    return init_train_state(tiny_config())


def random_scribble(rng: np.random.Generator, side: int = 16) -> np.ndarray:
    """Tri-valued scribble with at least one fg and one bg pixel."""
    s = rng.choice([0, 0, 0, 1, 2], size=(side, side)).astype(np.uint8)
    s[0, 0] = 1
    s[-1, -1] = 2
    return s
