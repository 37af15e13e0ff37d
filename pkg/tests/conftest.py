"""Shared fixtures: a small synthetic dataset plus a quickly trained model.

Session-scoped so the expensive parts (dataset render, short training)
run once. Tests that mutate dataset state (annotation writes) get their
own copies via tmp_path.
"""

import numpy as np
import pytest
import torch

from dynaclr.model import Checkpoint, ModelConfig, TrainConfig, embed_dataset, train_model
from dynaclr.patches import PatchPipeline, PatchSpec
from dynaclr.sampling import SamplerConfig
from dynaclr.store import open_dataset
from dynaclr.synth import SynthConfig, generate_dataset

torch.set_num_threads(1)

SMALL_CONFIG = SynthConfig(
    n_fovs=2,
    cells_per_fov=12,
    n_timepoints=8,
    seed=11,
)


@pytest.fixture(scope="session")
def small_ds(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "small_ds"
    generate_dataset(SMALL_CONFIG, out)
    return out


@pytest.fixture(scope="session")
def small_handle(small_ds):
    return open_dataset(small_ds)


@pytest.fixture(scope="session")
def small_table(small_handle):
    return small_handle.load_tracks()


@pytest.fixture(scope="session")
def desk_spec():
    return PatchSpec.for_final((5, 32, 32), ("phase", "rfp"))


@pytest.fixture(scope="session")
def plain_pipeline(small_handle, desk_spec):
    return PatchPipeline(small_handle, desk_spec, aug=None)


@pytest.fixture(scope="session")
def tiny_checkpoint(small_handle, small_table):
    """Two-epoch desk model on the small dataset; enough for plumbing tests."""
    sampler_cfg = SamplerConfig(strategy="cell_time_aware", tau_frames=1,
                                batch_size=16, seed=5)
    model_cfg = ModelConfig.for_scale("desk")
    train_cfg = TrainConfig(batch_size=16, learning_rate=1e-3, epochs=2, seed=5)
    return train_model(small_handle, small_table, sampler_cfg, model_cfg, train_cfg)


@pytest.fixture(scope="session")
def tiny_embeddings(tiny_checkpoint, small_handle, small_table):
    return embed_dataset(tiny_checkpoint, small_handle, small_table)


@pytest.fixture(scope="session")
def division_ds(tmp_path_factory):
    """Dataset with a boosted division rate so lineage paths are exercised."""
    cfg = SynthConfig(n_fovs=2, cells_per_fov=15, n_timepoints=10,
                      division_rate=0.04, seed=29)
    out = tmp_path_factory.mktemp("data") / "division_ds"
    generate_dataset(cfg, out)
    return out


def rng(seed=0):
    return np.random.default_rng(seed)
