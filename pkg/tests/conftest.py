"""
Shared fixtures: seeded generators, 64-bit precision, tiny model and
dataset configurations small enough for unit tests.
"""

import numpy as np
import pytest

from swinfi.model import ModelConfig
from swinfi.runconfig import DataConfig, IoConfig, RunConfig, TrainConfig
from swinfi.syndata import PhaseErrorSpec, SynthSpec, generate_dataset
from swinfi.tensor import precision


@pytest.fixture
def rng():
    """Seeded generator for reproducible inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test in float64 precision mode."""
    with precision("float64"):
        yield


@pytest.fixture
def tiny_cfg():
    """Two stages on a 16x8 frame: grid 4x8 then 2x4, window 1x4, two heads."""
    return ModelConfig(p_S=4, p_T=1, M_S=1, M_T=4, C=8, depths=(2, 2), head_dim=4,
                       mlp_ratio=2, n_classes=3, D=2, S=16, T=8)


@pytest.fixture
def tiny_spec():
    return SynthSpec(seed=3, n_classes=3, packets_per_class=96, n_antennas=2, n_subcarriers=16,
                     snr_db=30.0, phase_error=PhaseErrorSpec(noise_std=0.0))


@pytest.fixture
def tiny_batches(tiny_spec):
    """Standardized amplitude splits of the tiny synthetic dataset (12 frames per class)."""
    dataset = generate_dataset(tiny_spec, T=8, split_seed=0)
    return dataset.batches("amplitude")


@pytest.fixture
def tiny_run(tiny_cfg, tiny_spec, tmp_path):
    """RunConfig tying the tiny model to the tiny dataset, artifacts under tmp_path."""
    return RunConfig(
        model=tiny_cfg,
        data=DataConfig(source="synth", mode="amplitude", frame_length=8, stride=8, synth=tiny_spec),
        train=TrainConfig(seed=0, lr=3e-3, batch_size=4, max_steps=20, eval_every=10,
                          classifier_steps=30, classifier_lr=5e-2, precision="float64"),
        io=IoConfig(output_dir=tmp_path / "run"),
        log_dir=tmp_path / "logs",
        logging_enabled=False,
    )
