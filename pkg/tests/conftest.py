import numpy as np
import pytest

from koopmanflow import BackboneConfig, KoopmanFlowModel
from koopmanflow.synthbench import GenSpec, generate_dataset, to_arrays


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY_CFG = dict(T=8, D=2, hidden=16, blocks=2, heads=2, fourier_dim=8,
                dyn_dim=8, context_dim=4, seed=3)


@pytest.fixture
def tiny_model():
    return KoopmanFlowModel(BackboneConfig(**TINY_CFG))


@pytest.fixture
def tiny_data():
    spec = GenSpec(T=8, D=2, n_slow_modes=1, slow_freqs=(1.0,), n_mid_modes=0,
                   mid_freqs=(), jitter_min_bin=3, seed=11)
    return to_arrays(generate_dataset(spec, 24))


@pytest.fixture
def desk_model():
    return KoopmanFlowModel(BackboneConfig(context_dim=8, seed=0))


@pytest.fixture
def desk_data():
    return to_arrays(generate_dataset(GenSpec(seed=7), 48))
