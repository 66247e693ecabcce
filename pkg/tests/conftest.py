import numpy as np
import pytest

from autodiff import Node, get_precision, ops, set_precision
from xct.config import ClassifierConfig, ModelConfig, TrainConfig
from xct.phantom import StyleShiftParams, sample_paired_dataset, sample_unpaired_set

MIX = (0.4, 0.3, 0.3)
SHIFT = StyleShiftParams(gamma=1.4, contrast=1.1, noise_sigma=0.02)


@pytest.fixture(autouse=True)
def _restore_precision():
    previous = get_precision()
    yield
    set_precision(previous)


@pytest.fixture
def float64():
    set_precision("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(
        volume_side=16,
        batch_size=2,
        pretrain_epochs=2,
        finetune_epochs=1,
        baseline_epochs=1,
        model=ModelConfig(encoder_channels=(4, 8, 8), discriminator_channels=(2, 4)),
        classifier=ClassifierConfig(channels=(2, 2, 4, 4), hidden=8, epochs=2, batch_size=4, min_per_class=1),
    )


@pytest.fixture(scope="session")
def paired_small():
    return sample_paired_dataset(6, 16, MIX, master_seed=1)


@pytest.fixture
def unpaired_small():
    return sample_unpaired_set(4, 16, MIX, SHIFT, master_seed=2)


def _scalarize(node: Node) -> Node:
    weights = np.random.default_rng(7).normal(size=node.shape)
    return ops.sum_all(ops.mul(node, ops.constant(weights)))


@pytest.fixture
def scalarize():
    """Weighted sum with fixed weights, so every output element reaches the gradient."""
    return _scalarize
