import pytest
import torch
import torch.nn as nn

from src.models.config import ArchConfig, ExperimentConfig
from src.models.encoder import init_encoder_pair
from src.models.memory_bank import BankPair
from src.services.dataio_service import synth_toy_dataset


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run desk-scale training trend checks')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


class AffineClassifier(nn.Module):
    """logits = W x + b on flattened inputs"""

    def __init__(self, weight, bias):
        super().__init__()
        self.weight = nn.Parameter(weight.clone())
        self.bias = nn.Parameter(bias.clone())

    def forward(self, x):
        return x.flatten(1) @ self.weight.t() + self.bias


class ConstantClassifier(nn.Module):
    """Always predicts class 0; still differentiable in x"""

    def __init__(self, num_classes=2):
        super().__init__()
        logits = torch.zeros(num_classes)
        logits[0] = 1.0
        self.register_buffer('logits', logits)

    def forward(self, x):
        return 0.0 * x.flatten(1).sum(dim=1, keepdim=True) + self.logits


@pytest.fixture
def tiny_arch():
    return ArchConfig(name='tiny', width=4, embed_dim=8)


@pytest.fixture
def toy_data():
    return synth_toy_dataset(seed=3, n=40, classes=2, side=12)


@pytest.fixture
def toy_test():
    return synth_toy_dataset(seed=4, n=24, classes=2, side=12)


@pytest.fixture
def encoder_pair(tiny_arch):
    return init_encoder_pair(tiny_arch, seed=0, momentum=0.9)


@pytest.fixture
def banks():
    return BankPair(32, 8, seed=0)


@pytest.fixture
def affine_classifier():
    gen = torch.Generator().manual_seed(7)
    weight = torch.randn(2, 16, generator=gen)
    bias = torch.zeros(2)
    return AffineClassifier(weight, bias)


@pytest.fixture
def constant_classifier():
    return ConstantClassifier()


@pytest.fixture
def tiny_config():
    """Experiment config small enough for unit tests"""
    config = ExperimentConfig()
    config.data.n = 40
    config.data.test_n = 24
    config.data.side = 12
    config.model.name = 'tiny'
    config.model.width = 4
    config.model.embed_dim = 8
    config.train.batch_size = 8
    config.train.epochs = 2
    config.train.warmup_epochs = 0
    config.train.bank_K = 32
    config.finetune.batch_size = 8
    config.finetune.epochs = 1
    config.eval.head_epochs = 2
    config.eval.batch_size = 16
    return config.validate()
