"""
Encoder Models for AMOC Lab
Handles the dual-BN encoder, its backbones and the momentum query/key pair
"""

import copy
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ArchitectureError, ArgumentError, ConfigError


class BNMode(Enum):
    """Which batch-norm statistic set a forward pass uses"""
    CLEAN = "clean"
    ADV = "adv"


class DualBatchNorm(nn.Module):
    """Two independent batch norms, one for clean and one for adversarial inputs"""

    def __init__(self, num_features, dims=2):
        super().__init__()
        norm = nn.BatchNorm2d if dims == 2 else nn.BatchNorm1d
        self.bn_clean = norm(num_features)
        self.bn_adv = norm(num_features)
        self.mode = BNMode.CLEAN

    def forward(self, x):
        if self.mode == BNMode.ADV:
            return self.bn_adv(x)
        return self.bn_clean(x)


def _conv_block(in_channels, out_channels, stride=1):
    return [
        nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False),
        DualBatchNorm(out_channels),
        nn.ReLU(inplace=True),
    ]


class ConvNet(nn.Module):
    """Plain stack of 3x3 conv blocks with global average pooling"""

    def __init__(self, widths, in_channels=3):
        super().__init__()
        layers = []
        channels = in_channels
        for i, width in enumerate(widths):
            layers += _conv_block(channels, width, stride=1 if i == 0 else 2)
            channels = width
        self.body = nn.Sequential(*layers)
        self.feature_dim = channels

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.body(x), 1).flatten(1)


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = DualBatchNorm(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = DualBatchNorm(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                DualBatchNorm(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """CIFAR-style ResNet-18 (3x3 stem, no max-pool) with dual BN"""

    def __init__(self, width=64, in_channels=3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, stride=1, padding=1, bias=False)
        self.bn1 = DualBatchNorm(width)
        layers = []
        in_planes = width
        for i, planes in enumerate((width, 2 * width, 4 * width, 8 * width)):
            stride = 1 if i == 0 else 2
            layers += [BasicBlock(in_planes, planes, stride), BasicBlock(planes, planes, 1)]
            in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.feature_dim = in_planes

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layers(out)
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


def build_backbone(arch, in_channels=3):
    """Backbone for an ArchConfig name"""
    if arch.name == 'convnet4':
        return ConvNet([arch.width, 2 * arch.width, 4 * arch.width, 4 * arch.width], in_channels)
    if arch.name == 'tiny':
        return ConvNet([arch.width, 2 * arch.width], in_channels)
    if arch.name == 'resnet18':
        return ResNet18(arch.width, in_channels)
    raise ConfigError(f"unsupported architecture: {arch.name!r}")


class DualBNEncoder(nn.Module):
    """Backbone plus 2-layer projection head; outputs unit-norm embeddings"""

    def __init__(self, arch, in_channels=3):
        super().__init__()
        self.arch = arch
        self.in_channels = in_channels
        self.backbone = build_backbone(arch, in_channels)
        self.feature_dim = self.backbone.feature_dim
        self.embed_dim = arch.embed_dim
        self.head = nn.Sequential(
            nn.Linear(self.feature_dim, self.feature_dim),
            DualBatchNorm(self.feature_dim, dims=1),
            nn.ReLU(inplace=True),
            nn.Linear(self.feature_dim, self.embed_dim),
        )

    def set_bn_mode(self, bn_mode):
        for module in self.modules():
            if isinstance(module, DualBatchNorm):
                module.mode = bn_mode

    def features(self, x, bn_mode):
        """Backbone features (the projection head is skipped)"""
        self.set_bn_mode(bn_mode)
        return self.backbone(x)

    def forward(self, x, bn_mode):
        self.set_bn_mode(bn_mode)
        return F.normalize(self.head(self.backbone(x)), dim=1)


class EncoderPair(nn.Module):
    """Query encoder, momentum-updated key encoder and the momentum m"""

    def __init__(self, query, momentum=0.999):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ArgumentError(f"momentum must lie in (0, 1), got {momentum}")
        self.query = query
        self.key = copy.deepcopy(query)
        self.key.requires_grad_(False)
        self.momentum = momentum

    @torch.no_grad()
    def momentum_update(self):
        """theta_k <- m * theta_k + (1 - m) * theta_q over learnable parameters only"""
        m = self.momentum
        query_params = list(self.query.named_parameters())
        key_params = list(self.key.named_parameters())
        if len(query_params) != len(key_params):
            raise ArchitectureError("query and key encoders hold different parameter counts")
        for (name_q, param_q), (name_k, param_k) in zip(query_params, key_params):
            if name_q != name_k or param_q.shape != param_k.shape:
                raise ArchitectureError(f"parameter mismatch: {name_q} {tuple(param_q.shape)} "
                                        f"vs {name_k} {tuple(param_k.shape)}")
            param_k.mul_(m).add_(param_q.detach(), alpha=1.0 - m)


def encoder_forward(enc, batch, bn_mode, train_mode):
    """Embed a batch with the chosen BN branch; restores the module's train flag"""
    if batch.dim() != 4 or batch.shape[1] != enc.in_channels:
        raise ArgumentError(
            f"expected N x {enc.in_channels} x H x W input, got {tuple(batch.shape)}"
        )
    was_training = enc.training
    enc.train(train_mode)
    try:
        return enc(batch, bn_mode)
    finally:
        enc.train(was_training)


def momentum_update(pair):
    pair.momentum_update()


def init_encoder_pair(arch, seed, momentum=0.999, in_channels=3):
    """Seeded query encoder and a key encoder that copies it exactly"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        query = DualBNEncoder(arch, in_channels)
    return EncoderPair(query, momentum)


def bn_buffers(module, branch):
    """Running statistics of one BN branch, keyed by module path"""
    attr = 'bn_adv' if branch == BNMode.ADV else 'bn_clean'
    stats = {}
    for name, sub in module.named_modules():
        if isinstance(sub, DualBatchNorm):
            bn = getattr(sub, attr)
            stats[f"{name}.running_mean"] = bn.running_mean.clone()
            stats[f"{name}.running_var"] = bn.running_var.clone()
    return stats
