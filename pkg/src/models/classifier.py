"""
Classifier Model for AMOC Lab
Handles the linear head attached to encoder backbone features
"""

import torch
import torch.nn as nn

from src.models.encoder import BNMode


class RobustClassifier(nn.Module):
    """Encoder backbone (chosen BN branch) followed by a linear head"""

    def __init__(self, encoder, num_classes, freeze_encoder=False, bn_mode=BNMode.ADV):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.feature_dim, num_classes)
        self.bn_mode = bn_mode
        self.frozen = freeze_encoder
        if freeze_encoder:
            self.encoder.requires_grad_(False)
            self.encoder.eval()

    def init_head(self, seed):
        """Re-draw the head weights from a seed"""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.head.reset_parameters()
        return self

    def train(self, mode=True):
        super().train(mode)
        if self.frozen:
            # frozen encoders keep their running statistics
            self.encoder.eval()
        return self

    def features(self, x):
        return self.encoder.features(x, self.bn_mode)

    def forward(self, x):
        return self.head(self.features(x))
