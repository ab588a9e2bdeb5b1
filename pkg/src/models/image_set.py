"""
Image Set Models for AMOC Lab
Handles labeled image collections and augmentation pipeline settings
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from src.errors import ArgumentError


class PipelineMode(Enum):
    """Which augmentation recipe a pipeline implements"""
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


@dataclass
class LabeledImageSet:
    """Images (N x H x W x C, pixels in [0,1]) with integer labels"""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ArgumentError(f"images must be N x H x W x C, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ArgumentError(
                f"image count {len(self.images)} does not match label count {len(self.labels)}"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ArgumentError("pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ArgumentError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def side(self):
        return self.images.shape[1]

    @property
    def channels(self):
        return self.images.shape[3]

    def tensors(self, device=None):
        """Images as an N x C x H x W float tensor plus a label tensor"""
        x = torch.from_numpy(self.images).permute(0, 3, 1, 2).contiguous()
        y = torch.from_numpy(self.labels)
        if device is not None:
            x, y = x.to(device), y.to(device)
        return x, y

    def subset(self, indices):
        """New set holding only the given rows, in the given order"""
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(self.images[indices], self.labels[indices], self.num_classes)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def to_dict(self):
        """Summary used in logs and reports"""
        return {
            'count': len(self),
            'shape': list(self.images.shape[1:]),
            'num_classes': self.num_classes,
            'class_counts': self.class_counts().tolist(),
        }


PRETRAIN_TRANSFORMS = ('resized_crop', 'hflip', 'color_jitter', 'grayscale')
FINETUNE_TRANSFORMS = ('pad_crop', 'hflip')


@dataclass
class AugmentationPipeline:
    """Ordered stochastic transforms and their strengths"""

    mode: PipelineMode = PipelineMode.PRETRAIN
    crop_scale: tuple = (0.2, 1.0)
    crop_ratio: tuple = (3.0 / 4.0, 4.0 / 3.0)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2
    pad: int = 4
    transforms: tuple = PRETRAIN_TRANSFORMS

    def __post_init__(self):
        self.mode = self.mode if isinstance(self.mode, PipelineMode) else PipelineMode(self.mode)
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ArgumentError(f"crop scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        for name in ('flip_p', 'jitter_p', 'grayscale_p'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ArgumentError(f"{name} must be a probability, got {value}")
        if not 0.0 <= self.hue <= 0.5:
            raise ArgumentError(f"hue strength must lie in [0, 0.5], got {self.hue}")
        if self.pad < 0:
            raise ArgumentError(f"pad must be non-negative, got {self.pad}")
        self.transforms = tuple(self.transforms)
        allowed = PRETRAIN_TRANSFORMS if self.mode == PipelineMode.PRETRAIN else FINETUNE_TRANSFORMS
        unknown = [name for name in self.transforms if name not in allowed]
        if unknown:
            raise ArgumentError(f"{self.mode.value} pipelines support {allowed}, got {unknown}")

    @classmethod
    def pretrain_default(cls):
        """Random resized crop, flip, color jitter and grayscale"""
        return cls(mode=PipelineMode.PRETRAIN)

    @classmethod
    def identity(cls):
        """Pipeline whose draws never change an image"""
        return cls(
            mode=PipelineMode.PRETRAIN,
            crop_scale=(1.0, 1.0),
            crop_ratio=(1.0, 1.0),
            flip_p=0.0,
            jitter_p=0.0,
            grayscale_p=0.0,
        )

    @classmethod
    def finetune_default(cls):
        """Reflection pad, random crop and horizontal flip"""
        return cls(mode=PipelineMode.FINETUNE, transforms=FINETUNE_TRANSFORMS)

    def to_dict(self):
        return {
            'mode': self.mode.value,
            'crop_scale': list(self.crop_scale),
            'crop_ratio': list(self.crop_ratio),
            'flip_p': self.flip_p,
            'jitter_p': self.jitter_p,
            'brightness': self.brightness,
            'contrast': self.contrast,
            'saturation': self.saturation,
            'hue': self.hue,
            'grayscale_p': self.grayscale_p,
            'pad': self.pad,
            'transforms': list(self.transforms),
        }
