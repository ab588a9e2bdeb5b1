"""
Dataset Service for AMOC Lab
Handles CIFAR binary records, the synthetic toy corpus and both augmentation recipes
"""

import math
import os

import numpy as np
import structlog
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from src.errors import ArgumentError, CorruptRecordError, FormatError
from src.models.image_set import AugmentationPipeline, LabeledImageSet, PipelineMode

log = structlog.get_logger()

CIFAR_SIDE = 32
CIFAR_CHANNELS = 3


def _read_records(paths, label_bytes, side, channels):
    """Read and concatenate raw uint8 records from one or more files"""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    record_len = label_bytes + side * side * channels
    chunks = []
    for path in paths:
        if not os.path.exists(path):
            raise ArgumentError(f"dataset file not found: {path}")
        with open(path, 'rb') as handle:
            raw = handle.read()
        if len(raw) % record_len != 0:
            raise FormatError(
                f"{path}: size {len(raw)} is not a multiple of the {record_len}-byte record"
            )
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, record_len))
    if not chunks:
        raise ArgumentError("no dataset files given")
    return np.concatenate(chunks, axis=0)


def _decode(records, label_bytes, label_index, num_classes, side, channels):
    labels = records[:, label_index].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        raise CorruptRecordError(
            f"record {int(bad[0])} has label {int(labels[bad[0]])} >= {num_classes}"
        )
    # channel-major bytes: all R, then all G, then all B
    pixels = records[:, label_bytes:].reshape(-1, channels, side, side).transpose(0, 2, 3, 1)
    images = pixels.astype(np.float32) / np.float32(255.0)
    return LabeledImageSet(images, labels, num_classes)


def load_cifar10_binary(path, side=CIFAR_SIDE, channels=CIFAR_CHANNELS, num_classes=10):
    """Load one or more CIFAR-10 batch files (1 label byte + pixel bytes per record)"""
    records = _read_records(path, 1, side, channels)
    data = _decode(records, 1, 0, num_classes, side, channels)
    log.info("dataset_loaded", format="cifar10", **data.to_dict())
    return data


def load_cifar100_binary(path, label_kind='fine', side=CIFAR_SIDE, channels=CIFAR_CHANNELS):
    """Load CIFAR-100 files (coarse label byte, fine label byte, pixel bytes)"""
    if label_kind not in ('fine', 'coarse'):
        raise ArgumentError(f"label_kind must be 'fine' or 'coarse', got {label_kind!r}")
    records = _read_records(path, 2, side, channels)
    label_index, num_classes = (1, 100) if label_kind == 'fine' else (0, 20)
    data = _decode(records, 2, label_index, num_classes, side, channels)
    log.info("dataset_loaded", format="cifar100", label_kind=label_kind, **data.to_dict())
    return data


def encode_cifar_records(data):
    """Serialize a set in the CIFAR-10 record layout"""
    if data.num_classes > 256:
        raise ArgumentError("record format stores labels in a single byte")
    pixels = np.rint(data.images.astype(np.float64) * 255.0).astype(np.uint8)
    pixels = pixels.transpose(0, 3, 1, 2).reshape(len(data), -1)
    records = np.concatenate([data.labels.astype(np.uint8)[:, None], pixels], axis=1)
    return records.tobytes()


def save_cifar_binary(data, path):
    """Write a set to disk in the CIFAR-10 record layout"""
    with open(path, 'wb') as handle:
        handle.write(encode_cifar_records(data))
    return path


def synth_toy_dataset(seed, n, classes, side, channels=CIFAR_CHANNELS, structure_seed=0,
                      latent_dim=8, separation=2.0, latent_noise=0.35, grain=0.03):
    """Gaussian class blobs rendered as textured patches.

    Class means and textures come from ``structure_seed`` so that splits drawn
    with different ``seed`` values share one underlying task.
    """
    if n < classes:
        raise ArgumentError(f"need at least one sample per class (n={n}, classes={classes})")
    if classes < 2:
        raise ArgumentError("need at least two classes")
    if side < 8:
        raise ArgumentError(f"side must be at least 8 pixels, got {side}")

    structure = np.random.default_rng(structure_seed)
    means = structure.normal(size=(classes, latent_dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)

    coords = np.arange(side, dtype=np.float64) / side
    yy, xx = np.meshgrid(coords, coords, indexing='ij')
    basis = np.empty((latent_dim, side, side, channels))
    for j in range(latent_dim):
        fx, fy = structure.integers(1, 4, size=2)
        phase = structure.uniform(0.0, 2.0 * math.pi)
        tint = structure.normal(size=channels)
        tint /= np.linalg.norm(tint)
        wave = np.sin(2.0 * math.pi * (fx * xx + fy * yy) + phase)
        basis[j] = wave[:, :, None] * tint[None, None, :]

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    latent = means[labels] + rng.normal(scale=latent_noise, size=(n, latent_dim))
    images = 0.5 + 0.12 * np.einsum('nl,lhwc->nhwc', latent, basis)
    images += rng.normal(scale=grain, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return LabeledImageSet(images, labels, classes)


def _uniform(rng, lo, hi):
    return lo + (hi - lo) * torch.rand((), generator=rng).item()


def _randint(rng, lo, hi):
    """Integer uniform on [lo, hi)"""
    return int(torch.randint(lo, hi, (1,), generator=rng).item())


def _resized_crop_params(height, width, scale, ratio, rng):
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * _uniform(rng, *scale)
        aspect = math.exp(_uniform(rng, *log_ratio))
        crop_w = int(round(math.sqrt(target_area * aspect)))
        crop_h = int(round(math.sqrt(target_area / aspect)))
        if 0 < crop_w <= width and 0 < crop_h <= height:
            top = _randint(rng, 0, height - crop_h + 1)
            left = _randint(rng, 0, width - crop_w + 1)
            return top, left, crop_h, crop_w
    return 0, 0, height, width


def _color_jitter(view, pipeline, rng):
    channels = view.shape[0]
    order = torch.randperm(4, generator=rng).tolist()
    for op in order:
        if op == 0 and pipeline.brightness > 0:
            factor = _uniform(rng, max(0.0, 1.0 - pipeline.brightness), 1.0 + pipeline.brightness)
            view = TF.adjust_brightness(view, factor)
        elif op == 1 and pipeline.contrast > 0:
            factor = _uniform(rng, max(0.0, 1.0 - pipeline.contrast), 1.0 + pipeline.contrast)
            view = TF.adjust_contrast(view, factor)
        elif op == 2 and pipeline.saturation > 0 and channels == 3:
            factor = _uniform(rng, max(0.0, 1.0 - pipeline.saturation), 1.0 + pipeline.saturation)
            view = TF.adjust_saturation(view, factor)
        elif op == 3 and pipeline.hue > 0 and channels == 3:
            view = TF.adjust_hue(view, _uniform(rng, -pipeline.hue, pipeline.hue))
    return view


def _resized_crop_stage(view, pipeline, rng):
    _, height, width = view.shape
    top, left, crop_h, crop_w = _resized_crop_params(
        height, width, pipeline.crop_scale, pipeline.crop_ratio, rng
    )
    if (crop_h, crop_w) == (height, width):
        return view[:, top:top + crop_h, left:left + crop_w]
    return TF.resized_crop(view, top, left, crop_h, crop_w, [height, width], antialias=True)


def _hflip_stage(view, pipeline, rng):
    if torch.rand((), generator=rng).item() < pipeline.flip_p:
        return TF.hflip(view)
    return view


def _color_jitter_stage(view, pipeline, rng):
    if torch.rand((), generator=rng).item() < pipeline.jitter_p:
        return _color_jitter(view, pipeline, rng)
    return view


def _grayscale_stage(view, pipeline, rng):
    if torch.rand((), generator=rng).item() < pipeline.grayscale_p and view.shape[0] == 3:
        return TF.rgb_to_grayscale(view, num_output_channels=3)
    return view


def _pad_crop_stage(view, pipeline, rng):
    pad = pipeline.pad
    side = min(view.shape[-2:])
    if side <= 2 * pad:
        raise ArgumentError(f"image side {side} is too small for reflection padding of {pad}")
    top, left = draw_crop_offset(rng, pad)
    return pad_crop_flip(view, top, left, False, pad)


_STAGES = {
    'resized_crop': _resized_crop_stage,
    'hflip': _hflip_stage,
    'color_jitter': _color_jitter_stage,
    'grayscale': _grayscale_stage,
    'pad_crop': _pad_crop_stage,
}


def _apply_stages(x, pipeline, rng):
    view = x
    for name in pipeline.transforms:
        view = _STAGES[name](view, pipeline, rng)
    return view


def pretrain_view(x, pipeline, rng):
    """One draw c(x) of the pre-training recipe for a C x H x W image"""
    return _apply_stages(x, pipeline, rng).clamp(0.0, 1.0)


def make_views(x, pipeline, rng):
    """Positive pair (c(x), c'(x)) from two independent draws"""
    if pipeline.mode != PipelineMode.PRETRAIN:
        raise ArgumentError("make_views needs a pre-training pipeline")
    return pretrain_view(x, pipeline, rng), pretrain_view(x, pipeline, rng)


def make_view_batch(images, pipeline, rng):
    """Positive pairs for a whole N x C x H x W batch"""
    pairs = [make_views(image, pipeline, rng) for image in images]
    return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


def draw_crop_offset(rng, pad=4):
    """Top-left corner of the crop inside the padded image"""
    return _randint(rng, 0, 2 * pad + 1), _randint(rng, 0, 2 * pad + 1)


def pad_crop_flip(x, top, left, flip, pad=4):
    """Reflection pad, crop at (top, left), optionally mirror"""
    _, height, width = x.shape
    padded = F.pad(x.unsqueeze(0), (pad, pad, pad, pad), mode='reflect').squeeze(0)
    crop = padded[:, top:top + height, left:left + width]
    if flip:
        crop = TF.hflip(crop)
    return crop


FINETUNE_PIPELINE = AugmentationPipeline.finetune_default()


def finetune_augment(x, rng, pipeline=FINETUNE_PIPELINE):
    """Pad-crop-flip recipe used for fine-tuning"""
    if pipeline.mode != PipelineMode.FINETUNE:
        raise ArgumentError("finetune_augment needs a fine-tuning pipeline")
    return _apply_stages(x, pipeline, rng)


def finetune_augment_batch(images, rng, pipeline=FINETUNE_PIPELINE):
    return torch.stack([finetune_augment(image, rng, pipeline) for image in images])


class DatasetService:
    """Resolves the dataset section of an experiment config into train/test sets"""

    def __init__(self, data_config):
        self.config = data_config

    def load(self):
        """Return (train, test) sets for the configured source"""
        cfg = self.config
        if cfg.seed < 0:
            raise ArgumentError("data.seed is unresolved; build the section through ExperimentConfig")
        if cfg.kind == 'synthetic':
            train = synth_toy_dataset(cfg.seed, cfg.n, cfg.classes, cfg.side)
            test = synth_toy_dataset(cfg.seed + 1, cfg.test_n, cfg.classes, cfg.side)
        elif cfg.kind == 'cifar10':
            train = load_cifar10_binary(cfg.path, side=cfg.side)
            test = load_cifar10_binary(cfg.test_path, side=cfg.side)
        elif cfg.kind == 'cifar100':
            train = load_cifar100_binary(cfg.path, label_kind=cfg.label_kind, side=cfg.side)
            test = load_cifar100_binary(cfg.test_path, label_kind=cfg.label_kind, side=cfg.side)
        else:
            raise ArgumentError(f"unknown dataset kind: {cfg.kind}")
        if cfg.limit and cfg.limit < len(train):
            train = train.subset(np.arange(cfg.limit))
        if cfg.test_limit and cfg.test_limit < len(test):
            test = test.subset(np.arange(cfg.test_limit))
        return train, test
