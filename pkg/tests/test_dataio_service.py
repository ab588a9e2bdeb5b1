import numpy as np
import pytest
import torch
from scipy import stats

from src.errors import ArgumentError, CorruptRecordError, FormatError
from src.models.config import DataConfig
from src.models.image_set import AugmentationPipeline, LabeledImageSet
from src.services.dataio_service import (
    DatasetService, draw_crop_offset, encode_cifar_records, finetune_augment, load_cifar10_binary,
    load_cifar100_binary, make_view_batch, make_views, pad_crop_flip, save_cifar_binary,
    synth_toy_dataset,
)


def _quantized_set(n=6, side=32, classes=10, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, side, side, 3)).astype(np.float32) / 255.0
    labels = rng.integers(0, classes, size=n)
    return LabeledImageSet(images, labels, classes)


def test_cifar10_save_then_load_preserves_pixels_and_labels(tmp_path):
    data = _quantized_set()
    path = save_cifar_binary(data, tmp_path / 'batch.bin')
    loaded = load_cifar10_binary(path)
    assert np.array_equal(loaded.labels, data.labels)
    assert np.allclose(loaded.images, data.images, atol=1e-7)
    assert loaded.images.dtype == np.float32


def test_cifar10_record_layout_is_channel_major(tmp_path):
    images = np.zeros((1, 32, 32, 3), dtype=np.float32)
    images[0, 0, 0] = [1.0, 0.0, 0.0]
    raw = encode_cifar_records(LabeledImageSet(images, np.array([3]), 10))
    assert len(raw) == 3073
    assert raw[0] == 3
    assert raw[1] == 255
    assert raw[1 + 1024] == 0


def test_cifar10_concatenates_files_in_order(tmp_path):
    a = save_cifar_binary(_quantized_set(n=3, seed=1), tmp_path / 'a.bin')
    b = save_cifar_binary(_quantized_set(n=2, seed=2), tmp_path / 'b.bin')
    loaded = load_cifar10_binary([a, b])
    assert len(loaded) == 5
    assert np.array_equal(loaded.labels[3:], _quantized_set(n=2, seed=2).labels)


def test_truncated_file_is_a_format_error(tmp_path):
    path = tmp_path / 'bad.bin'
    path.write_bytes(b'\x00' * 3074)
    with pytest.raises(FormatError):
        load_cifar10_binary(path)


def test_label_out_of_range_is_a_corrupt_record(tmp_path):
    raw = bytearray(encode_cifar_records(_quantized_set(n=2)))
    raw[3073] = 10
    path = tmp_path / 'corrupt.bin'
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptRecordError):
        load_cifar10_binary(path)


def test_missing_file_is_an_argument_error(tmp_path):
    with pytest.raises(ArgumentError):
        load_cifar10_binary(tmp_path / 'nope.bin')


def test_cifar100_reads_fine_and_coarse_labels(tmp_path):
    pixels = np.zeros((2, 3072), dtype=np.uint8)
    labels = np.array([[4, 87], [19, 2]], dtype=np.uint8)
    path = tmp_path / 'train.bin'
    path.write_bytes(np.concatenate([labels, pixels], axis=1).tobytes())
    fine = load_cifar100_binary(path, 'fine')
    coarse = load_cifar100_binary(path, 'coarse')
    assert fine.labels.tolist() == [87, 2]
    assert fine.num_classes == 100
    assert coarse.labels.tolist() == [4, 19]
    assert coarse.num_classes == 20
    with pytest.raises(ArgumentError):
        load_cifar100_binary(path, 'medium')


def test_synthetic_dataset_is_seeded_and_balanced():
    a = synth_toy_dataset(seed=5, n=100, classes=2, side=16)
    b = synth_toy_dataset(seed=5, n=100, classes=2, side=16)
    c = synth_toy_dataset(seed=6, n=100, classes=2, side=16)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)
    assert a.class_counts().tolist() == [50, 50]
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert a.images.shape == (100, 16, 16, 3)


def test_synthetic_dataset_rejects_degenerate_requests():
    with pytest.raises(ArgumentError):
        synth_toy_dataset(seed=0, n=1, classes=2, side=16)
    with pytest.raises(ArgumentError):
        synth_toy_dataset(seed=0, n=10, classes=1, side=16)
    with pytest.raises(ArgumentError):
        synth_toy_dataset(seed=0, n=10, classes=2, side=4)


def test_identity_pipeline_views_equal_the_input():
    x = torch.rand(3, 12, 12, generator=torch.Generator().manual_seed(0))
    view_q, view_k = make_views(x, AugmentationPipeline.identity(), torch.Generator().manual_seed(1))
    assert torch.equal(view_q, x)
    assert torch.equal(view_k, x)


def test_pretrain_views_keep_shape_and_range():
    images = torch.rand(4, 3, 12, 12, generator=torch.Generator().manual_seed(0))
    rng = torch.Generator().manual_seed(2)
    view_q, view_k = make_view_batch(images, AugmentationPipeline.pretrain_default(), rng)
    assert view_q.shape == images.shape and view_k.shape == images.shape
    assert float(view_q.min()) >= 0.0 and float(view_q.max()) <= 1.0
    assert not torch.equal(view_q, view_k)


def test_views_are_reproducible_from_the_seed():
    x = torch.rand(3, 12, 12, generator=torch.Generator().manual_seed(0))
    pipeline = AugmentationPipeline.pretrain_default()
    first = make_views(x, pipeline, torch.Generator().manual_seed(9))
    second = make_views(x, pipeline, torch.Generator().manual_seed(9))
    assert torch.equal(first[0], second[0]) and torch.equal(first[1], second[1])


def test_make_views_needs_a_pretrain_pipeline():
    x = torch.rand(3, 12, 12)
    with pytest.raises(ArgumentError):
        make_views(x, AugmentationPipeline.finetune_default(), torch.Generator())


def test_pad_crop_flip_at_center_is_identity():
    x = torch.rand(3, 12, 12)
    assert torch.equal(pad_crop_flip(x, 4, 4, False, pad=4), x)
    assert torch.equal(pad_crop_flip(x, 4, 4, True, pad=4), x.flip(-1))


def test_finetune_augment_rejects_small_images():
    with pytest.raises(ArgumentError):
        finetune_augment(torch.rand(3, 8, 8), torch.Generator())
    with pytest.raises(ArgumentError):
        finetune_augment(torch.rand(3, 12, 12), torch.Generator(), AugmentationPipeline.pretrain_default())


def test_dataset_service_applies_limits():
    config = DataConfig(n=30, test_n=20, side=12, seed=1, limit=10, test_limit=5)
    train, test = DatasetService(config).load()
    assert len(train) == 10
    assert len(test) == 5


def test_cifar10_round_trip_is_byte_exact(tmp_path):
    rng = np.random.default_rng(11)
    records = rng.integers(0, 256, size=(5, 3073), dtype=np.uint8)
    records[:, 0] = rng.integers(0, 10, size=5)
    source = tmp_path / 'source.bin'
    source.write_bytes(records.tobytes())
    copy = save_cifar_binary(load_cifar10_binary(source), tmp_path / 'copy.bin')
    assert copy.read_bytes() == source.read_bytes()


def test_toy_set_is_linearly_separable_on_raw_pixels():
    data = synth_toy_dataset(seed=1, n=200, classes=2, side=16)
    features = np.hstack([data.images.reshape(len(data), -1).astype(np.float64), np.ones((len(data), 1))])
    targets = np.where(data.labels == 1, 1.0, -1.0)
    weights, *_ = np.linalg.lstsq(features, targets, rcond=None)
    accuracy = np.mean(np.sign(features @ weights) == targets)
    assert accuracy >= 0.95


def test_crop_offsets_are_uniform():
    rng = torch.Generator().manual_seed(0)
    counts = np.zeros((9, 9), dtype=np.int64)
    for _ in range(10_000):
        top, left = draw_crop_offset(rng, pad=4)
        counts[top, left] += 1
    assert counts.sum() == 10_000
    assert stats.chisquare(counts.ravel()).pvalue > 1e-3


def test_corner_crop_reflects_the_first_rows():
    x = torch.rand(3, 12, 12, generator=torch.Generator().manual_seed(3))
    crop = pad_crop_flip(x, 0, 0, False, pad=4)
    assert torch.equal(crop[:, :4, 4:], x[:, [4, 3, 2, 1], :8])
    assert torch.equal(crop[:, 4:, 4:], x[:, :8, :8])


def test_pipeline_transforms_run_in_order():
    x = torch.rand(3, 12, 12, generator=torch.Generator().manual_seed(4))
    mirror = AugmentationPipeline(transforms=('hflip',), flip_p=1.0)
    assert torch.equal(make_views(x, mirror, torch.Generator())[0], x.flip(-1))
    with pytest.raises(ArgumentError):
        AugmentationPipeline(transforms=('pad_crop',))


def test_finetune_pipeline_pad_is_honored():
    x = torch.rand(3, 12, 12, generator=torch.Generator().manual_seed(5))
    unpadded = AugmentationPipeline(mode='finetune', transforms=('pad_crop', 'hflip'), pad=0, flip_p=0.0)
    assert torch.equal(finetune_augment(x, torch.Generator(), unpadded), x)
    wide = AugmentationPipeline(mode='finetune', transforms=('pad_crop',), pad=6)
    with pytest.raises(ArgumentError):
        finetune_augment(x, torch.Generator(), wide)
