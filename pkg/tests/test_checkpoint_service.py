import json
import struct

import numpy as np
import pytest
import torch

from src.errors import FormatError, IncompatibleCheckpointError
from src.models.config import ArchConfig
from src.models.encoder import DualBNEncoder
from src.services.checkpoint_service import (
    Checkpoint, decode_checkpoint, decode_generator_states, encode_checkpoint, encode_generator_states,
    load_checkpoint, load_embeddings, load_module_arrays, module_arrays, save_checkpoint, save_embeddings,
)


def _checkpoint(tiny_arch):
    encoder = DualBNEncoder(tiny_arch)
    return Checkpoint(metadata={'kind': 'pretrain', 'epoch': 3, 'history': [{'loss': 1.5}]},
                      arrays=module_arrays(encoder, 'query'))


def test_save_load_save_is_byte_identical(tiny_arch, tmp_path):
    first = save_checkpoint(_checkpoint(tiny_arch), tmp_path / 'a.bin')
    second = save_checkpoint(load_checkpoint(first), tmp_path / 'b.bin')
    assert (tmp_path / 'a.bin').read_bytes() == (tmp_path / 'b.bin').read_bytes()
    assert load_checkpoint(second).metadata['history'] == [{'loss': 1.5}]


def test_floats_are_stored_as_float32_and_integers_as_int64():
    arrays = {
        'a': np.arange(6, dtype=np.float32).reshape(2, 3),
        'b': np.array([1.5, -2.25]),
        'c': torch.tensor([3, 4, 5]),
        'd': torch.tensor([0.5], dtype=torch.float64),
    }
    raw = encode_checkpoint(Checkpoint(arrays=arrays))
    header_len, = struct.unpack('<Q', raw[8:16])
    tags = {entry['name']: entry['dtype'] for entry in json.loads(raw[16:16 + header_len])['arrays']}
    assert tags == {'a': 'float32', 'b': 'float32', 'c': 'int64', 'd': 'float32'}
    decoded = decode_checkpoint(raw)
    assert decoded.arrays['b'].dtype == np.float32
    assert decoded.arrays['b'].tolist() == [1.5, -2.25]
    assert np.array_equal(decoded.arrays['a'], arrays['a'])
    assert decoded.arrays['c'].tolist() == [3, 4, 5]


def test_encoder_checkpoint_holds_only_float32_and_int64(tiny_arch):
    arrays = decode_checkpoint(encode_checkpoint(_checkpoint(tiny_arch))).arrays
    assert {a.dtype for a in arrays.values()} == {np.dtype('<f4'), np.dtype('<i8')}
    assert all(a.dtype == np.int64 for name, a in arrays.items() if name.endswith('num_batches_tracked'))


def test_float64_tag_is_a_format_error():
    raw = encode_checkpoint(Checkpoint(arrays={'b': np.array([1.5])}))
    with pytest.raises(FormatError):
        decode_checkpoint(raw.replace(b'"float32"', b'"float64"'))


def test_other_container_version_is_incompatible():
    raw = encode_checkpoint(Checkpoint(metadata={'kind': 'pretrain'}, version=2))
    with pytest.raises(IncompatibleCheckpointError):
        decode_checkpoint(raw)


def test_truncated_file_is_a_format_error(tiny_arch, tmp_path):
    path = save_checkpoint(_checkpoint(tiny_arch), tmp_path / 'ckpt.bin')
    raw = (tmp_path / 'ckpt.bin').read_bytes()
    (tmp_path / 'ckpt.bin').write_bytes(raw[:-7])
    with pytest.raises(FormatError):
        load_checkpoint(path)


@pytest.mark.parametrize('raw', [b'', b'NOTAMOC!' + bytes(8), b'AMOCCKPT\x03'])
def test_garbage_is_a_format_error(raw):
    with pytest.raises(FormatError):
        decode_checkpoint(raw)


def test_trailing_bytes_are_rejected():
    raw = encode_checkpoint(Checkpoint(arrays={'x': np.zeros(2)}))
    with pytest.raises(FormatError):
        decode_checkpoint(raw + b'\x00')


def test_missing_file_is_a_format_error(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / 'absent.bin')


def test_architecture_mismatch_leaves_parameters_alone(tiny_arch):
    checkpoint = _checkpoint(tiny_arch)
    other = DualBNEncoder(ArchConfig(name='tiny', width=6, embed_dim=8))
    before = {k: v.clone() for k, v in other.state_dict().items()}
    with pytest.raises(IncompatibleCheckpointError):
        load_module_arrays(other, checkpoint, 'query')
    assert all(torch.equal(before[k], v) for k, v in other.state_dict().items())


def test_module_arrays_restore_exactly(tiny_arch):
    torch.manual_seed(0)
    source = DualBNEncoder(tiny_arch)
    torch.manual_seed(1)
    target = DualBNEncoder(tiny_arch)
    checkpoint = decode_checkpoint(encode_checkpoint(Checkpoint(arrays=module_arrays(source, 'query'))))
    load_module_arrays(target, checkpoint, 'query')
    assert all(torch.equal(a, b) for a, b in zip(source.state_dict().values(), target.state_dict().values()))


def test_generator_states_survive_encoding():
    gen = torch.Generator().manual_seed(42)
    torch.rand(5, generator=gen)
    restored = torch.Generator()
    restored.set_state(decode_generator_states(encode_generator_states({'g': gen.get_state()}))['g'])
    assert torch.equal(torch.rand(4, generator=gen), torch.rand(4, generator=restored))


def test_embeddings_file(tmp_path):
    emb = np.eye(3, 4, dtype=np.float32)
    labels = np.array([0, 1, 1])
    save_embeddings(tmp_path / 'emb.bin', emb, labels, {'bn': 'adv'})
    got, got_labels, meta = load_embeddings(tmp_path / 'emb.bin')
    assert np.array_equal(got, emb)
    assert got_labels.tolist() == [0, 1, 1]
    assert meta['bn'] == 'adv'


def test_embeddings_loader_rejects_other_kinds(tiny_arch, tmp_path):
    save_checkpoint(_checkpoint(tiny_arch), tmp_path / 'ckpt.bin')
    with pytest.raises(FormatError):
        load_embeddings(tmp_path / 'ckpt.bin')
