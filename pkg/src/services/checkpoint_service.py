"""
Checkpoint Service for AMOC Lab
Handles the versioned single-file array container used for checkpoints and embeddings.
Every floating array is stored as little-endian float32; integer arrays (BN batch
counters, bank pointers, labels) keep an int64 tag in the header.
"""

import base64
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import structlog
import torch

from src.errors import FormatError, IncompatibleCheckpointError

log = structlog.get_logger()

MAGIC = b'AMOCCKPT'
CHECKPOINT_VERSION = 1

# header dtype name -> little-endian numpy dtype
DTYPES = {
    'float32': np.dtype('<f4'),
    'int64': np.dtype('<i8'),
}


@dataclass
class Checkpoint:
    """Metadata (JSON-serializable) plus named arrays"""

    metadata: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @property
    def kind(self):
        return self.metadata.get('kind')

    def section(self, prefix):
        """Arrays under 'prefix.' with the prefix stripped"""
        head = prefix + '.'
        return {name[len(head):]: value for name, value in self.arrays.items() if name.startswith(head)}

    def to_dict(self):
        return {
            'version': self.version,
            'kind': self.kind,
            'arrays': len(self.arrays),
            'parameters': int(sum(a.size for a in self.arrays.values())),
        }


def _as_array(value):
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    array = np.asarray(value)
    if array.dtype == np.bool_ or np.issubdtype(array.dtype, np.integer):
        return array.astype('<i8')
    return array.astype('<f4')


def _dtype_name(array):
    for name, dtype in DTYPES.items():
        if array.dtype == dtype:
            return name
    raise FormatError(f"unsupported array dtype {array.dtype}")


def encode_checkpoint(checkpoint):
    """Serialize to bytes: magic, u64 header length, JSON header, raw arrays in header order"""
    names = sorted(checkpoint.arrays)
    arrays = [_as_array(checkpoint.arrays[name]) for name in names]
    header = {
        'version': checkpoint.version,
        'metadata': checkpoint.metadata,
        'arrays': [
            {'name': name, 'dtype': _dtype_name(array), 'shape': list(array.shape)}
            for name, array in zip(names, arrays)
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    parts = [MAGIC, struct.pack('<Q', len(header_bytes)), header_bytes]
    parts.extend(np.ascontiguousarray(array).tobytes() for array in arrays)
    return b''.join(parts)


def decode_checkpoint(raw, source='<bytes>'):
    """Parse bytes produced by encode_checkpoint"""
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: not an AMOC container (bad magic)")
    offset = len(MAGIC)
    if len(raw) < offset + 8:
        raise FormatError(f"{source}: truncated header length")
    header_len, = struct.unpack('<Q', raw[offset:offset + 8])
    offset += 8
    if len(raw) < offset + header_len:
        raise FormatError(f"{source}: truncated header")
    try:
        header = json.loads(raw[offset:offset + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}: unreadable header: {e}")
    offset += header_len

    version = header.get('version')
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"{source}: container version {version}, this build reads version {CHECKPOINT_VERSION}"
        )

    arrays = {}
    try:
        for entry in header['arrays']:
            dtype = DTYPES[entry['dtype']]
            shape = tuple(int(d) for d in entry['shape'])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if len(raw) < offset + nbytes:
                raise FormatError(f"{source}: array {entry['name']} is truncated")
            arrays[entry['name']] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize,
                                                  offset=offset).reshape(shape).copy()
            offset += nbytes
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{source}: malformed array table: {e}")
    if offset != len(raw):
        raise FormatError(f"{source}: {len(raw) - offset} trailing bytes")
    return Checkpoint(metadata=header.get('metadata', {}), arrays=arrays, version=version)


def save_checkpoint(state, path):
    """Write a Checkpoint atomically"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as handle:
        handle.write(encode_checkpoint(state))
    os.replace(tmp_path, path)
    log.info("checkpoint_saved", path=str(path), **state.to_dict())
    return path


def load_checkpoint(path):
    try:
        with open(path, 'rb') as handle:
            raw = handle.read()
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}")
    checkpoint = decode_checkpoint(raw, str(path))
    log.info("checkpoint_loaded", path=str(path), **checkpoint.to_dict())
    return checkpoint


def module_arrays(module, prefix):
    """Every parameter and buffer of a module as prefixed numpy arrays"""
    return {f"{prefix}.{name}": _as_array(tensor) for name, tensor in module.state_dict().items()}


def load_module_arrays(module, checkpoint, prefix):
    """Load a prefixed section into a module; names, shapes and dtypes are checked before anything is copied"""
    stored = checkpoint.section(prefix)
    expected = module.state_dict()
    missing = sorted(set(expected) - set(stored))
    unexpected = sorted(set(stored) - set(expected))
    if missing or unexpected:
        raise IncompatibleCheckpointError(
            f"{prefix}: architecture mismatch (missing {missing[:3]}, unexpected {unexpected[:3]})"
        )
    for name, tensor in expected.items():
        if tuple(stored[name].shape) != tuple(tensor.shape):
            raise IncompatibleCheckpointError(
                f"{prefix}.{name}: shape {tuple(stored[name].shape)} does not match {tuple(tensor.shape)}"
            )
    state = {name: torch.from_numpy(stored[name]).to(expected[name].dtype) for name in expected}
    module.load_state_dict(state)


def optimizer_arrays(optimizer, prefix='optimizer'):
    """Per-parameter optimizer buffers as arrays plus the JSON-able group settings"""
    state_dict = optimizer.state_dict()
    arrays = {}
    for index, slots in state_dict['state'].items():
        for slot, value in slots.items():
            if isinstance(value, torch.Tensor):
                arrays[f"{prefix}.{index}.{slot}"] = _as_array(value)
    return arrays, state_dict['param_groups']


def load_optimizer_arrays(optimizer, checkpoint, param_groups, prefix='optimizer'):
    state = {}
    for name, value in checkpoint.section(prefix).items():
        index, slot = name.split('.', 1)
        state.setdefault(int(index), {})[slot] = torch.from_numpy(value)
    if len(param_groups) != len(optimizer.param_groups):
        raise IncompatibleCheckpointError("optimizer parameter groups do not match the checkpoint")
    optimizer.load_state_dict({'state': state, 'param_groups': param_groups})


def encode_generator_states(states):
    """torch.Generator byte states as base64 strings"""
    return {name: base64.b64encode(state.numpy().tobytes()).decode('ascii')
            for name, state in sorted(states.items())}


def decode_generator_states(encoded):
    return {name: torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())
            for name, text in encoded.items()}


def save_embeddings(path, embeddings, labels, metadata=None):
    """Embedding matrix and labels in the same container"""
    checkpoint = Checkpoint(
        metadata={'kind': 'embeddings', **(metadata or {})},
        arrays={'embeddings': np.asarray(embeddings, dtype=np.float32), 'labels': np.asarray(labels)},
    )
    return save_checkpoint(checkpoint, path)


def load_embeddings(path):
    checkpoint = load_checkpoint(path)
    if checkpoint.kind != 'embeddings':
        raise FormatError(f"{path}: expected an embeddings file, found {checkpoint.kind!r}")
    return checkpoint.arrays['embeddings'], checkpoint.arrays['labels'], checkpoint.metadata
