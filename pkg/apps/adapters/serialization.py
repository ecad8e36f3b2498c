"""
Tensor checkpoint format

Binary layout (little-endian):
    magic      4 bytes  b'DLRA'
    version    u16
    count      u32
    per tensor:
        name_len  u16, name  UTF-8 bytes
        ndim      u8,  dims  u32 × ndim
        payload   f64 × prod(dims), row-major
A JSON sidecar ``<file>.json`` holds the metadata needed to rebuild the object.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from apps.numeric.tensor import Tensor

from .exceptions import CheckpointError
from .params import AdapterKind, DualLoraParams, LoraParams, MoeParams

logger = logging.getLogger(__name__)

MAGIC = b'DLRA'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<4sHI')


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + '.json')


def save_tensors(path, tensors: Mapping, metadata: dict) -> Path:
    """
    Write named tensors plus a JSON metadata sidecar

    Returns:
        Path of the binary file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(tensors))]
    for name, tensor in tensors.items():
        array = np.ascontiguousarray(tensor.data if isinstance(tensor, Tensor) else tensor, dtype='<f8')
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)) + encoded)
        chunks.append(struct.pack(f'<B{array.ndim}I', array.ndim, *array.shape))
        chunks.append(array.tobytes(order='C'))
    path.write_bytes(b''.join(chunks))
    sidecar_path(path).write_text(json.dumps(metadata, indent=2, sort_keys=True) + '\n')
    logger.info(f"Saved {len(tensors)} tensors to {path}")
    return path


def load_tensors(path) -> tuple:
    """
    Read a checkpoint written by ``save_tensors``

    Returns:
        (dict of name -> float64 array, metadata dict)

    Raises:
        CheckpointError: missing files, bad magic/version or truncated payload
    """
    path = Path(path)
    meta_path = sidecar_path(path)
    if not path.exists() or not meta_path.exists():
        raise CheckpointError(f"Checkpoint {path} or its sidecar is missing")
    try:
        blob = path.read_bytes()
        metadata = json.loads(meta_path.read_text(encoding='utf-8'))
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc
    except ValueError as exc:
        raise CheckpointError(f"Sidecar {meta_path} is not valid JSON: {exc}") from exc
    if not isinstance(metadata, dict):
        raise CheckpointError(f"Sidecar {meta_path} does not hold a JSON object")
    try:
        magic, version, count = _HEADER.unpack_from(blob, 0)
    except struct.error as exc:
        raise CheckpointError(f"{path} is too short to be a checkpoint") from exc
    if magic != MAGIC:
        raise CheckpointError(f"{path} has bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has unsupported version {version}")

    offset = _HEADER.size
    tensors = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from('<H', blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode('utf-8')
            offset += name_len
            (ndim,) = struct.unpack_from('<B', blob, offset)
            offset += 1
            dims = struct.unpack_from(f'<{ndim}I', blob, offset)
            offset += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            payload = blob[offset:offset + 8 * size]
            if len(payload) != 8 * size:
                raise CheckpointError(f"{path}: tensor '{name}' is truncated")
            tensors[name] = np.frombuffer(payload, dtype='<f8').reshape(dims).astype(np.float64)
            offset += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"{path} is truncated") from exc
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path} holds a tensor name that is not UTF-8") from exc
    return tensors, metadata


def adapter_metadata(params) -> dict:
    if isinstance(params, LoraParams):
        return {'kind': AdapterKind.LORA.value, 'alpha': params.alpha, 'dropout': params.dropout,
                'scale_rule': params.scale_rule.value}
    if isinstance(params, DualLoraParams):
        return {'kind': AdapterKind.DUAL_LORA.value, 'alpha': params.alpha, 'dropout': params.dropout,
                'scale_rule': params.scale_rule.value, 'eps': params.eps, 'use_norm': params.use_norm,
                'use_gate_activation': params.use_gate_activation}
    if isinstance(params, MoeParams):
        return {'kind': AdapterKind.MOE.value, 'strategy': params.strategy.value, 'top_k': params.top_k,
                'dropout': params.dropout, 'experts': [adapter_metadata(e) for e in params.experts]}
    raise TypeError(f"Not an adapter parameter set: {type(params).__name__}")


def adapter_tensors(params) -> dict:
    """Every tensor of an adapter, including the norm affine of an ablated norm"""
    if isinstance(params, DualLoraParams):
        return {'S': params.S, 'T': params.T, 'B': params.B,
                'norm_gain': params.norm_gain, 'norm_bias': params.norm_bias}
    return params.trainable()


def build_adapter(metadata: dict, tensors: Mapping, prefix: str = ''):
    """Rebuild an adapter from checkpoint metadata and arrays keyed ``<prefix><name>``"""

    def tensor(name: str) -> Tensor:
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"Checkpoint lacks tensor '{key}'")
        return Tensor(tensors[key], requires_grad=True, name=name)

    kind = AdapterKind(metadata['kind'])
    if kind is AdapterKind.LORA:
        return LoraParams(A=tensor('A'), B=tensor('B'), alpha=metadata['alpha'],
                          dropout=metadata['dropout'], scale_rule=metadata['scale_rule'])
    if kind is AdapterKind.DUAL_LORA:
        return DualLoraParams(
            S=tensor('S'), T=tensor('T'), B=tensor('B'), alpha=metadata['alpha'],
            norm_gain=tensor('norm_gain'), norm_bias=tensor('norm_bias'),
            dropout=metadata['dropout'], eps=metadata['eps'], use_norm=metadata['use_norm'],
            use_gate_activation=metadata['use_gate_activation'], scale_rule=metadata['scale_rule'],
        )
    experts = [
        build_adapter(expert_meta, tensors, f'{prefix}expert{index}.')
        for index, expert_meta in enumerate(metadata['experts'])
    ]
    return MoeParams(experts=experts, router=tensor('router'), strategy=metadata['strategy'],
                     top_k=metadata['top_k'], dropout=metadata['dropout'])


def save_adapter(path, params) -> Path:
    return save_tensors(path, adapter_tensors(params), adapter_metadata(params))


def load_adapter(path):
    tensors, metadata = load_tensors(path)
    try:
        return build_adapter(metadata, tensors)
    except CheckpointError:
        raise
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"Sidecar of {path} is malformed: {exc!r}") from exc
