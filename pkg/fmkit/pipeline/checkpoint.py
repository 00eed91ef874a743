"""
Binary checkpoint container.

    magic 'FMCK' | version u16 | header length u32 | header (JSON) |
    parameter count u32 | per parameter: name length u16, name (UTF-8),
    ndim u8, dims u32 * ndim, payload float64 | CRC32 of everything before it

All integers and floats are little endian. Nothing time-dependent is stored, so
equal parameters give byte-identical files.
"""
import pathlib
import struct
import zlib
from collections import OrderedDict
from typing import Dict, Any, Optional

import jsonpickle
import numpy as np
import torch

from fmkit.definitions import DTYPE
from fmkit.pipeline.model import ModelConfig, DetectorModel

CHECKPOINT_MAGIC = b'FMCK'
CHECKPOINT_VERSION = 1

PREAMBLE = struct.Struct('<4sHI')
COUNT = struct.Struct('<I')
NAME_LEN = struct.Struct('<H')
NDIM = struct.Struct('<B')
CRC = struct.Struct('<I')


class CheckpointError(Exception):
    pass


class Checkpoint:
    def __init__(self, config: ModelConfig, params: Dict[str, torch.Tensor], meta: Optional[Dict[str, Any]] = None):
        self.config = config
        self.params = params
        self.meta = meta if meta is not None else {}

    @staticmethod
    def from_model(model: DetectorModel, meta: Optional[Dict[str, Any]] = None) -> 'Checkpoint':
        params = OrderedDict((n, p.detach().clone()) for n, p in model.named_parameters())
        return Checkpoint(model.cfg, params, meta)

    def build(self) -> DetectorModel:
        model = DetectorModel(self.config)
        load_parameters(model, self.params)
        return model


def load_parameters(model: DetectorModel, params: Dict[str, torch.Tensor]):
    own = dict(model.named_parameters())
    missing = set(own.keys()) - set(params.keys())
    extra = set(params.keys()) - set(own.keys())
    if len(missing) > 0 or len(extra) > 0:
        raise CheckpointError(f'parameter sets differ, missing {sorted(missing)}, unexpected {sorted(extra)}')
    with torch.no_grad():
        for name, value in params.items():
            if own[name].shape != value.shape:
                raise CheckpointError(f'{name} has shape {tuple(value.shape)}, '
                                      f'the model expects {tuple(own[name].shape)}')
            own[name].copy_(value)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = jsonpickle.encode({'model': ckpt.config.to_dict(), 'meta': ckpt.meta}, unpicklable=False).encode('utf-8')
    parts = [PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)), header, COUNT.pack(len(ckpt.params))]
    for name, value in ckpt.params.items():
        encoded = name.encode('utf-8')
        arr = value.detach().to('cpu', DTYPE).contiguous().numpy()
        parts.append(NAME_LEN.pack(len(encoded)))
        parts.append(encoded)
        parts.append(NDIM.pack(arr.ndim))
        parts.append(struct.pack(f'<{arr.ndim}I', *arr.shape))
        parts.append(arr.astype('<f8').tobytes())
    body = b''.join(parts)
    return body + CRC.pack(zlib.crc32(body))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < PREAMBLE.size + CRC.size:
        raise CheckpointError('checkpoint is truncated')
    magic, version, header_len = PREAMBLE.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f'bad checkpoint magic {magic!r}')
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}')
    body, (stored,) = data[:-CRC.size], CRC.unpack(data[-CRC.size:])
    if zlib.crc32(body) != stored:
        raise CheckpointError('checkpoint checksum mismatch')

    try:
        offset = PREAMBLE.size
        header = jsonpickle.decode(body[offset:offset + header_len].decode('utf-8'))
        offset += header_len
        count, = COUNT.unpack_from(body, offset)
        offset += COUNT.size
        params = OrderedDict()
        for _ in range(count):
            name_len, = NAME_LEN.unpack_from(body, offset)
            offset += NAME_LEN.size
            name = body[offset:offset + name_len].decode('utf-8')
            offset += name_len
            ndim, = NDIM.unpack_from(body, offset)
            offset += NDIM.size
            shape = struct.unpack_from(f'<{ndim}I', body, offset)
            offset += 4 * ndim
            n = int(np.prod(shape)) if ndim > 0 else 1
            arr = np.frombuffer(body, dtype='<f8', count=n, offset=offset).reshape(shape)
            offset += 8 * n
            params[name] = torch.from_numpy(arr.astype(np.float64))
        config = ModelConfig.from_dict(header['model'])
    except (struct.error, ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f'malformed checkpoint: {e}')
    if offset != len(body):
        raise CheckpointError(f'{len(body) - offset} trailing bytes in checkpoint')

    return Checkpoint(config, params, header.get('meta', {}))


def save_checkpoint(loc: pathlib.Path, ckpt: Checkpoint):
    loc.parent.mkdir(parents=True, exist_ok=True)
    with open(loc, 'wb') as fp:
        fp.write(encode_checkpoint(ckpt))


def load_checkpoint(loc: pathlib.Path) -> Checkpoint:
    if not loc.exists():
        raise CheckpointError(f'checkpoint {loc} does not exist')
    with open(loc, 'rb') as fp:
        return decode_checkpoint(fp.read())
