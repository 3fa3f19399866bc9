import struct
from collections import OrderedDict
from typing import Mapping, Tuple

import numpy as np

from .errors import FormatError


__all__ = ['MAGIC', 'write_container', 'read_container', 'F32', 'U32']

MAGIC = b'CAUM'

# version 1: f32 payloads only (checkpoints)
# version 2: a section-type byte follows the rank (encoded datasets)
CHECKPOINT_VERSION = 1
DATASET_VERSION = 2

F32 = 0
U32 = 1

_SECTION_DTYPES = {F32: np.dtype('<f4'), U32: np.dtype('<u4')}


def _section_of(array: np.ndarray) -> int:
    return U32 if array.dtype.kind in 'iub' else F32


def write_container(path: str, entries: Mapping[str, np.ndarray], version: int = CHECKPOINT_VERSION):
    '''
    Write named arrays as `CAUM | version u32 | count u32 | entries`. Each
    entry is `name length u16 | utf-8 name | rank u8 | [section u8] |
    extents u64... | little-endian payload`.
    '''
    if version not in (CHECKPOINT_VERSION, DATASET_VERSION):
        raise FormatError(f'unknown container version {version}')

    chunks = [MAGIC, struct.pack('<II', version, len(entries))]
    for name, array in entries.items():
        array = np.asarray(array)
        section = _section_of(array) if version == DATASET_VERSION else F32
        if section == U32 and array.size and array.min() < 0:
            raise FormatError(f'{name}: negative values cannot be stored as u32')

        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', array.ndim))
        if version == DATASET_VERSION:
            chunks.append(struct.pack('<B', section))
        chunks.append(struct.pack(f'<{array.ndim}Q', *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=_SECTION_DTYPES[section]).tobytes())

    with open(path, 'wb') as fd:
        fd.write(b''.join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.blob):
            raise FormatError(f'{self.path}: truncated container at byte {self.offset}')
        chunk = self.blob[self.offset: self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path: str) -> 'OrderedDict[str, np.ndarray]':
    with open(path, 'rb') as fd:
        blob = fd.read()

    reader = _Reader(blob, path)
    if reader.take(4) != MAGIC:
        raise FormatError(f'{path}: bad magic, not a CAUM container')
    version, count = reader.unpack('<II')
    if version not in (CHECKPOINT_VERSION, DATASET_VERSION):
        raise FormatError(f'{path}: unsupported container version {version}')

    entries: 'OrderedDict[str, np.ndarray]' = OrderedDict()
    for _ in range(count):
        (length,) = reader.unpack('<H')
        try:
            name = reader.take(length).decode('utf-8')
        except UnicodeDecodeError:
            raise FormatError(f'{path}: entry name is not utf-8') from None
        (rank,) = reader.unpack('<B')
        section = F32
        if version == DATASET_VERSION:
            (section,) = reader.unpack('<B')
            if section not in _SECTION_DTYPES:
                raise FormatError(f'{path}: entry {name!r} has unknown section type {section}')
        shape = reader.unpack(f'<{rank}Q')
        dtype = _SECTION_DTYPES[section]
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = reader.take(size * dtype.itemsize)
        entries[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()

    if reader.offset != len(blob):
        raise FormatError(f'{path}: {len(blob) - reader.offset} trailing bytes after last entry')
    return entries
