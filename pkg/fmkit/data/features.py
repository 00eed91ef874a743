import pathlib
import re
import struct
import zlib
from collections import OrderedDict, Counter
from typing import List, Optional, Dict, Sequence, Tuple, Union

import numpy as np
import torch

from fmkit.definitions import DTYPE, FRAME_RATE, DEFAULT_DURATION_EDGES
from fmkit.models import FeatureRecord, ManifestEntry, Label

FEATURE_MAGIC = b'FMFE'
FEATURE_VERSION = 1
FEATURE_HEADER = struct.Struct('<4sHII')
FEATURE_CRC = struct.Struct('<I')

MANIFEST_VERSION = 1
MANIFEST_HEADER_RE = re.compile(r'^#fmfe-manifest v(\d+) frame_rate=(\d+)\s*$')


class FeatureFileError(Exception):
    pass


class BadMagicError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class HeaderMismatchError(FeatureFileError):
    pass


class ChecksumError(FeatureFileError):
    pass


class ManifestError(Exception):
    pass


def encode_features(features: Union[np.ndarray, torch.Tensor]) -> bytes:
    if isinstance(features, torch.Tensor):
        features = features.detach().cpu().numpy()
    arr = np.ascontiguousarray(features, dtype='<f8')
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f'features must be a non-empty T x C matrix, got shape {arr.shape}')
    if not np.isfinite(arr).all():
        raise ValueError('features must be finite')
    payload = arr.tobytes()
    return FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, arr.shape[0], arr.shape[1]) + payload + \
        FEATURE_CRC.pack(zlib.crc32(payload))


def decode_features(data: bytes, source: str = '<bytes>') -> np.ndarray:
    if len(data) < len(FEATURE_MAGIC):
        raise TruncatedFileError(f'{source}: file is shorter than the magic')
    if data[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise BadMagicError(f'{source}: bad magic {data[:len(FEATURE_MAGIC)]!r}')
    if len(data) < FEATURE_HEADER.size:
        raise TruncatedFileError(f'{source}: header is truncated')
    _, version, frames, channels = FEATURE_HEADER.unpack_from(data, 0)
    if version != FEATURE_VERSION:
        raise HeaderMismatchError(f'{source}: unsupported version {version}')
    if frames < 1 or channels < 1:
        raise HeaderMismatchError(f'{source}: header declares an empty {frames} x {channels} matrix')
    expected = frames * channels * 8
    available = len(data) - FEATURE_HEADER.size - FEATURE_CRC.size
    if available < expected:
        raise TruncatedFileError(f'{source}: payload has {max(available, 0)} bytes, header declares {expected}')
    if available > expected:
        raise HeaderMismatchError(f'{source}: payload has {available} bytes, header declares {expected}')
    payload = data[FEATURE_HEADER.size:FEATURE_HEADER.size + expected]
    stored, = FEATURE_CRC.unpack_from(data, FEATURE_HEADER.size + expected)
    if zlib.crc32(payload) != stored:
        raise ChecksumError(f'{source}: payload checksum mismatch')
    return np.frombuffer(payload, dtype='<f8').reshape(frames, channels).astype(np.float64)


def write_feature_file(loc: pathlib.Path, features: Union[np.ndarray, torch.Tensor]):
    loc.parent.mkdir(parents=True, exist_ok=True)
    with open(loc, 'wb') as fp:
        fp.write(encode_features(features))


def read_feature_header(loc: pathlib.Path) -> Tuple[int, int, int]:
    with open(loc, 'rb') as fp:
        head = fp.read(FEATURE_HEADER.size)
    if len(head) >= len(FEATURE_MAGIC) and head[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise BadMagicError(f'{loc}: bad magic {head[:len(FEATURE_MAGIC)]!r}')
    if len(head) < FEATURE_HEADER.size:
        raise TruncatedFileError(f'{loc}: header is truncated')
    _, version, frames, channels = FEATURE_HEADER.unpack(head)
    return version, frames, channels


def read_feature_file(loc: pathlib.Path, record_id: Optional[str] = None, label: Optional[Label] = None,
                      frame_rate: int = FRAME_RATE) -> FeatureRecord:
    if not loc.exists():
        raise FeatureFileError(f'feature file {loc} does not exist')
    with open(loc, 'rb') as fp:
        arr = decode_features(fp.read(), str(loc))
    return FeatureRecord(record_id if record_id is not None else loc.stem, label,
                         torch.from_numpy(arr).to(DTYPE), frame_rate)


class Manifest:
    def __init__(self, entries: List[ManifestEntry], frame_rate: int = FRAME_RATE,
                 root: Optional[pathlib.Path] = None, version: int = MANIFEST_VERSION):
        self.entries = entries
        self.frame_rate = frame_rate
        self.root = root if root is not None else pathlib.Path('.')
        self.version = version

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> pathlib.Path:
        return self.root / entry.path

    def load(self, entry: ManifestEntry) -> FeatureRecord:
        record = read_feature_file(self.resolve(entry), entry.id, entry.label, self.frame_rate)
        if (record.frames, record.channels) != (entry.frames, entry.channels):
            raise HeaderMismatchError(f'{entry.id}: file holds {record.frames} x {record.channels}, '
                                      f'manifest says {entry.frames} x {entry.channels}')
        return record

    def label_counts(self) -> Dict[Label, int]:
        counts = Counter(e.label for e in self.entries)
        return {Label.REAL: counts.get(Label.REAL, 0), Label.FAKE: counts.get(Label.FAKE, 0)}

    @property
    def channels(self) -> Optional[int]:
        return self.entries[0].channels if len(self.entries) > 0 else None

    def sorted(self) -> 'Manifest':
        return Manifest(sorted(self.entries, key=lambda e: e.id), self.frame_rate, self.root, self.version)

    def validate(self):
        """Checks ids are unique, paths resolve and file headers agree with the entries."""
        seen = set()
        channels = self.channels
        for entry in self.entries:
            if entry.id in seen:
                raise ManifestError(f'duplicate id {entry.id}')
            seen.add(entry.id)
            if entry.channels != channels:
                raise ManifestError(f'{entry.id} has {entry.channels} channels, expected {channels}')
            loc = self.resolve(entry)
            if not loc.exists():
                raise ManifestError(f'{entry.id}: {loc} does not exist')
            _, frames, chans = read_feature_header(loc)
            if (frames, chans) != (entry.frames, entry.channels):
                raise HeaderMismatchError(f'{entry.id}: header holds {frames} x {chans}, '
                                          f'manifest says {entry.frames} x {entry.channels}')


def format_manifest(manifest: Manifest) -> str:
    lines = [f'#fmfe-manifest v{manifest.version} frame_rate={manifest.frame_rate}']
    for e in manifest.entries:
        lines.append(f'{e.id}\t{e.path}\t{e.label}\t{e.frames}\t{e.channels}')
    return '\n'.join(lines) + '\n'


def write_manifest(loc: pathlib.Path, manifest: Manifest):
    loc.parent.mkdir(parents=True, exist_ok=True)
    with open(loc, 'w', encoding='utf-8') as fp:
        fp.write(format_manifest(manifest))


def parse_manifest(text: str, root: pathlib.Path, source: str = '<manifest>') -> Manifest:
    lines = text.splitlines()
    if len(lines) == 0:
        raise ManifestError(f'{source}: empty manifest, missing header')
    m = MANIFEST_HEADER_RE.match(lines[0])
    if m is None:
        raise ManifestError(f'{source}: bad header line {lines[0]!r}')
    version, frame_rate = int(m.group(1)), int(m.group(2))
    if version != MANIFEST_VERSION:
        raise ManifestError(f'{source}: unsupported manifest version {version}')
    if frame_rate < 1:
        raise ManifestError(f'{source}: frame rate must be positive')

    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line.strip() == '':
            continue
        fields = line.split('\t')
        if len(fields) != 5:
            raise ManifestError(f'{source}:{lineno}: expected id, path, label, T, C but found {len(fields)} fields')
        record_id, path, label, frames, channels = fields
        if label.strip() == '':
            raise ManifestError(f'{source}:{lineno}: missing label')
        try:
            parsed = Label.parse(label)
            frames, channels = int(frames), int(channels)
        except ValueError as e:
            raise ManifestError(f'{source}:{lineno}: {e}')
        if frames < 1 or channels < 1:
            raise ManifestError(f'{source}:{lineno}: T and C must be positive')
        entries.append(ManifestEntry(record_id, path, parsed, frames, channels))
    return Manifest(entries, frame_rate, root, version)


def read_manifest(loc: pathlib.Path) -> Manifest:
    if not loc.exists():
        raise ManifestError(f'manifest {loc} does not exist')
    with open(loc, 'r', encoding='utf-8') as fp:
        return parse_manifest(fp.read(), loc.parent, str(loc))


def bucket_names(edges: Sequence[float]) -> List[str]:
    names = [f'<{edges[0]:g}s']
    for lo, hi in zip(edges, edges[1:]):
        names.append(f'{lo:g}-{hi:g}s')
    names.append(f'>{edges[-1]:g}s')
    return names


def bucket_index(duration: float, edges: Sequence[float]) -> int:
    """Left-closed buckets, a duration equal to an edge belongs to the bucket it opens."""
    return int(np.searchsorted(np.asarray(edges), duration, side='right'))


def bucket_by_duration(manifest: Manifest,
                       edges: Sequence[float] = DEFAULT_DURATION_EDGES) -> Dict[str, List[ManifestEntry]]:
    if len(edges) == 0 or any(a >= b for a, b in zip(edges, edges[1:])):
        raise ValueError(f'bucket edges must be non-empty and strictly increasing, got {list(edges)}')
    names = bucket_names(edges)
    buckets = OrderedDict((n, []) for n in names)
    for entry in manifest.entries:
        buckets[names[bucket_index(entry.duration(manifest.frame_rate), edges)]].append(entry)
    return buckets
