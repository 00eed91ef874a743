from typing import List, Optional, Tuple

import torch
from torch.utils.data import Dataset

from fmkit.data.features import Manifest
from fmkit.definitions import DTYPE
from fmkit.models import FeatureRecord


def fit_segment(features: torch.Tensor, frames: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Random crop of longer utterances, repeat padding of shorter ones."""
    length = features.shape[0]
    if length == frames:
        return features
    if length > frames:
        start = int(torch.randint(0, length - frames + 1, (1,), generator=generator).item())
        return features[start:start + frames]
    repeats = -(-frames // length)
    return features.repeat(repeats, 1)[:frames]


class FeatureBatch:
    def __init__(self, features: torch.Tensor, lengths: torch.Tensor, labels: torch.Tensor, ids: List[str]):
        self.features = features
        self.lengths = lengths
        self.labels = labels
        self.ids = ids

    def __len__(self) -> int:
        return len(self.ids)

    def to(self, device) -> 'FeatureBatch':
        return FeatureBatch(self.features.to(device), self.lengths.to(device), self.labels.to(device), self.ids)


def collate_features(items: List[Tuple[torch.Tensor, int, str]]) -> FeatureBatch:
    """Zero-pads to the longest item; padding always sits after the real frames."""
    lengths = torch.tensor([f.shape[0] for f, _, _ in items], dtype=torch.long)
    channels = items[0][0].shape[1]
    features = torch.zeros(len(items), int(lengths.max().item()), channels, dtype=items[0][0].dtype)
    for i, (f, _, _) in enumerate(items):
        features[i, :f.shape[0]] = f
    labels = torch.tensor([label for _, label, _ in items], dtype=torch.long)
    return FeatureBatch(features, lengths, labels, [record_id for _, _, record_id in items])


class FeatureDataset(Dataset):
    def __init__(self, manifest: Manifest, segment_frames: Optional[int] = None, seed: int = 0):
        self.manifest = manifest
        self.segment_frames = segment_frames
        self.generator = torch.Generator().manual_seed(seed)
        self.records: List[FeatureRecord] = [manifest.load(e) for e in manifest.entries]
        for record in self.records:
            if record.label is None:
                raise ValueError(f'{record.id} has no label')

    @staticmethod
    def from_records(records: List[FeatureRecord], manifest: Optional[Manifest] = None,
                     segment_frames: Optional[int] = None, seed: int = 0) -> 'FeatureDataset':
        ds = FeatureDataset.__new__(FeatureDataset)
        ds.manifest = manifest
        ds.segment_frames = segment_frames
        ds.generator = torch.Generator().manual_seed(seed)
        ds.records = records
        return ds

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, item: int) -> Tuple[torch.Tensor, int, str]:
        record = self.records[item]
        features = record.features.to(DTYPE)
        if self.segment_frames is not None:
            features = fit_segment(features, self.segment_frames, self.generator)
        return features, record.label.value, record.id

    @property
    def labels(self) -> List[int]:
        return [r.label.value for r in self.records]

    @property
    def durations(self) -> List[float]:
        return [r.duration_s for r in self.records]
