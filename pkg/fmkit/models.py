from enum import Enum
from typing import Optional

import torch

from fmkit.definitions import FRAME_RATE


class Label(Enum):
    REAL = 0
    FAKE = 1
    LABEL_COUNT = 2

    @staticmethod
    def parse(name: str) -> 'Label':
        key = name.strip().upper()
        if key not in ('REAL', 'FAKE'):
            raise ValueError(f'unrecognized label {name!r}, expected real or fake')
        return Label[key]

    def __str__(self) -> str:
        return self.name.lower()


class FeatureRecord:
    def __init__(self, record_id: str, label: Optional[Label], features: torch.Tensor,
                 frame_rate: int = FRAME_RATE):
        self.id = record_id
        self.label = label
        self.features = features
        self.frame_rate = frame_rate

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def duration_s(self) -> float:
        return self.frames / self.frame_rate

    def __repr__(self) -> str:
        return f'RECORD: {{ id: {self.id}, label: {self.label}, T: {self.frames}, C: {self.channels} }}'


class ManifestEntry:
    def __init__(self, record_id: str, path: str, label: Label, frames: int, channels: int):
        self.id = record_id
        self.path = path
        self.label = label
        self.frames = frames
        self.channels = channels

    def duration(self, frame_rate: int) -> float:
        return self.frames / frame_rate

    def __repr__(self) -> str:
        return f'ENTRY: {{ id: {self.id}, path: {self.path}, label: {self.label}, T: {self.frames}, C: {self.channels} }}'
