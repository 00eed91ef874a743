import math
from collections import OrderedDict
from typing import Sequence, Dict, Optional, Tuple, List

import numpy as np
import pandas as pd

from fmkit.definitions import Z_95
from fmkit.models import Label


class EmptyClassError(Exception):
    pass


class ScoreSet:
    """Scores where higher means more likely fake."""

    def __init__(self, real_scores: Sequence[float], fake_scores: Sequence[float]):
        self.real_scores = np.asarray(real_scores, dtype=np.float64).reshape(-1)
        self.fake_scores = np.asarray(fake_scores, dtype=np.float64).reshape(-1)

    @staticmethod
    def from_labels(scores: Sequence[float], labels: Sequence[int]) -> 'ScoreSet':
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels)
        return ScoreSet(scores[labels == Label.REAL.value], scores[labels == Label.FAKE.value])

    @property
    def n_real(self) -> int:
        return len(self.real_scores)

    @property
    def n_fake(self) -> int:
        return len(self.fake_scores)

    def validate(self):
        if self.n_real == 0:
            raise EmptyClassError('no real scores')
        if self.n_fake == 0:
            raise EmptyClassError('no fake scores')
        if not (np.isfinite(self.real_scores).all() and np.isfinite(self.fake_scores).all()):
            raise ValueError('scores must be finite')

    def concat(self, other: 'ScoreSet') -> 'ScoreSet':
        return ScoreSet(np.concatenate([self.real_scores, other.real_scores]),
                        np.concatenate([self.fake_scores, other.fake_scores]))


class EERResult:
    def __init__(self, eer: float, threshold: float, sigma: float, n_real: int, n_fake: int, z: float = Z_95):
        self.eer = eer
        self.threshold = threshold
        self.sigma = sigma
        self.ci_half_width = z * sigma
        self.n_real = n_real
        self.n_fake = n_fake

    def interval(self, clamp: bool = True) -> Tuple[float, float]:
        lo, hi = self.eer - self.ci_half_width, self.eer + self.ci_half_width
        if clamp:
            lo, hi = max(0., lo), min(1., hi)
        return lo, hi

    def __repr__(self) -> str:
        lo, hi = self.interval()
        return f'EER: {100 * self.eer:.2f}% ± {100 * self.ci_half_width:.2f} [{100 * lo:.2f}, {100 * hi:.2f}] ' \
               f'(n_real={self.n_real}, n_fake={self.n_fake})'


def eer_sigma(eer: float, n_real: int, n_fake: int) -> float:
    return 0.5 * math.sqrt(eer * (1 - eer) * (n_real + n_fake) / (n_real * n_fake))


def error_rates(s: ScoreSet, thresholds: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Fake is decided when score >= threshold.
    Returns (fakes passed as real, reals flagged as fake) fractions per threshold.
    """
    real = np.sort(s.real_scores)
    fake = np.sort(s.fake_scores)
    far = np.searchsorted(fake, thresholds, side='left') / len(fake)
    frr = 1. - np.searchsorted(real, thresholds, side='left') / len(real)
    return far, frr


def compute_eer(s: ScoreSet, z: float = Z_95) -> EERResult:
    s.validate()
    thresholds = np.append(np.unique(np.concatenate([s.real_scores, s.fake_scores])), np.inf)
    far, frr = error_rates(s, thresholds)
    diff = far - frr
    i = int(np.argmax(diff >= 0))

    if diff[i] == 0 or i == 0:
        eer = float(far[i])
        threshold = float(thresholds[i])
    else:
        alpha = -diff[i - 1] / (diff[i] - diff[i - 1])
        eer = float(far[i - 1] + alpha * (far[i] - far[i - 1]))
        if np.isfinite(thresholds[i]):
            threshold = float(thresholds[i - 1] + alpha * (thresholds[i] - thresholds[i - 1]))
        else:
            threshold = float(thresholds[i - 1])

    return EERResult(eer, threshold, eer_sigma(eer, s.n_real, s.n_fake), s.n_real, s.n_fake, z)


def relative_improvement(baseline_eer: float, eer: float) -> float:
    """Fractional EER reduction relative to a baseline, positive when ``eer`` is better."""
    if baseline_eer <= 0:
        raise ValueError(f'baseline EER must be positive, got {baseline_eer}')
    return (baseline_eer - eer) / baseline_eer


POOLED = 'pooled'


class BucketTable:
    def __init__(self, rows: Dict[str, Optional[EERResult]], counts: Dict[str, Tuple[int, int]]):
        self.rows = rows
        self.counts = counts

    @property
    def pooled(self) -> Optional[EERResult]:
        return self.rows.get(POOLED)

    def to_frame(self) -> pd.DataFrame:
        records: List[dict] = []
        for name, result in self.rows.items():
            n_real, n_fake = self.counts[name]
            records.append({
                'bucket': name,
                'n_real': n_real,
                'n_fake': n_fake,
                'defined': result is not None,
                'eer': np.nan if result is None else result.eer,
                'ci_half_width': np.nan if result is None else result.ci_half_width,
                'threshold': np.nan if result is None else result.threshold,
            })
        return pd.DataFrame.from_records(records, columns=['bucket', 'n_real', 'n_fake', 'defined', 'eer',
                                                           'ci_half_width', 'threshold'])

    def __str__(self) -> str:
        frame = self.to_frame()
        frame['eer'] = frame['eer'].map(lambda v: 'undefined' if np.isnan(v) else f'{100 * v:.2f}%')
        frame['ci_half_width'] = frame['ci_half_width'].map(lambda v: '' if np.isnan(v) else f'±{100 * v:.2f}')
        return frame.drop(columns=['defined', 'threshold']).to_string(index=False)


def eer_by_bucket(buckets: Dict[str, ScoreSet], z: float = Z_95) -> BucketTable:
    """Per-bucket EER plus the pooled EER; a bucket lacking a class is undefined."""
    rows: Dict[str, Optional[EERResult]] = OrderedDict()
    counts: Dict[str, Tuple[int, int]] = OrderedDict()
    pooled = ScoreSet([], [])
    for name, scores in buckets.items():
        counts[name] = (scores.n_real, scores.n_fake)
        pooled = pooled.concat(scores)
        try:
            rows[name] = compute_eer(scores, z)
        except EmptyClassError:
            rows[name] = None
    counts[POOLED] = (pooled.n_real, pooled.n_fake)
    try:
        rows[POOLED] = compute_eer(pooled, z)
    except EmptyClassError:
        rows[POOLED] = None
    return BucketTable(rows, counts)
