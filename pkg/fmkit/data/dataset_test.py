import unittest

import torch

from fmkit.data.dataset import fit_segment, collate_features, FeatureDataset
from fmkit.definitions import DTYPE
from fmkit.models import FeatureRecord, Label


class DatasetTestCase(unittest.TestCase):
    def test_fit_segment(self):
        features = torch.arange(10, dtype=DTYPE).reshape(5, 2)
        padded = fit_segment(features, 12)
        self.assertEqual(padded.shape[0], 12, 'short utterances are repeated up to the segment')
        self.assertTrue(torch.equal(padded[5:10], features), 'repetition starts over')
        cropped = fit_segment(features, 3, torch.Generator().manual_seed(0))
        self.assertEqual(cropped.shape[0], 3, 'long utterances are cropped')
        start = int(cropped[0, 0].item()) // 2
        self.assertTrue(torch.equal(cropped, features[start:start + 3]), 'crop is a contiguous window')

    def test_collate(self):
        items = [(torch.ones(3, 2, dtype=DTYPE), 0, 'a'), (torch.ones(5, 2, dtype=DTYPE), 1, 'b')]
        batch = collate_features(items)
        self.assertEqual(tuple(batch.features.shape), (2, 5, 2), 'padded to the longest item')
        self.assertEqual(batch.lengths.tolist(), [3, 5], 'lengths recorded')
        self.assertEqual(batch.labels.tolist(), [0, 1], 'labels recorded')
        self.assertEqual(batch.features[0, 3:].abs().sum().item(), 0., 'padding is zero')

    def test_dataset_segments(self):
        records = [FeatureRecord(f'r{i}', Label.REAL if i % 2 else Label.FAKE, torch.randn(4 + i, 3, dtype=DTYPE))
                   for i in range(6)]
        ds = FeatureDataset.from_records(records, segment_frames=6)
        for i in range(len(ds)):
            features, label, record_id = ds[i]
            self.assertEqual(features.shape[0], 6, 'every item has the segment length')
            self.assertEqual(record_id, f'r{i}', 'ids kept')
        self.assertEqual(ds.labels, [1, 0, 1, 0, 1, 0], 'label values in order')
