import os
import pathlib
import shutil
import tempfile
import unittest

import numpy as np

from fmkit.data.features import write_feature_file, read_feature_file, encode_features, decode_features, \
    BadMagicError, TruncatedFileError, HeaderMismatchError, ChecksumError, FEATURE_HEADER, FEATURE_CRC, \
    Manifest, write_manifest, read_manifest, ManifestError, bucket_by_duration
from fmkit.models import ManifestEntry, Label


class FeaturesTestCase(unittest.TestCase):
    def setUp(self):
        self.dir = pathlib.Path(tempfile.mkdtemp())
        self.rng = np.random.default_rng(42)

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_round_trip(self):
        features = self.rng.standard_normal((7, 5))
        loc = self.dir / 'a.fmfe'
        write_feature_file(loc, features)
        record = read_feature_file(loc)
        self.assertTrue(np.array_equal(record.features.numpy(), features), 'round trip is bit exact')
        self.assertEqual(record.id, 'a', 'id defaults to the file stem')
        self.assertEqual(os.path.getsize(loc), FEATURE_HEADER.size + 7 * 5 * 8 + FEATURE_CRC.size,
                         'payload is exactly T*C*8 bytes')

    def test_round_trip_shapes(self):
        for _ in range(25):
            t = int(self.rng.integers(1, 513))
            c = int(self.rng.integers(1, 65))
            features = self.rng.standard_normal((t, c)) * 10
            decoded = decode_features(encode_features(features))
            self.assertTrue(np.array_equal(decoded, features), f'{t}x{c} round trip is bit exact')

    def test_errors(self):
        data = encode_features(self.rng.standard_normal((4, 3)))
        with self.assertRaises(TruncatedFileError, msg='missing payload bytes'):
            decode_features(data[:-10])
        with self.assertRaises(TruncatedFileError, msg='missing header bytes'):
            decode_features(data[:8])
        with self.assertRaises(BadMagicError, msg='wrong magic'):
            decode_features(b'NOPE' + data[4:])
        with self.assertRaises(HeaderMismatchError, msg='extra payload bytes'):
            decode_features(data + b'\x00' * 8)
        corrupted = bytearray(data)
        corrupted[FEATURE_HEADER.size + 3] ^= 0x01
        with self.assertRaises(ChecksumError, msg='flipped payload bit'):
            decode_features(bytes(corrupted))

    def test_rejects_non_finite(self):
        features = np.ones((2, 2))
        features[1, 1] = np.nan
        with self.assertRaises(ValueError, msg='features must be finite'):
            encode_features(features)

    def test_manifest_round_trip(self):
        write_feature_file(self.dir / 'f' / 'x.fmfe', self.rng.standard_normal((150, 4)))
        manifest = Manifest([ManifestEntry('x', 'f/x.fmfe', Label.FAKE, 150, 4)], 50, self.dir)
        write_manifest(self.dir / 'm.tsv', manifest)
        loaded = read_manifest(self.dir / 'm.tsv')
        loaded.validate()
        self.assertEqual(loaded.frame_rate, 50, 'frame rate from header')
        self.assertEqual(loaded.entries[0].label, Label.FAKE, 'label parsed')
        record = loaded.load(loaded.entries[0])
        self.assertEqual(record.duration_s, 3., 'duration from T and frame rate')

    def test_manifest_header_mismatch(self):
        write_feature_file(self.dir / 'x.fmfe', self.rng.standard_normal((10, 4)))
        manifest = Manifest([ManifestEntry('x', 'x.fmfe', Label.REAL, 11, 4)], 50, self.dir)
        with self.assertRaises(HeaderMismatchError, msg='manifest T must match the file'):
            manifest.validate()

    def test_manifest_missing_label(self):
        loc = self.dir / 'bad.tsv'
        with open(loc, 'w') as fp:
            fp.write('#fmfe-manifest v1 frame_rate=50\nx\tx.fmfe\t10\t4\n')
        with self.assertRaises(ManifestError, msg='label column is required'):
            read_manifest(loc)
        with open(loc, 'w') as fp:
            fp.write('#fmfe-manifest v1 frame_rate=50\nx\tx.fmfe\t\t10\t4\n')
        with self.assertRaises(ManifestError, msg='empty label is rejected'):
            read_manifest(loc)

    def test_buckets(self):
        frames = [100, 149, 150, 199, 200, 250, 300, 301, 400]
        entries = [ManifestEntry(f'u{i}', f'u{i}.fmfe', Label.REAL, t, 2) for i, t in enumerate(frames)]
        buckets = bucket_by_duration(Manifest(entries, 50))
        self.assertEqual(list(buckets.keys()), ['<3s', '3-4s', '4-5s', '5-6s', '>6s'], 'default bucket names')
        self.assertEqual([e.frames for e in buckets['3-4s']], [150, 199], 'exactly 3.0 s opens the 3-4 s bucket')
        self.assertEqual(sum(len(v) for v in buckets.values()), len(entries), 'bucket sizes sum to the total')

        empty = bucket_by_duration(Manifest([], 50))
        self.assertTrue(all(len(v) == 0 for v in empty.values()), 'empty manifest gives empty buckets')
