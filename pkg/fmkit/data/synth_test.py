import pathlib
import shutil
import tempfile
import unittest

import numpy as np

from fmkit.data.features import read_manifest
from fmkit.data.synth import synth_dataset, generate_real, ProcessSpec, ArtifactSpec, ar2_stationary_variance, \
    channel_noise_std, inject_artifact
from fmkit.models import Label
from fmkit.utils.runtime import file_checksum


class SynthTestCase(unittest.TestCase):
    def setUp(self):
        self.dir = pathlib.Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_reproducible_bytes(self):
        a = synth_dataset(self.dir / 'a', 6, 6, (20, 40), channels=4, seed=7, progress=False)
        b = synth_dataset(self.dir / 'b', 6, 6, (20, 40), channels=4, seed=7, progress=False)
        self.assertEqual(file_checksum(self.dir / 'a' / 'data.tsv'), file_checksum(self.dir / 'b' / 'data.tsv'),
                         'manifests match')
        for ea, eb in zip(a.entries, b.entries):
            self.assertEqual(file_checksum(a.resolve(ea)), file_checksum(b.resolve(eb)), f'{ea.id} bytes match')

    def test_balanced_labels(self):
        manifest = synth_dataset(self.dir, 5, 3, (20, 40), channels=4, seed=1, progress=False)
        counts = manifest.label_counts()
        self.assertEqual(counts[Label.REAL], 5, 'real count as requested')
        self.assertEqual(counts[Label.FAKE], 3, 'fake count as requested')
        with open(self.dir / 'data.tsv') as fp:
            self.assertEqual(len(fp.read().splitlines()), 9, 'one header plus one line per utterance')
        read_manifest(self.dir / 'data.tsv').validate()

    def test_degenerate_arguments(self):
        with self.assertRaises(ValueError, msg='zero counts are rejected'):
            synth_dataset(self.dir, 0, 5, progress=False)
        with self.assertRaises(ValueError, msg='inverted frame range is rejected'):
            synth_dataset(self.dir, 5, 5, (40, 20), progress=False)

    def test_paired_difference_is_local(self):
        manifest = synth_dataset(self.dir, 4, 4, (50, 80), channels=20, seed=3, paired=True, progress=False)
        real = [manifest.load(e) for e in manifest.entries if e.label == Label.REAL]
        fake = [manifest.load(e) for e in manifest.entries if e.label == Label.FAKE]
        for r, f in zip(real, fake):
            self.assertEqual(r.frames, f.frames, 'paired utterances share their length')
            diff = (f.features - r.features).abs().numpy() > 0
            rows = np.nonzero(diff.any(axis=1))[0]
            cols = np.nonzero(diff.any(axis=0))[0]
            self.assertLessEqual(rows.max() - rows.min() + 1, int(np.ceil(0.1 * r.frames)), 'within the window')
            self.assertLessEqual(len(cols), 2, 'within the chosen channels')

    def test_zero_amplitude(self):
        manifest = synth_dataset(self.dir, 3, 3, (30, 30), channels=5, seed=9, paired=True,
                                 artifact=ArtifactSpec(amplitude=0.), progress=False)
        real = [manifest.load(e).features for e in manifest.entries if e.label == Label.REAL]
        fake = [manifest.load(e).features for e in manifest.entries if e.label == Label.FAKE]
        for r, f in zip(real, fake):
            self.assertTrue(np.array_equal(r.numpy(), f.numpy()), 'without an artifact the classes coincide')

    def test_artifact_shape(self):
        rng = np.random.default_rng(0)
        features = np.zeros((95, 32))
        out, (start, stop), channels = inject_artifact(features, np.ones(32), rng, ArtifactSpec())
        self.assertEqual(stop - start, 10, 'window is ceil(0.1 T) frames')
        self.assertEqual(len(channels), 4, 'ceil(0.1 C) channels')
        self.assertLessEqual(np.abs(out).max(), 0.3 + 1e-12, 'amplitude is 0.3 process std')

    def test_stationary_variance(self):
        process = ProcessSpec()
        a1, a2 = process.coefficients
        rng = np.random.default_rng(11)
        channels = 8
        observed = np.zeros(channels)
        expected = np.zeros(channels)
        for _ in range(1000):
            features, std = generate_real(300, channels, rng, process)
            observed += (features ** 2).mean(axis=0)
            expected += std ** 2
        ratio = observed / expected
        self.assertTrue(bool(np.all(np.abs(ratio - 1) < 0.2)),
                        f'per-channel variance within 20% of the closed form, got ratios {ratio}')

    def test_variance_formula(self):
        self.assertAlmostEqual(ar2_stationary_variance(0.5, 0.), 1 / 0.75, delta=1e-12, msg='AR(1) special case')
        a1, a2 = ProcessSpec().coefficients
        # Yule-Walker: r1 = a1 / (1 - a2), var = 1 / (1 - a1 r1 - a2 r2) with r2 = a1 r1 + a2
        r1 = a1 / (1 - a2)
        r2 = a1 * r1 + a2
        self.assertAlmostEqual(ar2_stationary_variance(a1, a2), 1 / (1 - a1 * r1 - a2 * r2), delta=1e-9,
                               msg='closed form agrees with the Yule-Walker solution')
        self.assertTrue(np.allclose(channel_noise_std(3, 0.), np.ones(3)), 'no tilt leaves unit noise')
