import unittest
from unittest import mock

from fmkit.encoders.config import BIMAMBA_VARIANTS, Variant
from fmkit.pipeline.model import DetectorModel
from fmkit.tensor.ops import SiLUFunction
from fmkit.training.gradcheck import gradcheck, tiny_config


def broken_silu_backward(ctx, grad):
    x, s = ctx.saved_tensors
    return grad * s


class GradcheckTestCase(unittest.TestCase):
    def test_bimamba_variants_pass(self):
        for variant in BIMAMBA_VARIANTS:
            report = gradcheck(tiny_config(variant), tolerance=1e-4)
            self.assertTrue(report.passed, f'{variant.value}: {report.failures}')
            self.assertGreaterEqual(len(report.checks), 50, 'at least fifty coordinates')

    def test_baselines_pass(self):
        for variant in (Variant.TRANSFORMER, Variant.CONFORMER):
            report = gradcheck(tiny_config(variant), tolerance=1e-4)
            self.assertTrue(report.passed, f'{variant.value}: {report.failures}')

    def test_every_tensor_sampled(self):
        cfg = tiny_config()
        report = gradcheck(cfg, n_coords=10)
        names = set(n for n, _ in DetectorModel(cfg).named_parameters())
        self.assertEqual(set(c.name for c in report.checks), names, 'each parameter tensor gets a coordinate')

    def test_corrupted_backward_is_caught(self):
        with mock.patch.object(SiLUFunction, 'backward', staticmethod(broken_silu_backward)):
            report = gradcheck(tiny_config(), tolerance=1e-4)
        self.assertFalse(report.passed, 'a wrong SiLU derivative must be detected')
        self.assertGreater(len(report.failed_parameters), 0, 'offending parameters are named')

    def test_zero_tolerance_fails(self):
        self.assertFalse(gradcheck(tiny_config(), tolerance=0.).passed, 'float noise exceeds a zero tolerance')
