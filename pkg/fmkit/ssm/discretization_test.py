import math
import unittest

import torch

from fmkit.definitions import DTYPE
from fmkit.ssm.discretization import LTIParams, discretize_zoh, DiscretizationError


def scalar(v: float) -> torch.Tensor:
    return torch.tensor([v], dtype=DTYPE)


class DiscretizationTestCase(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(99)

    def test_zero_eigenvalue_limit(self):
        A_d, B_d = discretize_zoh(LTIParams(scalar(0.), scalar(1.), scalar(1.), 0.1))
        self.assertEqual(A_d.item(), 1., 'exp(0) is 1')
        self.assertAlmostEqual(B_d.item(), 0.1, delta=1e-15, msg='series limit gives delta * b')

    def test_scalar_closed_form(self):
        A_d, B_d = discretize_zoh(LTIParams(scalar(-1.), scalar(1.), scalar(1.), 0.1))
        self.assertAlmostEqual(A_d.item(), math.exp(-0.1), delta=1e-12, msg='A_d = e^-0.1')
        self.assertAlmostEqual(B_d.item(), 1 - math.exp(-0.1), delta=1e-12, msg='B_d = 1 - e^-0.1')

    def test_diagonal_matches_scalars(self):
        a = -torch.rand(6, dtype=DTYPE) * 3
        a[2] = 0.
        b = torch.randn(6, dtype=DTYPE)
        A_d, B_d = discretize_zoh(LTIParams(a, b, torch.ones(6, dtype=DTYPE), 0.05))
        for i in range(6):
            sa, sb = discretize_zoh(LTIParams(a[i:i + 1], b[i:i + 1], scalar(1.), 0.05))
            self.assertAlmostEqual(A_d[i].item(), sa.item(), delta=1e-15, msg=f'entry {i} A_d')
            self.assertAlmostEqual(B_d[i].item(), sb.item(), delta=1e-15, msg=f'entry {i} B_d')

    def test_full_matrix_agrees_with_diagonal(self):
        a = -torch.rand(4, dtype=DTYPE) - 0.1
        b = torch.randn(4, dtype=DTYPE)
        c = torch.randn(4, dtype=DTYPE)
        diag_A, diag_B = discretize_zoh(LTIParams(a, b, c, 0.2))
        for method in ('inverse', 'block'):
            A_d, B_d = discretize_zoh(LTIParams(torch.diag(a), b, c, 0.2), method)
            self.assertTrue(torch.allclose(torch.diagonal(A_d), diag_A, atol=1e-12), f'{method} A_d diagonal')
            self.assertTrue(torch.allclose(B_d, diag_B, atol=1e-12), f'{method} B_d')

    def test_inverse_and_block_agree_on_dense(self):
        m = torch.randn(5, 5, dtype=DTYPE)
        A = -(m @ m.T) / 5 - 0.5 * torch.eye(5, dtype=DTYPE)
        p = LTIParams(A, torch.randn(5, dtype=DTYPE), torch.randn(5, dtype=DTYPE), 0.3)
        A1, B1 = discretize_zoh(p, 'inverse')
        A2, B2 = discretize_zoh(p, 'block')
        self.assertTrue(torch.allclose(A1, A2, atol=1e-10), 'both methods share exp(ΔA)')
        self.assertTrue(torch.allclose(B1, B2, atol=1e-10), 'both methods give the same B_d')

    def test_singular_matrix(self):
        A = torch.tensor([[0., 1.], [0., 0.]], dtype=DTYPE)
        p = LTIParams(A, torch.ones(2, dtype=DTYPE), torch.ones(2, dtype=DTYPE), 0.1)
        with self.assertRaises(DiscretizationError, msg='the inverse formula needs an invertible A'):
            discretize_zoh(p, 'inverse')
        A_d, B_d = discretize_zoh(p, 'block')
        # nilpotent A: exp(ΔA) = I + ΔA, B_d = Δ(I + ΔA/2)B
        self.assertTrue(torch.allclose(A_d, torch.tensor([[1., 0.1], [0., 1.]], dtype=DTYPE), atol=1e-13),
                        'block method handles singular A')
        self.assertTrue(torch.allclose(B_d, torch.tensor([0.105, 0.1], dtype=DTYPE), atol=1e-13),
                        'block method integrates the held input')

    def test_invalid_delta(self):
        with self.assertRaises(DiscretizationError, msg='delta must be positive'):
            LTIParams(scalar(-1.), scalar(1.), scalar(1.), 0.)
