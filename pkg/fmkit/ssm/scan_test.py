import math
import unittest

import torch

from fmkit.definitions import DTYPE
from fmkit.ssm.discretization import LTIParams, DiscreteParams, discretize
from fmkit.ssm.scan import scan_recurrent, kernel_convolution, ssm_kernel, selective_scan, SelectiveParams, \
    SelectiveSSM, ScanError, inverse_softplus


def random_lti(gen: torch.Generator) -> DiscreteParams:
    n = int(torch.randint(1, 9, (1,), generator=gen).item())
    delta = float(torch.empty(1, dtype=DTYPE).uniform_(0.01, 0.5, generator=gen).item())
    b = torch.randn(n, dtype=DTYPE, generator=gen)
    c = torch.randn(n, dtype=DTYPE, generator=gen)
    if torch.rand(1, generator=gen).item() < 0.5:
        a = -torch.rand(n, dtype=DTYPE, generator=gen) * 4
    else:
        m = torch.randn(n, n, dtype=DTYPE, generator=gen)
        a = -(m @ m.T) / n - 0.1 * torch.eye(n, dtype=DTYPE)
    return discretize(LTIParams(a, b, c, delta))


def random_selective(channels: int, state: int, gen: torch.Generator, skip: bool = True) -> SelectiveParams:
    return SelectiveParams(
        A_log=torch.randn(channels, state, dtype=DTYPE, generator=gen) * 0.5,
        W_delta=torch.randn(channels, channels, dtype=DTYPE, generator=gen) * 0.5,
        b_delta=torch.randn(channels, dtype=DTYPE, generator=gen),
        W_B=torch.randn(channels, state, dtype=DTYPE, generator=gen),
        b_B=torch.randn(state, dtype=DTYPE, generator=gen),
        W_C=torch.randn(channels, state, dtype=DTYPE, generator=gen),
        b_C=torch.randn(state, dtype=DTYPE, generator=gen),
        D=torch.randn(channels, dtype=DTYPE, generator=gen) if skip else None,
    )


def softplus(v: float) -> float:
    return math.log1p(math.exp(v))


class ScanTestCase(unittest.TestCase):
    def setUp(self):
        self.gen = torch.Generator().manual_seed(2024)

    def test_zero_input(self):
        p = random_lti(self.gen)
        y = scan_recurrent(p, torch.zeros(10, dtype=DTYPE))
        self.assertTrue(torch.equal(y, torch.zeros(10, dtype=DTYPE)), 'zero input gives zero output')

    def test_running_sum(self):
        one = torch.ones(1, dtype=DTYPE)
        y = scan_recurrent(DiscreteParams(one, one, one), torch.ones(3, dtype=DTYPE))
        self.assertEqual(y.tolist(), [1., 2., 3.], 'unit recurrence accumulates')

    def test_empty_input(self):
        one = torch.ones(1, dtype=DTYPE)
        with self.assertRaises(ScanError, msg='length 0 input is rejected'):
            scan_recurrent(DiscreteParams(one, one, one), torch.zeros(0, dtype=DTYPE))

    def test_kernel_powers(self):
        p = DiscreteParams(torch.tensor([0.5], dtype=DTYPE), torch.ones(1, dtype=DTYPE), torch.ones(1, dtype=DTYPE))
        self.assertEqual(ssm_kernel(p, 3).tolist(), [1., 0.5, 0.25], 'kernel taps are C A^k B')
        impulse = torch.zeros(3, dtype=DTYPE)
        impulse[0] = 1.
        self.assertEqual(kernel_convolution(p, impulse).tolist(), [1., 0.5, 0.25], 'impulse response is the kernel')

    def test_recurrence_matches_convolution(self):
        for i in range(100):
            p = random_lti(self.gen)
            t = int(torch.randint(1, 65, (1,), generator=self.gen).item())
            x = torch.randn(t, dtype=DTYPE, generator=self.gen)
            diff = (scan_recurrent(p, x) - kernel_convolution(p, x)).abs().max().item()
            self.assertLess(diff, 1e-9, f'instance {i}: recurrence and convolution disagree')

    def test_stability(self):
        a = -torch.rand(8, dtype=DTYPE, generator=self.gen) - 0.01
        p = discretize(LTIParams(a, torch.ones(8, dtype=DTYPE), torch.ones(8, dtype=DTYPE), 0.1))
        x = torch.rand(10000, dtype=DTYPE, generator=self.gen) * 2 - 1
        y = scan_recurrent(p, x)
        # |g| <= |B_d| / (1 - A_d) per entry for |x| <= 1
        bound = (p.B_d.abs() / (1 - p.A_d)).sum().item()
        self.assertLessEqual(y.abs().max().item(), bound + 1e-9, 'output stays within the geometric bound')

    def test_causality_and_linearity(self):
        p = random_lti(self.gen)
        x1 = torch.randn(32, dtype=DTYPE, generator=self.gen)
        x2 = torch.randn(32, dtype=DTYPE, generator=self.gen)
        base = scan_recurrent(p, x1)
        perturbed = x1.clone()
        perturbed[20] += 5.
        self.assertTrue(torch.equal(scan_recurrent(p, perturbed)[:20], base[:20]), 'future input cannot reach the past')

        combined = scan_recurrent(p, 2.5 * x1 - 0.7 * x2)
        expected = 2.5 * base - 0.7 * scan_recurrent(p, x2)
        self.assertLess((combined - expected).abs().max().item(), 1e-9, 'LTI scan is linear')

    def test_selective_reduces_to_lti(self):
        for i in range(50):
            channels = int(torch.randint(1, 5, (1,), generator=self.gen).item())
            state = int(torch.randint(1, 9, (1,), generator=self.gen).item())
            t = int(torch.randint(1, 33, (1,), generator=self.gen).item())
            deltas = torch.empty(channels, dtype=DTYPE).uniform_(0.01, 0.5, generator=self.gen)
            b = torch.randn(state, dtype=DTYPE, generator=self.gen)
            c = torch.randn(state, dtype=DTYPE, generator=self.gen)
            a_log = torch.randn(channels, state, dtype=DTYPE, generator=self.gen) * 0.5
            sp = SelectiveParams(a_log, torch.zeros(channels, channels, dtype=DTYPE), inverse_softplus(deltas),
                                 torch.zeros(channels, state, dtype=DTYPE), b,
                                 torch.zeros(channels, state, dtype=DTYPE), c)
            x = torch.randn(t, channels, dtype=DTYPE, generator=self.gen)
            y = selective_scan(sp, x)
            for e in range(channels):
                delta = deltas[e].item()
                # same Euler input term on both sides
                p = DiscreteParams(torch.exp(-delta * torch.exp(a_log[e])), delta * b, c)
                diff = (y[:, e] - scan_recurrent(p, x[:, e])).abs().max().item()
                self.assertLess(diff, 1e-9, f'instance {i} channel {e}: constant parameters reduce to LTI')

    def test_selective_zero_input(self):
        sp = random_selective(3, 4, self.gen)
        y = selective_scan(sp, torch.zeros(12, 3, dtype=DTYPE))
        self.assertTrue(torch.equal(y, torch.zeros(12, 3, dtype=DTYPE)), 'zero input leaves no state')

    def test_selective_naive_oracle(self):
        channels, state, length = 2, 2, 8
        sp = random_selective(channels, state, self.gen)
        x = torch.randn(length, channels, dtype=DTYPE, generator=self.gen)
        y = selective_scan(sp, x)

        xs = x.tolist()
        g = [[0. for _ in range(state)] for _ in range(channels)]
        for t in range(length):
            delta = [softplus(sum(xs[t][k] * sp.W_delta[k, d].item() for k in range(channels)) + sp.b_delta[d].item())
                     for d in range(channels)]
            b = [sum(xs[t][k] * sp.W_B[k, n].item() for k in range(channels)) + sp.b_B[n].item() for n in range(state)]
            c = [sum(xs[t][k] * sp.W_C[k, n].item() for k in range(channels)) + sp.b_C[n].item() for n in range(state)]
            for d in range(channels):
                out = 0.
                for n in range(state):
                    a = -math.exp(sp.A_log[d, n].item())
                    g[d][n] = math.exp(delta[d] * a) * g[d][n] + delta[d] * b[n] * xs[t][d]
                    out += c[n] * g[d][n]
                out += sp.D[d].item() * xs[t][d]
                self.assertAlmostEqual(y[t, d].item(), out, delta=1e-12, msg=f'step {t} channel {d}')

    def test_selective_batched(self):
        sp = random_selective(3, 4, self.gen)
        x = torch.randn(2, 9, 3, dtype=DTYPE, generator=self.gen)
        batched = selective_scan(sp, x)
        for i in range(2):
            self.assertTrue(torch.allclose(batched[i], selective_scan(sp, x[i]), atol=1e-14),
                            'batch items scan independently')

    def test_selectivity(self):
        sp = random_selective(3, 4, self.gen)
        x = torch.randn(10, 3, dtype=DTYPE, generator=self.gen)
        changed = x.clone()
        changed[4] += 1.
        a = sp.A()
        dA = torch.exp(sp.delta(x)[4].unsqueeze(-1) * a)
        dA_changed = torch.exp(sp.delta(changed)[4].unsqueeze(-1) * a)
        self.assertFalse(torch.allclose(dA, dA_changed), 'the effective A_d depends on the input')
        self.assertTrue(torch.equal(sp.delta(x)[:4], sp.delta(changed)[:4]), 'other steps keep their Δ')

    def test_non_finite_state(self):
        sp = random_selective(2, 2, self.gen, skip=False)
        x = torch.randn(6, 2, dtype=DTYPE, generator=self.gen)
        x[3, 0] = float('inf')
        with self.assertRaises(ScanError, msg='overflowing state is reported') as ctx:
            selective_scan(sp, x)
        self.assertEqual(ctx.exception.timestep, 3, 'the first bad timestep is named')

    def test_module_delta_range(self):
        torch.manual_seed(5)
        ssm = SelectiveSSM(64, 16)
        dt = torch.nn.functional.softplus(ssm.b_delta)
        self.assertTrue(bool((dt >= 1e-3 - 1e-12).all() and (dt <= 1e-1 + 1e-12).all()),
                        'initial Δ lies in [0.001, 0.1]')
        self.assertTrue(bool((ssm.params().A() < 0).all()), 'A is strictly negative')
