import math
from typing import Optional

import torch
import torch.nn.functional as F
from einops import einsum
from torch import nn

from fmkit.definitions import DTYPE
from fmkit.ssm.discretization import DiscreteParams
from fmkit.tensor import ops

DELTA_MIN = 1e-3
DELTA_MAX = 1e-1


class ScanError(Exception):
    def __init__(self, message: str, timestep: int):
        super().__init__(f'{message} (timestep {timestep})')
        self.timestep = timestep


def scan_recurrent(p_d: DiscreteParams, x: torch.Tensor) -> torch.Tensor:
    """Sequential recurrence g_t = A_d g_{t-1} + B_d x_t, y_t = C g_t from g_0 = 0."""
    if x.dim() != 1 or x.shape[0] == 0:
        raise ScanError(f'expected a non-empty 1-D input, got shape {tuple(x.shape)}', 0)
    g = torch.zeros(p_d.state_size, dtype=x.dtype)
    ys = []
    for t in range(x.shape[0]):
        g = p_d.evolve(g) + p_d.B_d * x[t]
        ys.append((p_d.C * g).sum())
    return torch.stack(ys)


def ssm_kernel(p_d: DiscreteParams, length: int) -> torch.Tensor:
    """K_d = (C B_d, C A_d B_d, ..., C A_d^{length-1} B_d)."""
    taps = []
    v = p_d.B_d
    for _ in range(length):
        taps.append((p_d.C * v).sum())
        v = p_d.evolve(v)
    return torch.stack(taps)


def kernel_convolution(p_d: DiscreteParams, x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 1:
        raise ops.ShapeError(f'expected a 1-D input, got shape {tuple(x.shape)}')
    m = x.shape[0]
    kernel = ssm_kernel(p_d, m)
    # conv1d is a cross-correlation, so the kernel is reversed and the input left padded
    padded = F.pad(x.view(1, 1, m), (m - 1, 0))
    return F.conv1d(padded, kernel.flip(0).view(1, 1, m)).view(m)


class SelectiveParams:
    """
    Input-selective parameters of one scan. A = -exp(A_log) is diagonal per channel;
    Δ_t, B_t and C_t are projections of the scan input.
    """

    def __init__(self, A_log: torch.Tensor, W_delta: torch.Tensor, b_delta: torch.Tensor,
                 W_B: torch.Tensor, b_B: torch.Tensor, W_C: torch.Tensor, b_C: torch.Tensor,
                 D: Optional[torch.Tensor] = None):
        self.A_log = A_log
        self.W_delta = W_delta
        self.b_delta = b_delta
        self.W_B = W_B
        self.b_B = b_B
        self.W_C = W_C
        self.b_C = b_C
        self.D = D

    @property
    def channels(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.A_log.shape[1]

    def A(self) -> torch.Tensor:
        return -ops.exp(self.A_log)

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return ops.softplus(ops.linear(x, self.W_delta, self.b_delta))


def _first_bad_timestep(states: torch.Tensor) -> int:
    bad = ~torch.isfinite(states).flatten(2).all(dim=-1)
    return int(bad.any(dim=0).nonzero()[0].item())


def selective_scan(sp: SelectiveParams, x: torch.Tensor) -> torch.Tensor:
    """
    Time-varying scan over x of shape (T, E) or (batch, T, E).

    A_d,t = exp(Δ_t A) per channel and state, B_d,t = Δ_t B_t (Euler form),
    y_t = C_t g_t, plus D ⊙ x_t when a skip vector is present.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[-1] != sp.channels:
        raise ops.ShapeError(f'scan input has {x.shape[-1]} channels, parameters expect {sp.channels}')
    batch, length, channels = x.shape
    if length == 0:
        raise ScanError('empty input sequence', 0)

    delta = sp.delta(x)
    B = ops.linear(x, sp.W_B, sp.b_B)
    C = ops.linear(x, sp.W_C, sp.b_C)

    dA = ops.exp(einsum(delta, sp.A(), 'b l d, d n -> b l d n'))
    dBx = einsum(delta, B, x, 'b l d, b l n, b l d -> b l d n')

    g = x.new_zeros(batch, channels, sp.state_size)
    states = []
    for t in range(length):
        g = dA[:, t] * g + dBx[:, t]
        states.append(g)
    states = torch.stack(states, dim=1)
    if not torch.isfinite(states).all():
        raise ScanError('non-finite scan state', _first_bad_timestep(states))

    y = einsum(states, C, 'b l d n, b l n -> b l d')
    if sp.D is not None:
        y = y + x * sp.D

    return y.squeeze(0) if squeeze else y


def inverse_softplus(x: torch.Tensor) -> torch.Tensor:
    return x + torch.log(-torch.expm1(-x))


class SelectiveSSM(nn.Module):
    def __init__(self, channels: int, state_size: int = 16, skip: bool = True):
        super().__init__()
        self.channels = channels
        self.state_size = state_size

        # S4D-real style initialization, A = -(1..N) per channel
        a = torch.arange(1, state_size + 1, dtype=DTYPE).repeat(channels, 1)
        self.A_log = nn.Parameter(torch.log(a))

        bound = 1. / math.sqrt(channels)
        self.W_delta = nn.Parameter(torch.empty(channels, channels, dtype=DTYPE).uniform_(-bound, bound) * 0.1)
        dt = torch.exp(
            torch.rand(channels, dtype=DTYPE) * (math.log(DELTA_MAX) - math.log(DELTA_MIN)) + math.log(DELTA_MIN)
        )
        self.b_delta = nn.Parameter(inverse_softplus(dt))

        self.W_B = nn.Parameter(torch.empty(channels, state_size, dtype=DTYPE).uniform_(-bound, bound))
        self.b_B = nn.Parameter(torch.zeros(state_size, dtype=DTYPE))
        self.W_C = nn.Parameter(torch.empty(channels, state_size, dtype=DTYPE).uniform_(-bound, bound))
        self.b_C = nn.Parameter(torch.zeros(state_size, dtype=DTYPE))
        self.D = nn.Parameter(torch.ones(channels, dtype=DTYPE)) if skip else None

    def params(self) -> SelectiveParams:
        return SelectiveParams(self.A_log, self.W_delta, self.b_delta,
                               self.W_B, self.b_B, self.W_C, self.b_C, self.D)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return selective_scan(self.params(), x)
