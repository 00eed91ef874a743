import math
from typing import Optional

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from fmkit.definitions import DTYPE
from fmkit.encoders.layers import Linear, LayerNorm, check_finite
from fmkit.ssm.scan import SelectiveSSM
from fmkit.tensor import ops


def causal_conv1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Depthwise convolution over time of x (batch, T, E); frame t only sees frames <= t."""
    width = weight.shape[-1]
    xt = F.pad(rearrange(x, 'b l e -> b e l'), (width - 1, 0))
    out = F.conv1d(xt, weight, bias, groups=weight.shape[0])
    return rearrange(out, 'b e l -> b l e')


class MambaUnit(nn.Module):
    def __init__(self, d_model: int, expand: int = 2, d_state: int = 16, d_conv: int = 4, skip: bool = True):
        super().__init__()
        if expand < 1:
            raise ValueError(f'expand factor must be at least 1, got {expand}')
        self.d_model = d_model
        self.d_inner = int(expand * d_model)

        self.in_proj_x = Linear(d_model, self.d_inner, bias=False)
        self.in_proj_z = Linear(d_model, self.d_inner, bias=False)
        bound = 1. / math.sqrt(d_conv)
        self.conv_weight = nn.Parameter(torch.empty(self.d_inner, 1, d_conv, dtype=DTYPE).uniform_(-bound, bound))
        self.conv_bias = nn.Parameter(torch.empty(self.d_inner, dtype=DTYPE).uniform_(-bound, bound))
        self.ssm = SelectiveSSM(self.d_inner, d_state, skip)
        self.out_proj = Linear(self.d_inner, d_model, bias=False)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        squeeze = h.dim() == 2
        if squeeze:
            h = h.unsqueeze(0)
        check_finite(h, 'mamba input')

        x = self.in_proj_x(h)
        z = self.in_proj_z(h)
        x = check_finite(ops.silu(causal_conv1d(x, self.conv_weight, self.conv_bias)), 'conv1d')
        y = check_finite(self.ssm(x), 'selective scan')
        y = ops.mul(y, ops.silu(z))
        out = check_finite(self.out_proj(y), 'out_proj')

        return out.squeeze(0) if squeeze else out


def flip(h: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Reverses the time axis (second to last). With lengths, each sequence is
    reversed within its own length so padding stays at the end.
    """
    if lengths is None:
        return torch.flip(h, dims=[-2])
    length = h.shape[-2]
    steps = torch.arange(length, device=h.device).unsqueeze(0)
    idx = lengths.unsqueeze(1) - 1 - steps
    idx = torch.where(idx >= 0, idx, steps.expand_as(idx))
    return torch.gather(h, 1, idx.unsqueeze(-1).expand(-1, -1, h.shape[-1]))


class BiMambaUnit(nn.Module):
    def __init__(self, d_model: int, expand: int = 2, d_state: int = 16, d_conv: int = 4, skip: bool = True,
                 bidirectional: bool = True, backward_norm: bool = True, tie_weights: bool = False):
        super().__init__()
        self.forward_unit = MambaUnit(d_model, expand, d_state, d_conv, skip)
        self.tie_weights = tie_weights and bidirectional
        if not bidirectional:
            self.backward_unit = None
        elif tie_weights:
            self.backward_unit = self.forward_unit
        else:
            self.backward_unit = MambaUnit(d_model, expand, d_state, d_conv, skip)
        self.backward_norm = LayerNorm(d_model) if bidirectional and backward_norm else None

    @property
    def bidirectional(self) -> bool:
        return self.backward_unit is not None

    def forward(self, h: torch.Tensor, pre_normed_h: torch.Tensor,
                lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        out = self.forward_unit(pre_normed_h)
        if self.backward_unit is None:
            return out
        backward_in = flip(h, lengths)
        if self.backward_norm is not None:
            backward_in = self.backward_norm(backward_in)
        return out + flip(self.backward_unit(backward_in), lengths)
