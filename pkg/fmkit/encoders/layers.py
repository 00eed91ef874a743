import math
from typing import Optional

import torch
from torch import nn

from fmkit.definitions import DTYPE, LAYER_NORM_EPS
from fmkit.tensor import ops


class NonFiniteError(Exception):
    def __init__(self, stage: str):
        super().__init__(f'non-finite values after {stage}')
        self.stage = stage


def check_finite(x: torch.Tensor, stage: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(stage)
    return x


class Linear(nn.Module):
    """x W + b with W stored as (in, out)."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        bound = 1. / math.sqrt(in_features)
        self.weight = nn.Parameter(torch.empty(in_features, out_features, dtype=DTYPE).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(out_features, dtype=DTYPE).uniform_(-bound, bound)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ops.linear(x, self.weight, self.bias)

    def zero_(self) -> 'Linear':
        with torch.no_grad():
            self.weight.zero_()
            if self.bias is not None:
                self.bias.zero_()
        return self


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = LAYER_NORM_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, mult: int = 4, dropout: float = 0.):
        super().__init__()
        self.up = Linear(d_model, mult * d_model)
        self.down = Linear(mult * d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.down(self.dropout(ops.silu(self.up(h))))


def valid_mask(lengths: Optional[torch.Tensor], batch: int, length: int) -> Optional[torch.Tensor]:
    """(batch, length) boolean mask of real frames, or None when nothing is padded."""
    if lengths is None:
        return None
    steps = torch.arange(length, device=lengths.device)
    return steps.unsqueeze(0) < lengths.unsqueeze(1)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
