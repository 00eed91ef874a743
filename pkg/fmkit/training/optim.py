import math
from typing import List, Tuple, Optional

import torch
from torch.optim import Optimizer

from fmkit.tensor.ops import ShapeError

BETAS = (0.9, 0.999)
EPS = 1e-8


class AdamState:
    def __init__(self, params: List[torch.Tensor]):
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]


def adam_step(params: List[torch.Tensor], grads: List[Optional[torch.Tensor]], state: AdamState, t: int,
              lr: float, betas: Tuple[float, float] = BETAS, eps: float = EPS,
              weight_decay: float = 0.) -> List[torch.Tensor]:
    """
    One bias-corrected Adam step with decoupled weight decay, elementwise per tensor.
    ``state`` is updated in place, the parameters are returned as new tensors.
    """
    if t < 1:
        raise ValueError(f'step count starts at 1, got {t}')
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f'{len(params)} parameters, {len(grads)} gradients, {len(state.m)} state slots')

    beta1, beta2 = betas
    bias1 = 1 - beta1 ** t
    bias2 = 1 - beta2 ** t

    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f'gradient {i} has shape {tuple(g.shape)}, its parameter {tuple(p.shape)}')

        p = p * (1 - lr * weight_decay)
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        denom = state.v[i].sqrt() / math.sqrt(bias2) + eps
        updated.append(p - (lr / bias1) * state.m[i] / denom)
    return updated


class DecoupledAdam(Optimizer):
    """torch optimizer front for ``adam_step``."""

    def __init__(self, params, lr: float, betas: Tuple[float, float] = BETAS, eps: float = EPS,
                 weight_decay: float = 0.):
        if lr < 0:
            raise ValueError(f'learning rate must be non-negative, got {lr}')
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))
        self.t = 0
        self.moments: List[AdamState] = [AdamState([p.detach() for p in g['params']]) for g in self.param_groups]

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        self.t += 1
        for group, moments in zip(self.param_groups, self.moments):
            params = group['params']
            updated = adam_step([p.detach() for p in params], [p.grad for p in params], moments, self.t,
                                group['lr'], group['betas'], group['eps'], group['weight_decay'])
            for p, value in zip(params, updated):
                p.copy_(value)
        return loss
