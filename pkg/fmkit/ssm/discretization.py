from typing import Tuple

import torch

DISCRETIZATION_METHODS = ('inverse', 'block')

# below this |ΔA| the ratio (e^x - 1)/x is taken from its series
SERIES_CUTOFF = 1e-8


class DiscretizationError(Exception):
    pass


class LTIParams:
    """
    Continuous time-invariant state space: g'(t) = A g(t) + B x(t), y(t) = C g(t).
    A is either a full N×N matrix or a length N vector holding its diagonal.
    """

    def __init__(self, A: torch.Tensor, B: torch.Tensor, C: torch.Tensor, delta: float):
        if delta <= 0:
            raise DiscretizationError(f'delta must be positive, got {delta}')
        if A.dim() == 2 and A.shape[0] != A.shape[1]:
            raise DiscretizationError(f'A must be square, got shape {tuple(A.shape)}')
        if A.dim() not in (1, 2):
            raise DiscretizationError(f'A must be a diagonal vector or a square matrix, got shape {tuple(A.shape)}')
        self.A = A
        self.B = B.reshape(-1)
        self.C = C.reshape(-1)
        self.delta = float(delta)
        n = A.shape[0]
        if self.B.shape[0] != n or self.C.shape[0] != n:
            raise DiscretizationError(f'B and C must have {n} entries to match A')

    @property
    def diagonal(self) -> bool:
        return self.A.dim() == 1

    @property
    def state_size(self) -> int:
        return self.A.shape[0]


class DiscreteParams:
    def __init__(self, A_d: torch.Tensor, B_d: torch.Tensor, C: torch.Tensor):
        self.A_d = A_d
        self.B_d = B_d.reshape(-1)
        self.C = C.reshape(-1)

    @property
    def diagonal(self) -> bool:
        return self.A_d.dim() == 1

    @property
    def state_size(self) -> int:
        return self.A_d.shape[0]

    def evolve(self, g: torch.Tensor) -> torch.Tensor:
        return self.A_d * g if self.diagonal else self.A_d @ g


def expm1_ratio(x: torch.Tensor) -> torch.Tensor:
    """(e^x - 1) / x with its limit 1 at x = 0."""
    small = x.abs() < SERIES_CUTOFF
    safe = torch.where(small, torch.ones_like(x), x)
    return torch.where(small, 1 + x / 2, torch.expm1(safe) / safe)


def discretize_zoh(p: LTIParams, method: str = 'inverse') -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Zero-order-hold discretization.

    The diagonal path is elementwise and handles zero entries through the series
    limit. For a full A, ``inverse`` applies (ΔA)^-1 (exp(ΔA) - I) ΔB and rejects
    a singular A; ``block`` reads both matrices off the exponential of the
    augmented matrix [[ΔA, ΔB], [0, 0]], which needs no inverse.
    """
    if method not in DISCRETIZATION_METHODS:
        raise DiscretizationError(f'unknown discretization method {method!r}')

    if p.diagonal:
        dA = p.delta * p.A
        return torch.exp(dA), expm1_ratio(dA) * p.delta * p.B

    n = p.state_size
    dA = p.delta * p.A
    dB = p.delta * p.B

    if method == 'block':
        augmented = torch.zeros(n + 1, n + 1, dtype=p.A.dtype)
        augmented[:n, :n] = dA
        augmented[:n, n] = dB
        expo = torch.linalg.matrix_exp(augmented)
        return expo[:n, :n], expo[:n, n]

    A_d = torch.linalg.matrix_exp(dA)
    if torch.linalg.matrix_rank(dA) < n:
        raise DiscretizationError('A is singular, use the diagonal form or method="block"')
    identity = torch.eye(n, dtype=p.A.dtype)
    try:
        # (ΔA)^-1 commutes with exp(ΔA) - I
        B_d = torch.linalg.solve(dA, (A_d - identity) @ dB)
    except RuntimeError as e:
        raise DiscretizationError(f'A could not be inverted: {e}')
    return A_d, B_d


def discretize(p: LTIParams, method: str = 'inverse') -> DiscreteParams:
    A_d, B_d = discretize_zoh(p, method)
    return DiscreteParams(A_d, B_d, p.C)
