"""
Differentiable primitives used by every model in the package.

Each primitive is a torch.autograd.Function with its own backward rule so the
finite-difference checks exercise our gradients rather than torch's. Binary
elementwise ops only broadcast a trailing singleton axis.
"""
from typing import Dict, List, Optional, Tuple, Type

import torch
from torch import nn
from torch.autograd import Function

from fmkit.definitions import LAYER_NORM_EPS


class ShapeError(Exception):
    pass


class NonScalarLossError(Exception):
    pass


def _trailing_broadcastable(a: torch.Size, b: torch.Size) -> bool:
    if a == b:
        return True
    if len(a) != len(b) or len(a) == 0:
        return False
    return a[:-1] == b[:-1] and (a[-1] == 1 or b[-1] == 1)


def _reduce_to(grad: torch.Tensor, shape: torch.Size) -> torch.Tensor:
    if grad.shape == shape:
        return grad
    return grad.sum(dim=-1, keepdim=True)


class AddFunction(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.shapes = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        a_shape, b_shape = ctx.shapes
        return _reduce_to(grad, a_shape), _reduce_to(grad, b_shape)


class MulFunction(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save_for_backward(a, b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved_tensors
        return _reduce_to(grad * b, a.shape), _reduce_to(grad * a, b.shape)


class SiLUFunction(Function):
    @staticmethod
    def forward(ctx, x):
        s = torch.sigmoid(x)
        ctx.save_for_backward(x, s)
        return x * s

    @staticmethod
    def backward(ctx, grad):
        x, s = ctx.saved_tensors
        return grad * s * (1 + x * (1 - s))


class SigmoidFunction(Function):
    @staticmethod
    def forward(ctx, x):
        out = torch.sigmoid(x)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, = ctx.saved_tensors
        return grad * out * (1 - out)


class SoftplusFunction(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.logaddexp(x, torch.zeros_like(x))

    @staticmethod
    def backward(ctx, grad):
        x, = ctx.saved_tensors
        return grad * torch.sigmoid(x)


class ExpFunction(Function):
    @staticmethod
    def forward(ctx, x):
        out = torch.exp(x)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, = ctx.saved_tensors
        return grad * out


class TanhFunction(Function):
    @staticmethod
    def forward(ctx, x):
        out = torch.tanh(x)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, = ctx.saved_tensors
        return grad * (1 - out * out)


class MatMulFunction(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save_for_backward(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved_tensors
        grad_a = grad @ b.transpose(0, 1)
        # leading axes of a are folded into the contraction for b
        grad_b = a.reshape(-1, a.shape[-1]).transpose(0, 1) @ grad.reshape(-1, grad.shape[-1])
        return grad_a, grad_b


class BiasAddFunction(Function):
    @staticmethod
    def forward(ctx, x, bias):
        return x + bias

    @staticmethod
    def backward(ctx, grad):
        return grad, grad.reshape(-1, grad.shape[-1]).sum(0)


class LayerNormFunction(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps):
        centered = x - x.mean(dim=-1, keepdim=True)
        var = (centered * centered).mean(dim=-1, keepdim=True)
        rstd = 1. / torch.sqrt(var + eps)
        xhat = centered * rstd
        ctx.save_for_backward(xhat, rstd, gamma)
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, grad):
        xhat, rstd, gamma = ctx.saved_tensors
        d = xhat.shape[-1]
        g = grad * gamma
        grad_x = rstd * (g - g.mean(dim=-1, keepdim=True) - xhat * (g * xhat).mean(dim=-1, keepdim=True))
        grad_gamma = (grad * xhat).reshape(-1, d).sum(0)
        grad_beta = grad.reshape(-1, d).sum(0)
        return grad_x, grad_gamma, grad_beta, None


UNARY_OPS: Dict[str, Type[Function]] = {
    'silu': SiLUFunction,
    'sigmoid': SigmoidFunction,
    'softplus': SoftplusFunction,
    'exp': ExpFunction,
    'tanh': TanhFunction,
}

BINARY_OPS: Dict[str, Type[Function]] = {
    'add': AddFunction,
    'mul': MulFunction,
}


def elementwise(op: str, a: torch.Tensor, b: Optional[torch.Tensor] = None) -> torch.Tensor:
    if op in UNARY_OPS:
        if b is not None:
            raise ValueError(f'{op} takes a single operand')
        return UNARY_OPS[op].apply(a)
    if op in BINARY_OPS:
        if b is None:
            raise ValueError(f'{op} needs two operands')
        if not _trailing_broadcastable(a.shape, b.shape):
            raise ShapeError(f'{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not match')
        return BINARY_OPS[op].apply(a, b)
    raise ValueError(f'unknown elementwise op {op!r}')


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return elementwise('add', a, b)


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return elementwise('mul', a, b)


def silu(x: torch.Tensor) -> torch.Tensor:
    return elementwise('silu', x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return elementwise('sigmoid', x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return elementwise('softplus', x)


def exp(x: torch.Tensor) -> torch.Tensor:
    return elementwise('exp', x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return elementwise('tanh', x)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if b.dim() != 2:
        raise ShapeError(f'matmul: right operand must be 2-D, got shape {tuple(b.shape)}')
    if a.dim() < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f'matmul: inner dimensions of {tuple(a.shape)} and {tuple(b.shape)} disagree')
    return MatMulFunction.apply(a, b)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    out = matmul(x, weight)
    if bias is None:
        return out
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f'linear: bias shape {tuple(bias.shape)} does not match {weight.shape[1]} outputs')
    return BiasAddFunction.apply(out, bias)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
               eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f'layer_norm: affine shapes {tuple(gamma.shape)}/{tuple(beta.shape)} do not match D={d}')
    return LayerNormFunction.apply(x, gamma, beta, eps)


class Tape:
    """
    Registry of trainable tensors. The graph itself is recorded by torch's
    autograd as the primitives above are applied; the tape walks it in reverse
    topological order and returns one gradient per registered parameter.
    """

    def __init__(self):
        self.parameters: Dict[str, torch.Tensor] = {}

    @staticmethod
    def from_module(module: nn.Module) -> 'Tape':
        tape = Tape()
        for name, param in module.named_parameters():
            tape.register(name, param)
        return tape

    def register(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if name in self.parameters:
            raise ValueError(f'parameter {name} is already on the tape')
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self.parameters[name] = tensor
        return tensor

    def nodes(self, loss: torch.Tensor) -> List:
        """Recorded ops feeding ``loss``, in the order backward visits them."""
        if loss.grad_fn is None:
            return []
        order = []
        seen = set()
        stack: List[Tuple[object, bool]] = [(loss.grad_fn, False)]
        while len(stack) > 0:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node in seen:
                continue
            seen.add(node)
            stack.append((node, True))
            for parent, _ in node.next_functions:
                if parent is not None and parent not in seen:
                    stack.append((parent, False))
        # post-order puts producers first, backward runs consumers first
        order.reverse()
        return order

    def backward(self, loss: torch.Tensor) -> Dict[str, torch.Tensor]:
        if loss.numel() != 1:
            raise NonScalarLossError(f'loss must be a scalar, got shape {tuple(loss.shape)}')
        if not loss.requires_grad:
            raise ValueError('loss is not connected to any recorded op')
        names = list(self.parameters.keys())
        params = [self.parameters[n] for n in names]
        grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
        return {
            n: torch.zeros_like(p) if g is None else g
            for n, p, g in zip(names, params, grads)
        }


def backward(loss: torch.Tensor, tape: Tape) -> Dict[str, torch.Tensor]:
    return tape.backward(loss)
