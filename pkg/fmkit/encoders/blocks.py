import math
from abc import ABC, abstractmethod
from typing import Optional, Dict, Type

import torch
import torch.nn.functional as F
from einops import einsum, rearrange
from torch import nn

from fmkit.definitions import DTYPE
from fmkit.encoders.config import BlockConfig, Variant
from fmkit.encoders.layers import Linear, LayerNorm, FeedForward, check_finite, valid_mask
from fmkit.encoders.mamba import BiMambaUnit
from fmkit.tensor import ops


def make_bimamba(cfg: BlockConfig) -> BiMambaUnit:
    return BiMambaUnit(cfg.d_model, cfg.expand, cfg.d_state, cfg.d_conv, cfg.ssm_skip,
                       bidirectional=not cfg.disable_bidirectional,
                       backward_norm=not cfg.disable_pre_ln,
                       tie_weights=cfg.tie_weights)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads != 0:
            raise ValueError(f'd_model {d_model} is not divisible by {heads} heads')
        self.heads = heads
        self.head_dim = d_model // heads
        self.query = Linear(d_model, d_model)
        self.key = Linear(d_model, d_model)
        self.value = Linear(d_model, d_model)
        self.output = Linear(d_model, d_model)

    def attention_weights(self, h: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Row-stochastic (batch, heads, T, T) weights; padded keys get zero weight."""
        squeeze = h.dim() == 2
        if squeeze:
            h = h.unsqueeze(0)
        q = rearrange(self.query(h), 'b l (h d) -> b h l d', h=self.heads)
        k = rearrange(self.key(h), 'b l (h d) -> b h l d', h=self.heads)
        scores = einsum(q, k, 'b h i d, b h j d -> b h i j') / math.sqrt(self.head_dim)
        mask = valid_mask(lengths, h.shape[0], h.shape[1])
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :], float('-inf'))
        weights = torch.softmax(scores, dim=-1)
        return weights.squeeze(0) if squeeze else weights

    def forward(self, h: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        squeeze = h.dim() == 2
        if squeeze:
            h = h.unsqueeze(0)
        weights = self.attention_weights(h, lengths)
        v = rearrange(self.value(h), 'b l (h d) -> b h l d', h=self.heads)
        context = rearrange(einsum(weights, v, 'b h i j, b h j d -> b h i d'), 'b h l d -> b l (h d)')
        out = self.output(context)
        return out.squeeze(0) if squeeze else out


class ConvolutionModule(nn.Module):
    """
    LayerNorm, pointwise expansion with GLU, centered depthwise convolution,
    LayerNorm, SiLU, pointwise projection. Padded frames are zeroed before the
    depthwise convolution.
    """

    def __init__(self, d_model: int, kernel: int = 31, dropout: float = 0.):
        super().__init__()
        self.kernel = kernel
        self.norm = LayerNorm(d_model)
        self.pointwise_in = Linear(d_model, 2 * d_model)
        bound = 1. / math.sqrt(kernel)
        self.depthwise_weight = nn.Parameter(torch.empty(d_model, 1, kernel, dtype=DTYPE).uniform_(-bound, bound))
        self.depthwise_bias = nn.Parameter(torch.zeros(d_model, dtype=DTYPE))
        self.depthwise_norm = LayerNorm(d_model)
        self.pointwise_out = Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, h: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        squeeze = h.dim() == 2
        if squeeze:
            h = h.unsqueeze(0)
        x = self.pointwise_in(self.norm(h))
        a, gate = x.chunk(2, dim=-1)
        x = ops.mul(a, ops.sigmoid(gate))
        mask = valid_mask(lengths, h.shape[0], h.shape[1])
        if mask is not None:
            x = x * mask.unsqueeze(-1).to(x.dtype)
        pad = (self.kernel - 1) // 2
        x = F.conv1d(F.pad(rearrange(x, 'b l d -> b d l'), (pad, pad)), self.depthwise_weight, self.depthwise_bias,
                     groups=self.depthwise_weight.shape[0])
        x = ops.silu(self.depthwise_norm(rearrange(x, 'b d l -> b l d')))
        out = self.dropout(self.pointwise_out(x))
        return out.squeeze(0) if squeeze else out


class EncoderBlock(nn.Module, ABC):
    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.dropout = nn.Dropout(cfg.dropout)

    @abstractmethod
    def forward(self, h_prev: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        pass


class PNBiMambaBlock(EncoderBlock):
    """
    Pre-norm bidirectional block with two residual streams:

        h1 = LN1(h_prev)
        h2 = fwd(h1) + flip(bwd(LN_b(flip(h_prev))))
        h3 = h2 + h_prev
        h4 = LN2(h3)
        h5 = h4 + h3
        h  = FFN(h5) + h4

    With ``strict_residual`` off the block degrades to a standard pre-norm layer,
    h = FFN(h4) + h3.
    """

    def __init__(self, cfg: BlockConfig):
        super().__init__(cfg)
        self.norm_in = None if cfg.disable_pre_ln else LayerNorm(cfg.d_model)
        self.bimamba = make_bimamba(cfg)
        self.norm_mid = None if cfg.disable_pre_ln else LayerNorm(cfg.d_model)
        self.ffn = None if cfg.disable_ffn else FeedForward(cfg.d_model, cfg.ffn_mult, cfg.dropout)

    def forward(self, h_prev: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        normed = self.norm_in(h_prev) if self.norm_in is not None else h_prev
        mixed = self.dropout(self.bimamba(h_prev, normed, lengths))
        residual = mixed + h_prev
        renormed = self.norm_mid(residual) if self.norm_mid is not None else residual

        if self.cfg.strict_residual:
            stacked = renormed + residual
            if self.ffn is None:
                return check_finite(stacked, 'pn-bimamba block')
            return check_finite(self.dropout(self.ffn(stacked)) + renormed, 'pn-bimamba block')

        if self.ffn is None:
            return check_finite(residual, 'pn-bimamba block')
        return check_finite(self.dropout(self.ffn(renormed)) + residual, 'pn-bimamba block')


class TransBiMambaBlock(EncoderBlock):
    """Post-norm Transformer layer with BiMamba in place of self-attention."""

    def __init__(self, cfg: BlockConfig):
        super().__init__(cfg)
        self.bimamba = make_bimamba(cfg)
        self.norm_mix = LayerNorm(cfg.d_model)
        self.ffn = None if cfg.disable_ffn else FeedForward(cfg.d_model, cfg.ffn_mult, cfg.dropout)
        self.norm_ffn = None if cfg.disable_ffn else LayerNorm(cfg.d_model)

    def forward(self, h_prev: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.norm_mix(h_prev + self.dropout(self.bimamba(h_prev, h_prev, lengths)))
        if self.ffn is not None:
            h = self.norm_ffn(h + self.dropout(self.ffn(h)))
        return check_finite(h, 'trans-bimamba block')


class ConBiMambaBlock(EncoderBlock):
    """Macaron Conformer layer with BiMamba in place of self-attention."""

    def __init__(self, cfg: BlockConfig):
        super().__init__(cfg)
        self.ffn_in = None if cfg.disable_ffn else FeedForward(cfg.d_model, cfg.ffn_mult, cfg.dropout)
        self.norm_mix = None if cfg.disable_pre_ln else LayerNorm(cfg.d_model)
        self.bimamba = make_bimamba(cfg)
        self.conv = ConvolutionModule(cfg.d_model, cfg.conv_kernel, cfg.dropout)
        self.ffn_out = None if cfg.disable_ffn else FeedForward(cfg.d_model, cfg.ffn_mult, cfg.dropout)
        self.norm_out = LayerNorm(cfg.d_model)

    def forward(self, h_prev: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = h_prev
        if self.ffn_in is not None:
            h = h + 0.5 * self.dropout(self.ffn_in(h))
        normed = self.norm_mix(h) if self.norm_mix is not None else h
        h = h + self.dropout(self.bimamba(h, normed, lengths))
        h = h + self.conv(h, lengths)
        if self.ffn_out is not None:
            h = h + 0.5 * self.dropout(self.ffn_out(h))
        return check_finite(self.norm_out(h), 'con-bimamba block')


class TransformerBlock(EncoderBlock):
    """Post-norm self-attention baseline."""

    def __init__(self, cfg: BlockConfig):
        super().__init__(cfg)
        self.attention = MultiHeadSelfAttention(cfg.d_model, cfg.mhsa_heads)
        self.norm_mix = LayerNorm(cfg.d_model)
        self.ffn = None if cfg.disable_ffn else FeedForward(cfg.d_model, cfg.ffn_mult, cfg.dropout)
        self.norm_ffn = None if cfg.disable_ffn else LayerNorm(cfg.d_model)

    def forward(self, h_prev: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.norm_mix(h_prev + self.dropout(self.attention(h_prev, lengths)))
        if self.ffn is not None:
            h = self.norm_ffn(h + self.dropout(self.ffn(h)))
        return check_finite(h, 'transformer block')


class ConformerBlock(EncoderBlock):
    def __init__(self, cfg: BlockConfig):
        super().__init__(cfg)
        self.ffn_in = None if cfg.disable_ffn else FeedForward(cfg.d_model, cfg.ffn_mult, cfg.dropout)
        self.norm_mix = None if cfg.disable_pre_ln else LayerNorm(cfg.d_model)
        self.attention = MultiHeadSelfAttention(cfg.d_model, cfg.mhsa_heads)
        self.conv = ConvolutionModule(cfg.d_model, cfg.conv_kernel, cfg.dropout)
        self.ffn_out = None if cfg.disable_ffn else FeedForward(cfg.d_model, cfg.ffn_mult, cfg.dropout)
        self.norm_out = LayerNorm(cfg.d_model)

    def forward(self, h_prev: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = h_prev
        if self.ffn_in is not None:
            h = h + 0.5 * self.dropout(self.ffn_in(h))
        normed = self.norm_mix(h) if self.norm_mix is not None else h
        h = h + self.dropout(self.attention(normed, lengths))
        h = h + self.conv(h, lengths)
        if self.ffn_out is not None:
            h = h + 0.5 * self.dropout(self.ffn_out(h))
        return check_finite(self.norm_out(h), 'conformer block')


BLOCK_TYPES: Dict[Variant, Type[EncoderBlock]] = {
    Variant.PN_BIMAMBA: PNBiMambaBlock,
    Variant.TRANS_BIMAMBA: TransBiMambaBlock,
    Variant.CON_BIMAMBA: ConBiMambaBlock,
    Variant.TRANSFORMER: TransformerBlock,
    Variant.CONFORMER: ConformerBlock,
}


def make_block(cfg: BlockConfig) -> EncoderBlock:
    return BLOCK_TYPES[cfg.variant](cfg)


def sinusoidal_encoding(frames: int, d_model: int, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Absolute (T, D) sine/cosine positions, computed for any T."""
    position = torch.arange(frames, dtype=dtype).unsqueeze(1)
    rates = torch.exp(torch.arange(0, d_model, 2, dtype=dtype) * (-math.log(10000.) / d_model))
    table = torch.zeros(frames, d_model, dtype=dtype)
    table[:, 0::2] = torch.sin(position * rates)
    table[:, 1::2] = torch.cos(position * rates[:d_model // 2])
    return table


class Encoder(nn.Module):
    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList([make_block(cfg) for _ in range(cfg.n_blocks)])

    def forward(self, h: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        # attention alone is blind to frame order
        if self.cfg.variant == Variant.TRANSFORMER and len(self.blocks) > 0:
            h = h + sinusoidal_encoding(h.shape[-2], h.shape[-1], h.dtype).to(h.device)
        for block in self.blocks:
            h = block(h, lengths)
        return h


def _linear_count(i: int, o: int, bias: bool = True) -> int:
    return i * o + (o if bias else 0)


def _norm_count(d: int) -> int:
    return 2 * d


def mamba_unit_count(cfg: BlockConfig) -> int:
    d = cfg.d_model
    e = int(cfg.expand * d)
    n = cfg.d_state
    count = 2 * _linear_count(d, e, bias=False)
    count += e * cfg.d_conv + e
    # A_log, Δ projection, B and C projections
    count += e * n + _linear_count(e, e) + 2 * _linear_count(e, n)
    if cfg.ssm_skip:
        count += e
    return count + _linear_count(e, d, bias=False)


def bimamba_count(cfg: BlockConfig) -> int:
    count = mamba_unit_count(cfg)
    if cfg.disable_bidirectional:
        return count
    if not cfg.tie_weights:
        count += mamba_unit_count(cfg)
    if not cfg.disable_pre_ln:
        count += _norm_count(cfg.d_model)
    return count


def ffn_count(cfg: BlockConfig) -> int:
    d = cfg.d_model
    return _linear_count(d, cfg.ffn_mult * d) + _linear_count(cfg.ffn_mult * d, d)


def conv_module_count(cfg: BlockConfig) -> int:
    d = cfg.d_model
    return _norm_count(d) + _linear_count(d, 2 * d) + d * cfg.conv_kernel + d + _norm_count(d) + _linear_count(d, d)


def attention_count(cfg: BlockConfig) -> int:
    return 4 * _linear_count(cfg.d_model, cfg.d_model)


def expected_block_count(cfg: BlockConfig) -> int:
    d = cfg.d_model
    pre_ln = 0 if cfg.disable_pre_ln else _norm_count(d)
    ffn = 0 if cfg.disable_ffn else ffn_count(cfg)
    v = cfg.variant
    if v == Variant.PN_BIMAMBA:
        return 2 * pre_ln + bimamba_count(cfg) + ffn
    if v == Variant.TRANS_BIMAMBA:
        return bimamba_count(cfg) + _norm_count(d) + (0 if cfg.disable_ffn else ffn + _norm_count(d))
    if v == Variant.CON_BIMAMBA:
        return 2 * ffn + pre_ln + bimamba_count(cfg) + conv_module_count(cfg) + _norm_count(d)
    if v == Variant.TRANSFORMER:
        return attention_count(cfg) + _norm_count(d) + (0 if cfg.disable_ffn else ffn + _norm_count(d))
    return 2 * ffn + pre_ln + attention_count(cfg) + conv_module_count(cfg) + _norm_count(d)


def expected_parameter_count(cfg: BlockConfig) -> int:
    """Closed-form parameter count of an encoder built from ``cfg``."""
    return cfg.n_blocks * expected_block_count(cfg)
