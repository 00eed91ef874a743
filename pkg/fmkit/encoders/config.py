from enum import Enum
from typing import Dict, Any, Union


class Variant(Enum):
    TRANS_BIMAMBA = 'trans-bimamba'
    CON_BIMAMBA = 'con-bimamba'
    PN_BIMAMBA = 'pn-bimamba'
    TRANSFORMER = 'transformer'
    CONFORMER = 'conformer'

    @staticmethod
    def parse(name: Union[str, 'Variant']) -> 'Variant':
        if isinstance(name, Variant):
            return name
        key = name.strip().lower().replace('_', '-')
        for v in Variant:
            if v.value == key:
                return v
        raise ValueError(f'unknown encoder variant {name!r}, expected one of {", ".join(v.value for v in Variant)}')

    @property
    def uses_mamba(self) -> bool:
        return self in (Variant.TRANS_BIMAMBA, Variant.CON_BIMAMBA, Variant.PN_BIMAMBA)

    @property
    def uses_attention(self) -> bool:
        return not self.uses_mamba


BIMAMBA_VARIANTS = [Variant.PN_BIMAMBA, Variant.TRANS_BIMAMBA, Variant.CON_BIMAMBA]

ABLATION_FLAGS = ('disable_pre_ln', 'disable_ffn', 'disable_bidirectional', 'disable_pooling')


class BlockConfig:
    """
    Encoder architecture. ``n_blocks = 0`` builds an identity encoder.

    The ablation flags remove, respectively: the block's pre-norms (including the
    backward-branch norm), the trailing feed-forward, the backward Mamba branch,
    and attention pooling (replaced by a masked mean in the pipeline).
    """

    def __init__(self, variant: Union[str, 'Variant'] = Variant.PN_BIMAMBA, d_model: int = 144, n_blocks: int = 4,
                 expand: int = 2, d_state: int = 16, d_conv: int = 4, conv_kernel: int = 31, ffn_mult: int = 4,
                 mhsa_heads: int = 4, dropout: float = 0.1, ssm_skip: bool = True, tie_weights: bool = False,
                 strict_residual: bool = True, disable_pre_ln: bool = False, disable_ffn: bool = False,
                 disable_bidirectional: bool = False, disable_pooling: bool = False):
        self.variant = Variant.parse(variant)
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.expand = expand
        self.d_state = d_state
        self.d_conv = d_conv
        self.conv_kernel = conv_kernel
        self.ffn_mult = ffn_mult
        self.mhsa_heads = mhsa_heads
        self.dropout = dropout
        self.ssm_skip = ssm_skip
        self.tie_weights = tie_weights
        self.strict_residual = strict_residual
        self.disable_pre_ln = disable_pre_ln
        self.disable_ffn = disable_ffn
        self.disable_bidirectional = disable_bidirectional
        self.disable_pooling = disable_pooling
        self.validate()

    def validate(self):
        if self.d_model < 1:
            raise ValueError(f'd_model must be positive, got {self.d_model}')
        if self.n_blocks < 0:
            raise ValueError(f'n_blocks must not be negative, got {self.n_blocks}')
        if self.expand < 1 or self.d_state < 1 or self.d_conv < 1:
            raise ValueError('expand, d_state and d_conv must be positive')
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError(f'conv_kernel must be odd, got {self.conv_kernel}')
        if not 0. <= self.dropout < 1.:
            raise ValueError(f'dropout must be in [0, 1), got {self.dropout}')
        if self.variant.uses_attention and (self.mhsa_heads < 1 or self.d_model % self.mhsa_heads != 0):
            raise ValueError(f'd_model {self.d_model} is not divisible by {self.mhsa_heads} heads')

    def to_dict(self) -> Dict[str, Any]:
        d = dict(self.__dict__)
        d['variant'] = self.variant.value
        return d

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> 'BlockConfig':
        return BlockConfig(**d)

    def replace(self, **changes) -> 'BlockConfig':
        d = self.to_dict()
        d.update(changes)
        return BlockConfig.from_dict(d)

    def __repr__(self) -> str:
        return f'BLOCKS: {{ {self.variant.value} x{self.n_blocks}, D: {self.d_model}, ' \
               f'E: {self.expand * self.d_model}, N: {self.d_state} }}'
