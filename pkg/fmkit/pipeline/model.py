from typing import Dict, Any, Optional

import torch
from torch import nn

from fmkit.definitions import DTYPE
from fmkit.encoders.blocks import Encoder
from fmkit.encoders.config import BlockConfig
from fmkit.encoders.layers import Linear, valid_mask
from fmkit.models import Label
from fmkit.tensor import ops
from fmkit.tensor.ops import ShapeError


class ModelConfig:
    def __init__(self, c_in: int, block: BlockConfig, head_hidden: int = 80, seed: int = 0):
        if c_in < 1:
            raise ValueError(f'c_in must be positive, got {c_in}')
        if head_hidden < 1:
            raise ValueError(f'head_hidden must be positive, got {head_hidden}')
        self.c_in = c_in
        self.block = block
        self.head_hidden = head_hidden
        self.seed = seed

    @property
    def d_model(self) -> int:
        return self.block.d_model

    def to_dict(self) -> Dict[str, Any]:
        return {
            'c_in': self.c_in,
            'head_hidden': self.head_hidden,
            'seed': self.seed,
            'block': self.block.to_dict(),
        }

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> 'ModelConfig':
        return ModelConfig(d['c_in'], BlockConfig.from_dict(d['block']), d['head_hidden'], d['seed'])


class Prediction:
    def __init__(self, logits: torch.Tensor):
        self.logits = logits

    @property
    def score(self) -> torch.Tensor:
        """logit_fake - logit_real, higher means more likely fake."""
        return self.logits[..., Label.FAKE.value] - self.logits[..., Label.REAL.value]


class AttentionPooling(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d_model, 1, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(1, dtype=DTYPE))
        nn.init.normal_(self.weight, std=d_model ** -0.5)

    def weights(self, h: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        scores = ops.linear(h, self.weight, self.bias).squeeze(-1)
        if h.dim() == 3:
            mask = valid_mask(lengths, h.shape[0], h.shape[1])
            if mask is not None:
                scores = scores.masked_fill(~mask, float('-inf'))
        return torch.softmax(scores, dim=-1)

    def forward(self, h: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        alpha = self.weights(h, lengths)
        return (alpha.unsqueeze(-1) * h).sum(dim=-2)


class MeanPooling(nn.Module):
    def forward(self, h: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        if h.dim() == 3 and lengths is not None:
            mask = valid_mask(lengths, h.shape[0], h.shape[1]).unsqueeze(-1).to(h.dtype)
            return (h * mask).sum(dim=1) / lengths.unsqueeze(-1).to(h.dtype)
        return h.mean(dim=-2)


class DetectorModel(nn.Module):
    """Frame projection, encoder, utterance pooling and a two-way MLP head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.projection = Linear(cfg.c_in, cfg.d_model)
            self.encoder = Encoder(cfg.block)
            self.pooling = MeanPooling() if cfg.block.disable_pooling else AttentionPooling(cfg.d_model)
            self.head_hidden = Linear(cfg.d_model, cfg.head_hidden)
            self.head_out = Linear(cfg.head_hidden, 2)

    def project(self, s_f: torch.Tensor) -> torch.Tensor:
        if s_f.shape[-1] != self.cfg.c_in:
            raise ShapeError(f'features have {s_f.shape[-1]} channels, the model expects {self.cfg.c_in}')
        return self.projection(s_f)

    def attention_pool(self, h: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.pooling(h, lengths)

    def classify(self, s_u: torch.Tensor) -> Prediction:
        return Prediction(self.head_out(ops.silu(self.head_hidden(s_u))))

    def forward(self, s_f: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> Prediction:
        h = self.encoder(self.project(s_f), lengths)
        return self.classify(self.attention_pool(h, lengths))


def build_model(cfg: ModelConfig) -> DetectorModel:
    return DetectorModel(cfg)
