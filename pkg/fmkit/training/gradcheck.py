"""
Compares the hand-written backward rules against central differences on a
small model. Every parameter tensor contributes at least one coordinate.
"""
from typing import List, Union, Optional, Dict

import torch

from fmkit.definitions import DTYPE
from fmkit.encoders.config import BlockConfig, Variant
from fmkit.pipeline.model import ModelConfig, DetectorModel
from fmkit.tensor.ops import Tape
from fmkit.training.trainer import wce_loss

RELATIVE_FLOOR = 1e-3


class CoordinateCheck:
    def __init__(self, name: str, index: int, analytic: float, numeric: float):
        self.name = name
        self.index = index
        self.analytic = analytic
        self.numeric = numeric
        self.error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), RELATIVE_FLOOR)

    def __repr__(self) -> str:
        return f'{self.name}[{self.index}]: analytic {self.analytic:.6e}, numeric {self.numeric:.6e}, ' \
               f'relative error {self.error:.3e}'


class GradcheckReport:
    def __init__(self, variant: Variant, tolerance: float, checks: List[CoordinateCheck]):
        self.variant = variant
        self.tolerance = tolerance
        self.checks = checks

    @property
    def max_error(self) -> float:
        return max(c.error for c in self.checks)

    @property
    def failures(self) -> List[CoordinateCheck]:
        return [c for c in self.checks if c.error >= self.tolerance]

    @property
    def failed_parameters(self) -> List[str]:
        return sorted(set(c.name for c in self.failures))

    @property
    def passed(self) -> bool:
        return len(self.failures) == 0

    def __repr__(self) -> str:
        status = 'passed' if self.passed else f'FAILED on {", ".join(self.failed_parameters)}'
        return f'gradcheck {self.variant.value}: {len(self.checks)} coordinates over ' \
               f'{len(set(c.name for c in self.checks))} tensors, max relative error {self.max_error:.3e} ' \
               f'(tolerance {self.tolerance:g}) {status}'


def tiny_config(variant: Union[str, Variant] = Variant.PN_BIMAMBA, seed: int = 0) -> ModelConfig:
    block = BlockConfig(Variant.parse(variant), d_model=8, n_blocks=1, expand=2, d_state=4, d_conv=3,
                        conv_kernel=3, ffn_mult=2, mhsa_heads=2, dropout=0.)
    return ModelConfig(8, block, head_hidden=6, seed=seed)


def gradcheck(model_cfg: Optional[ModelConfig] = None, tolerance: float = 1e-4, n_coords: int = 60, seed: int = 0,
              step: float = 1e-5, frames: int = 6) -> GradcheckReport:
    if model_cfg is None:
        model_cfg = tiny_config(seed=seed)
    if tolerance < 0:
        raise ValueError(f'tolerance cannot be negative, got {tolerance}')

    model = DetectorModel(model_cfg)
    model.eval()
    generator = torch.Generator().manual_seed(seed)
    features = torch.randn(2, frames, model_cfg.c_in, generator=generator, dtype=DTYPE)
    lengths = torch.tensor([frames, max(1, frames - 2)])
    labels = torch.tensor([0, 1])

    def loss_fn() -> torch.Tensor:
        return wce_loss(model(features, lengths).logits, labels)

    tape = Tape.from_module(model)
    analytic: Dict[str, torch.Tensor] = tape.backward(loss_fn())
    names = list(tape.parameters.keys())

    # one coordinate per tensor first, then random extras across the whole model
    picks = []
    for name in names:
        size = tape.parameters[name].numel()
        picks.append((name, int(torch.randint(0, size, (1,), generator=generator).item())))
    sizes = torch.tensor([tape.parameters[n].numel() for n in names], dtype=DTYPE)
    while len(picks) < n_coords:
        j = int(torch.multinomial(sizes, 1, generator=generator).item())
        picks.append((names[j], int(torch.randint(0, int(sizes[j].item()), (1,), generator=generator).item())))

    checks = []
    with torch.no_grad():
        for name, index in picks:
            flat = tape.parameters[name].view(-1)
            orig = flat[index].item()
            flat[index] = orig + step
            plus = loss_fn().item()
            flat[index] = orig - step
            minus = loss_fn().item()
            flat[index] = orig
            numeric = (plus - minus) / (2 * step)
            checks.append(CoordinateCheck(name, index, analytic[name].reshape(-1)[index].item(), numeric))

    return GradcheckReport(model_cfg.block.variant, tolerance, checks)
