import copy
import pathlib
import time
from typing import List, Sequence, Optional, Dict, Any, Union

import numpy as np
import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

from fmkit.definitions import FRAME_RATE, DTYPE
from fmkit.encoders.blocks import Encoder
from fmkit.encoders.config import BlockConfig, Variant
from fmkit.pipeline.model import DetectorModel
from fmkit.utils.runtime import runtime_mode

PRECISIONS = {32: torch.float32, 64: torch.float64}


class RTFRow:
    def __init__(self, model_id: str, duration_s: float, frames: int, times: Sequence[float]):
        if len(times) < 1:
            raise ValueError('at least one measured run is needed')
        rtf = np.asarray(times, dtype=np.float64) / duration_s
        self.model_id = model_id
        self.duration_s = duration_s
        self.frames = frames
        self.runs = len(times)
        self.mean_rtf = float(rtf.mean())
        self.std_rtf = float(rtf.std())
        self.min_seconds = float(np.min(times))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'model': self.model_id,
            'duration_s': self.duration_s,
            'frames': self.frames,
            'runs': self.runs,
            'mean_rtf': self.mean_rtf,
            'std_rtf': self.std_rtf,
        }


class RTFReport:
    def __init__(self, rows: List[RTFRow], warmup_runs: int, mode: str, precision: int, timer_warning: bool):
        self.rows = rows
        self.warmup_runs = warmup_runs
        self.mode = mode
        self.precision = precision
        self.timer_warning = timer_warning

    def records(self) -> List[Dict[str, Any]]:
        return [dict(r.to_dict(), warmup_runs=self.warmup_runs, mode=self.mode, precision=self.precision,
                     timer_warning=self.timer_warning) for r in self.rows]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(self.records())

    def extend(self, other: 'RTFReport') -> 'RTFReport':
        return RTFReport(self.rows + other.rows, self.warmup_runs, self.mode, self.precision,
                         self.timer_warning or other.timer_warning)


def timer_resolution() -> float:
    return time.get_clock_info('perf_counter').resolution


def measure_rtf(model: DetectorModel, durations: Sequence[float], runs: int = 100, warmup_runs: int = 10,
                frame_rate: int = FRAME_RATE, model_id: Optional[str] = None, precision: int = 64, seed: int = 0,
                progress: bool = False) -> RTFReport:
    """
    Wall-clock seconds of inference per second of input, after ``warmup_runs``
    unmeasured passes, for a single utterance of each duration.
    """
    if runs < 1:
        raise ValueError(f'runs must be at least 1, got {runs}')
    if warmup_runs < 0:
        raise ValueError(f'warmup_runs cannot be negative, got {warmup_runs}')
    if precision not in PRECISIONS:
        raise ValueError(f'precision must be one of {sorted(PRECISIONS)}, got {precision}')

    dtype = PRECISIONS[precision]
    timed = copy.deepcopy(model).to(dtype) if dtype != DTYPE else model
    timed.eval()
    model_id = model_id if model_id is not None else model.cfg.block.variant.value
    generator = torch.Generator().manual_seed(seed)
    resolution = timer_resolution()

    rows = []
    timer_warning = False
    with torch.inference_mode():
        for duration in tqdm(durations, desc=f'rtf {model_id}', disable=not progress):
            frames = max(1, int(round(frame_rate * duration)))
            x = torch.randn(1, frames, model.cfg.c_in, generator=generator, dtype=DTYPE).to(dtype)
            for _ in range(warmup_runs):
                timed(x)
            times = []
            for _ in range(runs):
                start = time.perf_counter()
                timed(x)
                times.append(time.perf_counter() - start)
            row = RTFRow(model_id, float(duration), frames, times)
            if resolution > 0.01 * row.min_seconds:
                timer_warning = True
            rows.append(row)

    return RTFReport(rows, warmup_runs, runtime_mode(), precision, timer_warning)


def fit_loglog_slope(lengths: Sequence[float], times: Sequence[float]) -> float:
    """Exponent p of the power law time ~ T^p."""
    return float(np.polyfit(np.log(np.asarray(lengths, dtype=np.float64)),
                            np.log(np.asarray(times, dtype=np.float64)), 1)[0])


def probe_encoder(variant: Union[str, Variant], d_model: int) -> nn.Module:
    cfg = BlockConfig(Variant.parse(variant), d_model=d_model, n_blocks=1, mhsa_heads=4, dropout=0.)
    encoder = Encoder(cfg)
    encoder.eval()
    return encoder


class ComplexityTable:
    def __init__(self, times: pd.DataFrame):
        self.times = times

    @property
    def slopes(self) -> Dict[str, float]:
        return {variant: fit_loglog_slope(group['frames'], group['seconds'])
                for variant, group in self.times.groupby('variant', sort=False)}

    def pivot(self) -> pd.DataFrame:
        return self.times.pivot(index='frames', columns='variant', values='seconds')


def complexity_probe(variants: Sequence[Union[str, Variant]], lengths: Sequence[int], d_model: int = 64,
                     runs: int = 3, warmup_runs: int = 1, seed: int = 0, progress: bool = False) -> ComplexityTable:
    """Median forward time of a single block of each variant, all at the same width, over a grid of lengths."""
    generator = torch.Generator().manual_seed(seed)
    records = []
    for variant in variants:
        variant = Variant.parse(variant)
        encoder = probe_encoder(variant, d_model)
        with torch.inference_mode():
            for frames in tqdm(lengths, desc=f'probe {variant.value}', disable=not progress):
                x = torch.randn(1, frames, d_model, generator=generator, dtype=DTYPE)
                for _ in range(warmup_runs):
                    encoder(x)
                times = []
                for _ in range(max(1, runs)):
                    start = time.perf_counter()
                    encoder(x)
                    times.append(time.perf_counter() - start)
                records.append({'variant': variant.value, 'frames': int(frames), 'seconds': float(np.median(times))})
    return ComplexityTable(pd.DataFrame.from_records(records, columns=['variant', 'frames', 'seconds']))


def plot_rtf(report: RTFReport, loc: pathlib.Path, probe: Optional[ComplexityTable] = None):
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    frame = report.to_frame()
    panels = 2 if probe is not None else 1
    fig, axes = plt.subplots(1, panels, figsize=(6 * panels, 4), squeeze=False)

    ax = axes[0][0]
    models = list(dict.fromkeys(frame['model']))
    durations = sorted(set(frame['duration_s']))
    width = 0.8 / max(1, len(models))
    for i, m in enumerate(models):
        sub = frame[frame['model'] == m].set_index('duration_s').reindex(durations)
        offsets = np.arange(len(durations)) + (i - (len(models) - 1) / 2) * width
        ax.bar(offsets, sub['mean_rtf'], width, yerr=sub['std_rtf'], label=m)
    ax.set_xticks(np.arange(len(durations)))
    ax.set_xticklabels([f'{d:g}' for d in durations])
    ax.set_xlabel('duration (s)')
    ax.set_ylabel('real-time factor')
    ax.set_title(f'RTF ({report.mode}, float{report.precision})')
    ax.legend()

    if probe is not None:
        ax = axes[0][1]
        slopes = probe.slopes
        for variant, group in probe.times.groupby('variant', sort=False):
            ax.loglog(group['frames'], group['seconds'], marker='o', label=f'{variant} (slope {slopes[variant]:.2f})')
        ax.set_xlabel('frames')
        ax.set_ylabel('seconds per forward')
        ax.set_title('block forward time')
        ax.legend()

    fig.tight_layout()
    loc.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(loc)
    plt.close(fig)
