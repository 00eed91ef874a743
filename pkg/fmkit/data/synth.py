"""
Synthetic stand-in for front-end features.

Real utterances are independent order-2 autoregressive processes per channel
with a per-utterance spectral tilt across channels. Fake utterances carry the
same kind of process plus a faint sinusoid confined to a short window on a few
channels, so a detector has to find a local time-channel cue.
"""
import math
import multiprocessing as mp
import pathlib
from typing import Tuple, Optional, List, Dict

import numpy as np
from tqdm import tqdm

from fmkit.data.features import Manifest, write_feature_file, write_manifest
from fmkit.definitions import FRAME_RATE
from fmkit.models import Label, ManifestEntry

FEATURE_DIR = 'features'
DEFAULT_SPLITS = (('train', 1000, 1000), ('dev', 250, 250), ('test', 250, 250))


class ProcessSpec:
    def __init__(self, pole_radius: float = 0.9, pole_angle: float = math.pi / 8, tilt: float = 1.0,
                 burn_in: int = 200):
        if not 0. < pole_radius < 1.:
            raise ValueError(f'pole radius must be in (0, 1) for a stationary process, got {pole_radius}')
        self.pole_radius = pole_radius
        self.pole_angle = pole_angle
        self.tilt = tilt
        self.burn_in = burn_in

    @property
    def coefficients(self) -> Tuple[float, float]:
        return ar2_coefficients(self.pole_radius, self.pole_angle)


class ArtifactSpec:
    def __init__(self, amplitude: float = 0.3, window_fraction: float = 0.1, channel_fraction: float = 0.1,
                 freq_range: Tuple[float, float] = (0.05, 0.25)):
        if amplitude < 0:
            raise ValueError(f'artifact amplitude must not be negative, got {amplitude}')
        if not 0. < window_fraction <= 1. or not 0. < channel_fraction <= 1.:
            raise ValueError('artifact window and channel fractions must be in (0, 1]')
        self.amplitude = amplitude
        self.window_fraction = window_fraction
        self.channel_fraction = channel_fraction
        self.freq_range = freq_range


def ar2_coefficients(radius: float, angle: float) -> Tuple[float, float]:
    """x_t = a1 x_{t-1} + a2 x_{t-2} + e_t with complex poles r e^{±iθ}."""
    return 2 * radius * math.cos(angle), -radius * radius


def ar2_stationary_variance(a1: float, a2: float, noise_var: float = 1.) -> float:
    return noise_var * (1 - a2) / ((1 + a2) * ((1 - a2) ** 2 - a1 ** 2))


def channel_noise_std(channels: int, tilt: float) -> np.ndarray:
    position = np.linspace(-0.5, 0.5, channels) if channels > 1 else np.zeros(1)
    return np.exp(tilt * position)


def generate_real(frames: int, channels: int, rng: np.random.Generator,
                  process: ProcessSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Returns the (frames, channels) features and each channel's stationary std."""
    a1, a2 = process.coefficients
    tilt = rng.uniform(-process.tilt, process.tilt)
    noise_std = channel_noise_std(channels, tilt)
    total = process.burn_in + frames
    noise = rng.standard_normal((total, channels)) * noise_std
    x = np.zeros((total, channels))
    x[0] = noise[0]
    if total > 1:
        x[1] = a1 * x[0] + noise[1]
    for t in range(2, total):
        x[t] = a1 * x[t - 1] + a2 * x[t - 2] + noise[t]
    std = noise_std * math.sqrt(ar2_stationary_variance(a1, a2))
    return x[process.burn_in:], std


def inject_artifact(features: np.ndarray, channel_std: np.ndarray, rng: np.random.Generator,
                    artifact: ArtifactSpec) -> Tuple[np.ndarray, Tuple[int, int], np.ndarray]:
    frames, channels = features.shape
    width = min(frames, math.ceil(artifact.window_fraction * frames))
    count = min(channels, math.ceil(artifact.channel_fraction * channels))
    start = int(rng.integers(0, frames - width + 1))
    chosen = np.sort(rng.choice(channels, size=count, replace=False))
    freq = rng.uniform(*artifact.freq_range)
    phase = rng.uniform(0., 2 * math.pi)

    out = features.copy()
    steps = np.arange(width)
    wave = np.sin(2 * math.pi * freq * steps + phase)
    out[start:start + width, chosen] += artifact.amplitude * np.outer(wave, channel_std[chosen])
    return out, (start, start + width), chosen


class UtteranceJob:
    def __init__(self, record_id: str, label: Label, base_seed: np.random.SeedSequence,
                 artifact_seed: Optional[np.random.SeedSequence]):
        self.record_id = record_id
        self.label = label
        self.base_seed = base_seed
        self.artifact_seed = artifact_seed


class Synthesizer:
    def __init__(self, frame_range: Tuple[int, int], channels: int, process: ProcessSpec, artifact: ArtifactSpec):
        self.frame_range = frame_range
        self.channels = channels
        self.process = process
        self.artifact = artifact

    def __call__(self, job: UtteranceJob) -> Tuple[str, np.ndarray]:
        rng = np.random.default_rng(job.base_seed)
        frames = int(rng.integers(self.frame_range[0], self.frame_range[1] + 1))
        features, std = generate_real(frames, self.channels, rng, self.process)
        if job.label == Label.FAKE:
            features, _, _ = inject_artifact(features, std, np.random.default_rng(job.artifact_seed), self.artifact)
        return job.record_id, features


def plan_jobs(n_real: int, n_fake: int, seed: int, paired: bool, prefix: str = '') -> List[UtteranceJob]:
    """
    Each utterance owns a child of the root seed. In paired mode fake i reuses
    real i's base seed, so the two differ only by the artifact.
    """
    if paired and n_fake > n_real:
        raise ValueError(f'paired synthesis needs n_fake <= n_real, got {n_fake} > {n_real}')
    children = np.random.SeedSequence(seed).spawn(n_real + 2 * n_fake)
    jobs = [UtteranceJob(f'{prefix}real_{i:05d}', Label.REAL, children[i], None) for i in range(n_real)]
    for i in range(n_fake):
        base = children[i] if paired else children[n_real + i]
        jobs.append(UtteranceJob(f'{prefix}fake_{i:05d}', Label.FAKE, base, children[n_real + n_fake + i]))
    return jobs


def synth_dataset(out_dir: pathlib.Path, n_real: int, n_fake: int, frame_range: Tuple[int, int] = (100, 400),
                  channels: int = 32, seed: int = 0, artifact: Optional[ArtifactSpec] = None,
                  process: Optional[ProcessSpec] = None, frame_rate: int = FRAME_RATE, paired: bool = False,
                  name: str = 'data', workers: int = 0, progress: bool = True) -> Manifest:
    if n_real < 1 or n_fake < 1:
        raise ValueError(f'need at least one utterance per class, got {n_real} real and {n_fake} fake')
    lo, hi = frame_range
    if lo < 1 or hi < lo:
        raise ValueError(f'degenerate frame range {frame_range}')
    if channels < 1:
        raise ValueError(f'channels must be positive, got {channels}')

    synthesizer = Synthesizer(frame_range, channels, process if process is not None else ProcessSpec(),
                              artifact if artifact is not None else ArtifactSpec())
    jobs = plan_jobs(n_real, n_fake, seed, paired, prefix=f'{name}_')

    if workers > 1:
        with mp.Pool(workers) as pool:
            results = list(tqdm(pool.imap(synthesizer, jobs, chunksize=16), total=len(jobs),
                                desc=f'synth {name}', disable=not progress))
    else:
        results = [synthesizer(job) for job in tqdm(jobs, desc=f'synth {name}', disable=not progress)]

    entries = []
    for job, (record_id, features) in zip(jobs, results):
        rel = f'{FEATURE_DIR}/{record_id}.fmfe'
        write_feature_file(out_dir / rel, features)
        entries.append(ManifestEntry(record_id, rel, job.label, features.shape[0], features.shape[1]))

    manifest = Manifest(entries, frame_rate, out_dir)
    write_manifest(out_dir / f'{name}.tsv', manifest)
    return manifest


def synth_default_splits(out_dir: pathlib.Path, seed: int = 0, channels: int = 32,
                         frame_range: Tuple[int, int] = (100, 400), artifact: Optional[ArtifactSpec] = None,
                         frame_rate: int = FRAME_RATE, workers: int = 0, progress: bool = True) -> Dict[str, Manifest]:
    """Balanced 2000 / 500 / 500 train, dev and test splits with independent seeds."""
    seeds = np.random.SeedSequence(seed).generate_state(len(DEFAULT_SPLITS))
    manifests = {}
    for (name, n_real, n_fake), split_seed in zip(DEFAULT_SPLITS, seeds):
        manifests[name] = synth_dataset(out_dir, n_real, n_fake, frame_range, channels, int(split_seed), artifact,
                                        frame_rate=frame_rate, name=name, workers=workers, progress=progress)
    return manifests
