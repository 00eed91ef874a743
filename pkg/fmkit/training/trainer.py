import datetime as dt
import math
import pathlib
from collections import OrderedDict
from typing import List, Optional, Tuple, Dict, Any, Sequence

import jsonpickle
import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from fmkit.data.dataset import FeatureDataset, collate_features
from fmkit.definitions import DTYPE, DEVICE, FRAME_RATE
from fmkit.metrics.eer import ScoreSet, compute_eer
from fmkit.models import Label
from fmkit.pipeline.checkpoint import Checkpoint, save_checkpoint, load_parameters
from fmkit.pipeline.model import DetectorModel
from fmkit.training.optim import DecoupledAdam

PRESETS: Dict[str, Dict[str, Any]] = {
    'desk': {'lr': 1e-4, 'segment_s': None},
    'full': {'lr': 1e-6, 'segment_s': 4.175},
}

METRICS_FILE = 'metrics.jsonl'
AVERAGED_CHECKPOINT = 'model_avg.ckpt'


class DivergenceError(Exception):
    def __init__(self, epoch: int, message: str = ''):
        super().__init__(message if message else f'training diverged in epoch {epoch}')
        self.epoch = epoch


class EmptyBatchError(ValueError):
    pass


class TrainConfig:
    def __init__(self, lr: float = 1e-6, weight_decay: float = 1e-4, batch_size: int = 32, max_epochs: int = 100,
                 patience: int = 7, class_weights: Optional[Tuple[float, float]] = None, avg_top_k: int = 5,
                 segment_s: Optional[float] = None, seed: int = 0, workers: int = 0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.class_weights = None if class_weights is None else tuple(float(w) for w in class_weights)
        self.avg_top_k = avg_top_k
        self.segment_s = segment_s
        self.seed = seed
        self.workers = workers

    def validate(self):
        # lr = 0 is accepted so a run can be replayed without moving the weights
        if self.lr < 0:
            raise ValueError(f'learning rate must be non-negative, got {self.lr}')
        if self.patience < 1:
            raise ValueError(f'patience must be at least 1, got {self.patience}')
        if self.avg_top_k < 1:
            raise ValueError(f'avg_top_k must be at least 1, got {self.avg_top_k}')
        if self.batch_size < 1:
            raise ValueError(f'batch size must be at least 1, got {self.batch_size}')
        if self.max_epochs < 0:
            raise ValueError(f'max_epochs cannot be negative, got {self.max_epochs}')
        if self.class_weights is not None and (len(self.class_weights) != Label.LABEL_COUNT.value or
                                               min(self.class_weights) <= 0):
            raise ValueError(f'class weights must be two positive numbers, got {self.class_weights}')
        if self.segment_s is not None and self.segment_s <= 0:
            raise ValueError(f'segment length must be positive, got {self.segment_s}')

    def segment_frames(self, frame_rate: int = FRAME_RATE) -> Optional[int]:
        if self.segment_s is None:
            return None
        return max(1, int(math.floor(self.segment_s * frame_rate)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'lr': self.lr,
            'weight_decay': self.weight_decay,
            'batch_size': self.batch_size,
            'max_epochs': self.max_epochs,
            'patience': self.patience,
            'class_weights': None if self.class_weights is None else list(self.class_weights),
            'avg_top_k': self.avg_top_k,
            'segment_s': self.segment_s,
            'seed': self.seed,
            'workers': self.workers,
        }

    @staticmethod
    def from_dict(d: Dict[str, Any], seed: int = 0, workers: int = 0) -> 'TrainConfig':
        """Resolves the named preset, then lets every explicitly set key win."""
        preset = d.get('preset', 'desk')
        if preset not in PRESETS:
            raise ValueError(f'unknown training preset {preset!r}, expected one of {", ".join(PRESETS)}')
        values = dict(PRESETS[preset])
        for k, v in d.items():
            if k == 'preset' or (v is None and k in PRESETS[preset]):
                continue
            values[k] = v
        values.setdefault('seed', seed)
        values.setdefault('workers', workers)
        cfg = TrainConfig(**values)
        cfg.validate()
        return cfg


class EpochRecord:
    def __init__(self, epoch: int, train_loss: float, dev_loss: float, dev_eer: float, seconds: float = 0.):
        self.epoch = epoch
        self.train_loss = train_loss
        self.dev_loss = dev_loss
        self.dev_eer = dev_eer
        self.seconds = seconds

    def to_dict(self) -> Dict[str, Any]:
        return {
            'epoch': self.epoch,
            'train_loss': self.train_loss,
            'dev_loss': self.dev_loss,
            'dev_eer': self.dev_eer,
        }

    def __repr__(self) -> str:
        return f'Epoch {self.epoch}: loss: {self.train_loss:>7f}  dev loss: {self.dev_loss:>7f}  ' \
               f'dev EER: {100 * self.dev_eer:.2f}% @ {self.seconds:.1f} sec/epoch'


class EarlyStopping:
    """Stops once the dev loss has not decreased for ``patience`` consecutive epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


class TrainResult:
    def __init__(self, history: List[EpochRecord], checkpoint: Optional[Checkpoint], stopped_early: bool,
                 averaged_epochs: List[int]):
        self.history = history
        self.checkpoint = checkpoint
        self.stopped_early = stopped_early
        self.averaged_epochs = averaged_epochs

    @property
    def epochs(self) -> int:
        return len(self.history)


class EvalOutput:
    def __init__(self, loss: float, scores: np.ndarray, labels: np.ndarray, ids: List[str]):
        self.loss = loss
        self.scores = scores
        self.labels = labels
        self.ids = ids

    @property
    def score_set(self) -> ScoreSet:
        return ScoreSet.from_labels(self.scores, self.labels)


def class_weights_from_labels(labels: Sequence[int]) -> Tuple[float, float]:
    """Each class is weighted by the frequency of the other one."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError('cannot derive class weights from an empty split')
    freq_real = float((labels == Label.REAL.value).mean())
    freq_fake = float((labels == Label.FAKE.value).mean())
    if freq_real == 0. or freq_fake == 0.:
        raise ValueError('both classes are needed to derive class weights')
    return 1. - freq_real, 1. - freq_fake


def wce_loss(logits: torch.Tensor, labels: torch.Tensor,
             weights: Optional[Tuple[float, float]] = None) -> torch.Tensor:
    if labels.numel() == 0:
        raise EmptyBatchError('cannot compute a loss over an empty batch')
    if weights is None:
        return F.cross_entropy(logits, labels)
    return F.cross_entropy(logits, labels, weight=torch.tensor(weights, dtype=logits.dtype, device=logits.device))


def evaluate(model: DetectorModel, loader: DataLoader,
             weights: Optional[Tuple[float, float]] = None) -> EvalOutput:
    was_training = model.training
    model.eval()
    total, count = 0., 0
    scores, labels, ids = [], [], []
    with torch.no_grad():
        for batch in loader:
            batch = batch.to(DEVICE)
            pred = model(batch.features, batch.lengths)
            total += wce_loss(pred.logits, batch.labels, weights).item() * len(batch)
            count += len(batch)
            scores.append(pred.score.cpu().numpy())
            labels.append(batch.labels.cpu().numpy())
            ids.extend(batch.ids)
    model.train(was_training)
    if count == 0:
        raise EmptyBatchError('evaluation split is empty')
    return EvalOutput(total / count, np.concatenate(scores), np.concatenate(labels), ids)


def average_top_k(checkpoints: List[Checkpoint], dev_eers: Sequence[float], k: int) -> Checkpoint:
    """
    Elementwise parameter mean of the ``k`` checkpoints with the lowest dev EER.
    Checkpoints are given in epoch order and ties go to the earlier epoch.
    """
    if k < 1:
        raise ValueError(f'k must be at least 1, got {k}')
    if len(checkpoints) != len(dev_eers):
        raise ValueError(f'{len(checkpoints)} checkpoints but {len(dev_eers)} EERs')
    if k > len(checkpoints):
        raise ValueError(f'cannot average {k} of {len(checkpoints)} checkpoints')

    chosen = sorted(range(len(checkpoints)), key=lambda i: (dev_eers[i], i))[:k]
    chosen.sort()
    first = checkpoints[chosen[0]]
    params = OrderedDict()
    for name in first.params.keys():
        params[name] = torch.stack([checkpoints[i].params[name].to(DTYPE) for i in chosen]).mean(dim=0)

    epochs = [checkpoints[i].meta.get('epoch', i + 1) for i in chosen]
    return Checkpoint(first.config, params, {'averaged_epochs': epochs,
                                             'dev_eers': [float(dev_eers[i]) for i in chosen]})


def make_loader(ds: FeatureDataset, batch_size: int, shuffle: bool = False, seed: int = 0,
                workers: int = 0) -> DataLoader:
    generator = torch.Generator().manual_seed(seed) if shuffle else None
    return DataLoader(ds, batch_size=batch_size, shuffle=shuffle, generator=generator,
                      collate_fn=collate_features, num_workers=workers)


def append_metrics(loc: pathlib.Path, record: EpochRecord):
    with open(loc, 'a') as fp:
        fp.write(jsonpickle.encode(record.to_dict(), unpicklable=False))
        fp.write('\n')


def train(model: DetectorModel, train_set: FeatureDataset, dev_set: FeatureDataset, cfg: TrainConfig,
          run_dir: Optional[pathlib.Path] = None, progress: bool = True) -> TrainResult:
    """
    Weighted cross-entropy with Adam, early stopping on the dev loss, and a final
    average of the ``avg_top_k`` epochs with the lowest dev EER. The model is left
    holding the averaged weights.
    """
    cfg.validate()
    if len(train_set) == 0 or len(dev_set) == 0:
        raise ValueError('training and dev splits must be non-empty')
    weights = cfg.class_weights if cfg.class_weights is not None else class_weights_from_labels(train_set.labels)
    dev_labels = set(dev_set.labels)
    if len(dev_labels) < Label.LABEL_COUNT.value:
        raise ValueError('the dev split needs both real and fake utterances for its EER')

    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_loc = run_dir / METRICS_FILE
        if metrics_loc.exists():
            metrics_loc.unlink()

    train_loader = make_loader(train_set, cfg.batch_size, shuffle=True, seed=cfg.seed, workers=cfg.workers)
    dev_loader = make_loader(dev_set, cfg.batch_size, workers=cfg.workers)

    model.to(DEVICE)
    optimizer = DecoupledAdam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience)
    history: List[EpochRecord] = []
    kept: List[Tuple[float, int, Checkpoint]] = []
    stopped_early = False

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(1, cfg.max_epochs + 1):
            start = dt.datetime.now()
            model.train()
            total, count = 0., 0
            for batch in tqdm(train_loader, desc=f'epoch {epoch}', disable=not progress, leave=False):
                batch = batch.to(DEVICE)
                pred = model(batch.features, batch.lengths)
                loss = wce_loss(pred.logits, batch.labels, weights)
                if not torch.isfinite(loss):
                    raise DivergenceError(epoch)

                optimizer.zero_grad()
                loss.backward()
                optimizer.step()

                total += loss.item() * len(batch)
                count += len(batch)

            dev = evaluate(model, dev_loader, weights)
            if not math.isfinite(dev.loss):
                raise DivergenceError(epoch, f'dev loss is not finite after epoch {epoch}')
            dev_eer = compute_eer(dev.score_set).eer
            record = EpochRecord(epoch, total / count, dev.loss, dev_eer, (dt.datetime.now() - start).total_seconds())
            history.append(record)
            if progress:
                print(record)
            if run_dir is not None:
                append_metrics(run_dir / METRICS_FILE, record)

            kept.append((dev_eer, epoch, Checkpoint.from_model(model, {'epoch': epoch, 'dev_eer': dev_eer})))
            kept.sort(key=lambda c: (c[0], c[1]))
            del kept[cfg.avg_top_k:]

            if stopper.update(dev.loss):
                stopped_early = epoch < cfg.max_epochs
                if progress:
                    print(f'dev loss has not improved for {cfg.patience} epochs, stopping')
                break

    if len(kept) == 0:
        return TrainResult(history, None, False, [])

    kept.sort(key=lambda c: c[1])
    averaged = average_top_k([c for _, _, c in kept], [e for e, _, _ in kept], len(kept))
    averaged.meta['train'] = cfg.to_dict()
    load_parameters(model, averaged.params)
    if run_dir is not None:
        for _, epoch, ckpt in kept:
            save_checkpoint(run_dir / 'checkpoints' / f'epoch_{epoch:03d}.ckpt', ckpt)
        save_checkpoint(run_dir / AVERAGED_CHECKPOINT, averaged)
    return TrainResult(history, averaged, stopped_early, averaged.meta['averaged_epochs'])
