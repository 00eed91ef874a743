import hashlib
import os
import pathlib
import random as rng
from typing import Optional

import numpy as np
import torch

from fmkit.utils.config import ConfigError

THREADS_ENV = 'FMKIT_THREADS'
LOCK_NAME = '.fmkit.lock'


class LockError(Exception):
    pass


def thread_cap() -> Optional[int]:
    value = os.environ.get(THREADS_ENV)
    if value is None or value.strip() == '':
        return None
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError(f'{THREADS_ENV} must be an integer, got {value!r}')
    return max(1, threads)


def seed_everything(seed: int):
    rng.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def configure_runtime(seed: Optional[int] = None, deterministic: bool = False,
                      threads: Optional[int] = None) -> str:
    """
    Seeds every RNG in use and sets torch's threading and determinism mode.
    Returns the mode name recorded in run reports.
    """
    if seed is not None:
        seed_everything(seed)

    torch.use_deterministic_algorithms(deterministic)
    if deterministic:
        torch.set_num_threads(1)
    else:
        cap = thread_cap()
        if threads is not None:
            torch.set_num_threads(threads if cap is None else min(threads, cap))
        elif cap is not None:
            torch.set_num_threads(cap)

    return runtime_mode()


def runtime_mode() -> str:
    if torch.are_deterministic_algorithms_enabled() or torch.get_num_threads() == 1:
        return 'deterministic'
    return 'parallel'


def file_checksum(loc: pathlib.Path) -> str:
    digest = hashlib.sha256()
    with open(loc, 'rb') as fp:
        for chunk in iter(lambda: fp.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


class RunLock:
    """Exclusive claim on an output directory for the lifetime of one run."""

    def __init__(self, out_dir: pathlib.Path):
        self.out_dir = out_dir
        self.loc = out_dir / LOCK_NAME
        self.held = False

    def __enter__(self) -> 'RunLock':
        self.out_dir.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.loc, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(f'{self.out_dir} is in use by another run (remove {self.loc} if it is stale)')
        with os.fdopen(fd, 'w') as fp:
            fp.write(f'{os.getpid()}\n')
        self.held = True
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.held:
            os.remove(self.loc)
            self.held = False
