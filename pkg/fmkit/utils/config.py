import copy
import json
import os
import pathlib
from types import SimpleNamespace
from typing import Dict, Any, Optional, List

import jsonpickle


class ConfigError(Exception):
    pass


DEFAULTS: Dict[str, Dict[str, Any]] = {
    'run': {
        'seed': 0,
        'deterministic': False,
        'threads': None,
        'out': None,
    },
    'data': {
        'root': './data',
        'frame_rate': 50,
        'channels': 32,
        'min_duration': 2.,
        'max_duration': 8.,
        'n_real': 1000,
        'n_fake': 1000,
        'amplitude': 0.3,
        'paired': False,
        'workers': 0,
        'bucket_edges': [3., 4., 5., 6.],
    },
    'block': {
        'variant': 'pn-bimamba',
        'd_model': 144,
        'n_blocks': 4,
        'expand': 2,
        'd_state': 16,
        'd_conv': 4,
        'conv_kernel': 31,
        'ffn_mult': 4,
        'mhsa_heads': 4,
        'dropout': 0.1,
        'ssm_skip': True,
        'tie_weights': False,
        'strict_residual': True,
        'disable_pre_ln': False,
        'disable_ffn': False,
        'disable_bidirectional': False,
        'disable_pooling': False,
    },
    'model': {
        'head_hidden': 80,
        'seed': 0,
    },
    'train': {
        'preset': 'desk',
        'lr': None,
        'weight_decay': 1e-4,
        'batch_size': 32,
        'max_epochs': 100,
        'patience': 7,
        'class_weights': None,
        'avg_top_k': 5,
        'segment_s': None,
    },
    'bench': {
        'variants': ['pn-bimamba', 'transformer'],
        'durations': [1., 2., 3., 4., 5., 6.],
        'runs': 100,
        'warmup_runs': 10,
        'lengths': [256, 512, 1024, 2048, 4096, 8192],
        'probe_d_model': 64,
        'probe_runs': 3,
        'precision': 32,
        'parallel': False,
    },
}

# older names that still resolve to their current key
ALIASES: Dict[str, str] = {
    'block.strict_eq16': 'block.strict_residual',
}

TRUE_STRINGS = {'true', '1', 'yes', 'on'}
FALSE_STRINGS = {'false', '0', 'no', 'off'}


def coerce_value(key: str, raw: Any, default: Any) -> Any:
    """Converts a command-line or file value to the type of the matching default."""
    if not isinstance(raw, str):
        if isinstance(default, bool) and not isinstance(raw, bool):
            raise ConfigError(f'{key} expects a boolean, got {raw!r}')
        if isinstance(default, float) and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if default is not None and raw is not None and not isinstance(default, list) \
                and not isinstance(raw, type(default)):
            raise ConfigError(f'{key} expects {type(default).__name__}, got {raw!r}')
        return raw

    text = raw.strip()
    if text.lower() in ('null', 'none'):
        return None
    try:
        if isinstance(default, bool):
            if text.lower() in TRUE_STRINGS:
                return True
            if text.lower() in FALSE_STRINGS:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            if text.startswith('['):
                return json.loads(text)
            items = [t.strip() for t in text.split(',') if t.strip()]
            element = type(default[0]) if len(default) > 0 else float
            return [element(t) for t in items]
        if isinstance(default, str):
            return text
    except ValueError:
        raise ConfigError(f'cannot interpret {raw!r} for {key}')

    # no typed default, take JSON if it parses
    try:
        return json.loads(text)
    except ValueError:
        return text


class Config:
    def __init__(self, sjson: Optional[Dict[str, Dict[str, Any]]] = None):
        self.values = copy.deepcopy(DEFAULTS)
        if sjson is not None:
            self.update(sjson)

    def update(self, sjson: Dict[str, Dict[str, Any]]):
        for section, values in sjson.items():
            if section not in DEFAULTS:
                raise ConfigError(f'unknown config section {section!r}')
            if not isinstance(values, dict):
                raise ConfigError(f'config section {section!r} must be an object')
            for key, value in values.items():
                self.set(f'{section}.{key}', value)

    def override(self, assignments: List[str]):
        for assignment in assignments:
            if '=' not in assignment:
                raise ConfigError(f'override {assignment!r} is not of the form section.key=value')
            key, value = assignment.split('=', 1)
            self.set(key.strip(), value)

    def _split(self, dotted: str):
        dotted = ALIASES.get(dotted, dotted)
        parts = dotted.split('.')
        if len(parts) != 2:
            raise ConfigError(f'config key {dotted!r} must be section.key')
        section, key = parts
        if section not in DEFAULTS:
            raise ConfigError(f'unknown config section {section!r}')
        if key not in DEFAULTS[section]:
            raise ConfigError(f'unknown config key {dotted!r}')
        return section, key

    def get(self, dotted: str) -> Any:
        section, key = self._split(dotted)
        return self.values[section][key]

    def set(self, dotted: str, value: Any):
        section, key = self._split(dotted)
        self.values[section][key] = coerce_value(dotted, value, DEFAULTS[section][key])

    def section(self, name: str) -> SimpleNamespace:
        if name not in self.values:
            raise ConfigError(f'unknown config section {name!r}')
        return SimpleNamespace(**self.values[name])

    def __getattr__(self, item: str) -> SimpleNamespace:
        if item in DEFAULTS:
            return self.section(item)
        raise AttributeError(item)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return copy.deepcopy(self.values)

    def write(self, loc: pathlib.Path):
        loc.parent.mkdir(parents=True, exist_ok=True)
        with open(loc, 'w') as fp:
            fp.write(jsonpickle.encode(self.values, unpicklable=False, indent=2))
            fp.write('\n')


CONFIG_INSTANCE: Optional[Config] = None


def read_config(loc: Optional[pathlib.Path] = None, overrides: Optional[List[str]] = None) -> Config:
    global CONFIG_INSTANCE

    if CONFIG_INSTANCE is None or loc is not None or overrides:
        config = Config()
        if loc is not None:
            if not os.path.exists(loc):
                raise ConfigError(f'the config file {loc} doesn\'t exist, please see the README for the config format')
            with open(loc, 'r') as fp:
                try:
                    d = json.load(fp)
                except ValueError as e:
                    raise ConfigError(f'the config file {loc} is not valid JSON: {e}')
            if not isinstance(d, dict):
                raise ConfigError(f'the config file {loc} must hold a JSON object')
            config.update(d)
        if overrides:
            config.override(overrides)
        CONFIG_INSTANCE = config

    return CONFIG_INSTANCE


def reset_config():
    global CONFIG_INSTANCE
    CONFIG_INSTANCE = None
