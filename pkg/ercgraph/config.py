"""
File-backed run configuration.

A config file is one JSON object with flat keys: every :class:`TrainConfig`
field plus the run-level keys of :class:`RunConfig`. Unknown keys are
rejected. Relative paths are resolved against the config file's directory.
"""

import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Tuple

from .cluster import NEIGHBORHOOD_VARIANTS
from .errors import ConfigError
from .graph import canonical_modalities
from .model import TrainConfig

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
ALL_MODALITY_SUBSETS = (('t',), ('v',), ('a',), ('t', 'v'), ('t', 'a'), ('v', 'a'), ('t', 'v', 'a'))


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: Optional[str] = None
    synthetic: Optional[str] = None
    data_seed: int = 0
    splits: Optional[str] = None
    split_ratios: Tuple[float, ...] = (0.8, 0.1, 0.1)
    output_dir: str = 'runs/default'
    eval_split: str = 'test'
    gamma_sweep: Tuple[int, ...] = (2, 4, 6, 8, 10)
    layer_sweep: Tuple[int, ...] = (1, 2, 3, 4)
    neighborhood_sweep: Tuple[str, ...] = tuple(NEIGHBORHOOD_VARIANTS)
    modality_sweep: Tuple[Tuple[str, ...], ...] = ALL_MODALITY_SUBSETS
    ablation_seeds: Tuple[int, ...] = (0,)
    diagnostics: bool = False

    def __post_init__(self):
        if self.eval_split not in SPLITS:
            raise ConfigError(f'eval_split must be one of {SPLITS}, got {self.eval_split!r}')
        if len(self.split_ratios) != 3:
            raise ConfigError('split_ratios needs three entries (train, val, test)')
        if any(g < 1 for g in self.gamma_sweep):
            raise ConfigError('gamma_sweep values must be positive')
        if any(k < 1 for k in self.layer_sweep):
            raise ConfigError('layer_sweep values must be positive')
        unknown = [v for v in self.neighborhood_sweep if v not in NEIGHBORHOOD_VARIANTS]
        if unknown:
            raise ConfigError(f'unknown neighborhood variants in sweep: {unknown}')
        if not self.ablation_seeds:
            raise ConfigError('ablation_seeds must not be empty')
        object.__setattr__(
            self, 'modality_sweep', tuple(canonical_modalities(s) for s in self.modality_sweep)
        )

    @staticmethod
    def run_keys():
        return [f.name for f in fields(RunConfig) if f.name != 'train']

    def to_dict(self):
        data = self.train.to_dict()
        for name in self.run_keys():
            value = getattr(self, name)
            if name == 'modality_sweep':
                value = [list(s) for s in value]
            elif isinstance(value, tuple):
                value = list(value)
            data[name] = value
        return data

    @classmethod
    def from_dict(cls, data, base_dir=None):
        if not isinstance(data, dict):
            raise ConfigError('a config must be a JSON object')
        train_keys = {f.name for f in fields(TrainConfig)}
        run_keys = set(cls.run_keys())
        unknown = sorted(set(data) - train_keys - run_keys)
        if unknown:
            raise ConfigError(f'unknown config keys: {unknown}')
        run_values = {}
        for key in run_keys & set(data):
            value = data[key]
            if key == 'modality_sweep':
                value = tuple(tuple(s) for s in value)
            elif isinstance(value, list):
                value = tuple(value)
            if key in ('dataset', 'synthetic', 'splits', 'output_dir') and value and base_dir:
                value = os.path.join(base_dir, value) if not os.path.isabs(value) else value
            run_values[key] = value
        train = TrainConfig.from_dict({k: v for k, v in data.items() if k in train_keys})
        return cls(train=train, **run_values)

    @classmethod
    def load(cls, path):
        """
        :raises ConfigError: unreadable JSON, unknown keys or invalid values.
        """
        with open(path, 'r', encoding='utf-8') as infile:
            try:
                data = json.load(infile)
            except json.JSONDecodeError as e:
                raise ConfigError(f'{path}: {e.msg} at line {e.lineno}') from e
        config = cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))
        logger.debug('loaded config %s', path)
        return config

    def with_overrides(self, **overrides):
        """Returns a copy with every non-None override applied; training keys go to ``train``."""
        overrides = {k: v for k, v in overrides.items() if v is not None}
        train_keys = {f.name for f in fields(TrainConfig)}
        train_changes = {k: v for k, v in overrides.items() if k in train_keys}
        run_changes = {k: v for k, v in overrides.items() if k not in train_keys}
        unknown = sorted(set(run_changes) - set(self.run_keys()))
        if unknown:
            raise ConfigError(f'unknown config keys: {unknown}')
        train = self.train.replace(**train_changes) if train_changes else self.train
        return replace(self, train=train, **run_changes)
