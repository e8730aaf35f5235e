"""
Dataset ingestion, synthetic conversation generation and split management.

On disk a dataset is JSON Lines, one conversation per line::

    {"id": "c1", "utterances": [{"id": "c1_u0", "speaker": "A", "label": "happy",
                                 "t": [...], "v": [...], "a": [...]}]}

Labels are strings; the class vocabulary is the sorted set of labels, so
class indices are deterministic. Splits live in a separate JSON object
``{"train": [ids], "val": [ids], "test": [ids]}``.
"""

import json
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Mapping, Optional, Tuple

import numpy as np

from .errors import ArgumentError, ConfigError, DimensionError, ParseError, SchemaError
from .graph import MODALITIES
from .numeric import DTYPE, substream

logger = logging.getLogger(__name__)

SPLIT_NAMES = ('train', 'val', 'test')
TASKS = ('prototype', 'long_range')


@dataclass(frozen=True)
class Utterance:
    id: str
    label: int
    features: Mapping[str, np.ndarray]
    speaker: Optional[str] = None


@dataclass(frozen=True)
class Conversation:
    id: str
    utterances: Tuple[Utterance, ...]

    def __len__(self):
        return len(self.utterances)

    def modality_matrix(self, modality):
        return np.stack([u.features[modality] for u in self.utterances])

    @property
    def labels(self):
        return np.array([u.label for u in self.utterances], dtype=int)


@dataclass(frozen=True)
class Dataset:
    """
    Conversations plus the label vocabulary, per-modality dims and a split
    assignment that partitions the conversation ids.
    """
    labels: Tuple[str, ...]
    dims: Mapping[str, int]
    conversations: Tuple[Conversation, ...]
    splits: Mapping[str, Tuple[str, ...]] = field(default_factory=dict)

    @property
    def n_classes(self):
        return len(self.labels)

    def __len__(self):
        return len(self.conversations)

    def get(self, conversation_id):
        for conversation in self.conversations:
            if conversation.id == conversation_id:
                return conversation
        raise ArgumentError(f'no conversation {conversation_id!r}')

    def split(self, name):
        """Conversations of split ``name`` in dataset order; all of them if no splits are set."""
        if not self.splits:
            return list(self.conversations) if name == 'train' else []
        if name not in SPLIT_NAMES:
            raise ArgumentError(f'unknown split {name!r}')
        wanted = set(self.splits.get(name, ()))
        return [c for c in self.conversations if c.id in wanted]

    def with_splits(self, splits):
        ids = [c.id for c in self.conversations]
        seen = []
        for name, members in splits.items():
            if name not in SPLIT_NAMES:
                raise SchemaError(f'unknown split name {name!r}')
            seen.extend(members)
        unknown = sorted(set(seen) - set(ids))
        if unknown:
            raise SchemaError(f'splits name unknown conversations {unknown}')
        if len(seen) != len(set(seen)) or set(seen) != set(ids):
            raise SchemaError('splits must assign every conversation to exactly one split')
        normalized = {name: tuple(splits.get(name, ())) for name in SPLIT_NAMES}
        return Dataset(self.labels, self.dims, self.conversations, normalized)


def _features(record, modality, utterance_id, line_no):
    if modality not in record:
        raise SchemaError(f'line {line_no}: utterance {utterance_id} is missing modality {modality!r}')
    values = record[modality]
    if not isinstance(values, list) or not values:
        raise SchemaError(f'line {line_no}: utterance {utterance_id} field {modality!r} must be a non-empty list')
    if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in values):
        raise SchemaError(f'line {line_no}: utterance {utterance_id} field {modality!r} holds non-numbers')
    arr = np.asarray(values, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f'line {line_no}: utterance {utterance_id} field {modality!r} holds NaN or Inf')
    return arr


def _parse_conversation(record, line_no):
    if not isinstance(record, dict):
        raise SchemaError(f'line {line_no}: a conversation must be a JSON object')
    conversation_id = record.get('id')
    utterances = record.get('utterances')
    if not isinstance(conversation_id, str) or not conversation_id:
        raise SchemaError(f'line {line_no}: conversation id must be a non-empty string')
    if not isinstance(utterances, list) or not utterances:
        raise SchemaError(f'line {line_no}: conversation {conversation_id} needs a non-empty utterances list')
    parsed = []
    for k, utt in enumerate(utterances):
        if not isinstance(utt, dict):
            raise SchemaError(f'line {line_no}: utterance {k} of {conversation_id} must be an object')
        utterance_id = utt.get('id', f'{conversation_id}#{k}')
        label = utt.get('label')
        if not isinstance(label, str):
            raise SchemaError(f'line {line_no}: utterance {utterance_id} needs a string label')
        speaker = utt.get('speaker')
        features = {m: _features(utt, m, utterance_id, line_no) for m in MODALITIES}
        parsed.append((str(utterance_id), label, features, speaker))
    return conversation_id, parsed


def load_dataset(path, labels=None):
    """
    Loads and validates a JSONL dataset.

    :param str path: dataset file.
    :param labels: optional fixed vocabulary; labels outside it are rejected.
    :raises ParseError: a line is not JSON.
    :raises SchemaError: missing fields, non-finite features or unknown labels.
    :raises DimensionError: feature dims vary across utterances.
    :rtype: Dataset
    """
    raw = []
    with open(path, 'r', encoding='utf-8') as infile:
        for line_no, line in enumerate(infile, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f'line {line_no}: {e.msg}') from e
            raw.append(_parse_conversation(record, line_no))
    if not raw:
        raise SchemaError(f'{path} holds no conversations')
    dims = {}
    seen_ids = set()
    for conversation_id, utterances in raw:
        if conversation_id in seen_ids:
            raise SchemaError(f'duplicate conversation id {conversation_id}')
        seen_ids.add(conversation_id)
        for utterance_id, _, features, _ in utterances:
            for m, arr in features.items():
                expected = dims.setdefault(m, arr.size)
                if arr.size != expected:
                    raise DimensionError(
                        f'utterance {utterance_id} modality {m!r} has dim {arr.size}, expected {expected}'
                    )
    if labels is None:
        labels = tuple(sorted({label for _, utts in raw for _, label, _, _ in utts}))
    else:
        labels = tuple(labels)
    index = {label: k for k, label in enumerate(labels)}
    conversations = []
    for conversation_id, utterances in raw:
        built = []
        for utterance_id, label, features, speaker in utterances:
            if label not in index:
                raise SchemaError(f'utterance {utterance_id} has unknown label {label!r}')
            built.append(Utterance(utterance_id, index[label], features, speaker))
        conversations.append(Conversation(conversation_id, tuple(built)))
    logger.info('loaded %d conversations, %d classes from %s', len(conversations), len(labels), path)
    return Dataset(labels, dims, tuple(conversations))


def save_dataset(dataset, path):
    """Writes ``dataset`` as JSONL; floats are written in round-trip exact form."""
    with open(path, 'w', encoding='utf-8') as outfile:
        for conversation in dataset.conversations:
            record = {
                'id': conversation.id,
                'utterances': [
                    {
                        'id': u.id,
                        'speaker': u.speaker,
                        'label': dataset.labels[u.label],
                        **{m: [float(x) for x in u.features[m]] for m in MODALITIES},
                    }
                    for u in conversation.utterances
                ],
            }
            outfile.write(json.dumps(record, allow_nan=False) + '\n')


def load_splits(path):
    with open(path, 'r', encoding='utf-8') as infile:
        try:
            data = json.load(infile)
        except json.JSONDecodeError as e:
            raise ParseError(f'{path}: {e.msg}') from e
    if not isinstance(data, dict) or not all(isinstance(v, list) for v in data.values()):
        raise SchemaError(f'{path}: splits must map split names to id lists')
    return {name: tuple(ids) for name, ids in data.items()}


def save_splits(dataset, path):
    with open(path, 'w', encoding='utf-8') as outfile:
        json.dump({name: list(dataset.splits.get(name, ())) for name in SPLIT_NAMES}, outfile, indent=2)


def split(dataset, ratios=(0.8, 0.1, 0.1), seed=0):
    """
    Assigns whole conversations to train/val/test after a seeded shuffle.

    :param ratios: three non-negative fractions summing to 1.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ArgumentError(f'split ratios must be three non-negative numbers summing to 1, got {ratios}')
    ids = [c.id for c in dataset.conversations]
    order = substream(seed, 'split').permutation(len(ids))
    shuffled = [ids[k] for k in order]
    n_train = int(round(ratios[0] * len(ids)))
    n_val = min(int(round(ratios[1] * len(ids))), len(ids) - n_train)
    splits = {
        'train': tuple(shuffled[:n_train]),
        'val': tuple(shuffled[n_train:n_train + n_val]),
        'test': tuple(shuffled[n_train + n_val:]),
    }
    return dataset.with_splits(splits)


@dataclass(frozen=True)
class SynthSpec:
    """
    Synthetic conversation generator settings.

    ``prototype``: each class has a prototype per modality and an utterance's
    features are its class prototype plus Gaussian noise.
    ``long_range``: features follow a hidden content class, and the label of
    utterance i is the content class of utterance ``i - long_range_distance``
    (its own content class for the first positions).
    """
    n_conversations: int = 40
    min_length: int = 8
    max_length: int = 12
    n_classes: int = 3
    dims: Mapping[str, int] = field(default_factory=lambda: {'t': 16, 'v': 12, 'a': 8})
    task: str = 'prototype'
    long_range_distance: int = 4
    noise: float = 1.0
    separation: float = 3.0

    def __post_init__(self):
        if self.n_conversations < 1:
            raise ArgumentError('n_conversations must be positive')
        if not 1 <= self.min_length <= self.max_length:
            raise ArgumentError('lengths must satisfy 1 <= min_length <= max_length')
        if self.n_classes < 2:
            raise ArgumentError('n_classes must be at least 2')
        if set(self.dims) != set(MODALITIES) or any(int(d) < 1 for d in self.dims.values()):
            raise ArgumentError(f'dims must give a positive size for each of {MODALITIES}')
        if self.task not in TASKS:
            raise ArgumentError(f'unknown task {self.task!r}')
        if self.long_range_distance < 2:
            raise ArgumentError('long_range_distance must be at least 2')
        if self.task == 'long_range' and self.min_length <= self.long_range_distance:
            raise ArgumentError('long_range conversations must be longer than long_range_distance')
        if self.noise < 0 or self.separation <= 0:
            raise ArgumentError('noise must be >= 0 and separation > 0')

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f'unknown synthetic spec keys: {unknown}')
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8') as infile:
            try:
                data = json.load(infile)
            except json.JSONDecodeError as e:
                raise ConfigError(f'{path}: {e.msg}') from e
        if not isinstance(data, dict):
            raise ConfigError(f'{path}: expected a JSON object')
        return cls.from_dict(data)


def class_names(n_classes):
    width = len(str(n_classes - 1))
    return tuple(f'class_{k:0{width}d}' for k in range(n_classes))


def generate_synthetic(spec, seed=0):
    """
    Generates a dataset as a pure function of ``(spec, seed)``.

    :param SynthSpec spec: generator settings.
    :param int seed: root seed.
    :rtype: Dataset
    """
    rng = substream(seed, 'synthetic')
    prototypes = {}
    for m in MODALITIES:
        directions = rng.standard_normal((spec.n_classes, spec.dims[m]))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        prototypes[m] = spec.separation * directions
    conversations = []
    for k in range(spec.n_conversations):
        length = int(rng.integers(spec.min_length, spec.max_length + 1))
        content = rng.integers(0, spec.n_classes, size=length)
        features = {
            m: prototypes[m][content] + spec.noise * rng.standard_normal((length, spec.dims[m]))
            for m in MODALITIES
        }
        if spec.task == 'long_range':
            delta = spec.long_range_distance
            labels = np.concatenate([content[:delta], content[:-delta]])
        else:
            labels = content
        conversation_id = f'conv_{k:04d}'
        utterances = tuple(
            Utterance(
                f'{conversation_id}_u{i:02d}',
                int(labels[i]),
                {m: features[m][i].copy() for m in MODALITIES},
                'AB'[i % 2],
            )
            for i in range(length)
        )
        conversations.append(Conversation(conversation_id, utterances))
    dims = {m: int(spec.dims[m]) for m in MODALITIES}
    return Dataset(class_names(spec.n_classes), dims, tuple(conversations))
