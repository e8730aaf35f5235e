"""
End-to-end model: per-modality Bi-LSTM encoders, graph aggregation and the
utterance classifier.

The classifier input of utterance i is ``h_i^t ‖ h_i^v ‖ h_i^a`` (active
modalities only), followed by ``l_i = ReLU(W_l x + b_l)`` and
``p_i = softmax(W_smax l_i + b_smax)``.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Tuple

import numpy as np

from .aggregate import SECOND_LEVEL_MODES, BiamParams, baseline_gcn_layer, rba_layer
from .cluster import DEFAULT_VARIANT, NEIGHBORHOOD_VARIANTS, SimilarityConfig
from .encoder import LstmParams, bilstm_encode, xavier_uniform
from .errors import ArgumentError, ConfigError, DimensionError, NumericError
from .graph import GRAPH_MODES, MODALITIES, build_graph, canonical_modalities
from .numeric import (
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DTYPE, Tape, add, concat, dropout,
    linear, relu, reshape, scale, softmax, softmax_cross_entropy, substream,
)

logger = logging.getLogger(__name__)

DIRECTIONS = ('fwd', 'bwd')


@dataclass(frozen=True)
class TrainConfig:
    """Model and optimization hyperparameters; defaults follow the published setup."""
    lr: float = 0.0009
    dropout: float = 0.5
    gamma: int = 8
    rho: float = 0.3
    max_epochs: int = 1500
    patience: int = 100
    seed: int = 0
    hidden_size: int = 16
    node_dim: int = 32
    classifier_dim: int = 32
    neighborhood: str = DEFAULT_VARIANT
    use_clusters: bool = True
    graph_mode: str = 'ggm'
    second_level: str = 'joint'
    gcn_layers: int = 0
    modalities: Tuple[str, ...] = MODALITIES
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    adam_eps: float = ADAM_EPS
    log_every: int = 10

    def __post_init__(self):
        object.__setattr__(self, 'modalities', canonical_modalities(self.modalities))
        for name in ('hidden_size', 'node_dim', 'classifier_dim', 'max_epochs', 'patience', 'log_every'):
            if getattr(self, name) < 1:
                raise ArgumentError(f'{name} must be positive, got {getattr(self, name)}')
        if not 0.0 <= self.dropout < 1.0:
            raise ArgumentError(f'dropout must lie in [0, 1), got {self.dropout}')
        if self.lr < 0:
            raise ArgumentError(f'lr must be non-negative, got {self.lr}')
        if self.gcn_layers < 0:
            raise ArgumentError(f'gcn_layers must be non-negative, got {self.gcn_layers}')
        if self.neighborhood not in NEIGHBORHOOD_VARIANTS:
            raise ArgumentError(f'unknown neighborhood variant {self.neighborhood!r}')
        if self.graph_mode not in GRAPH_MODES:
            raise ArgumentError(f'unknown graph mode {self.graph_mode!r}')
        if self.second_level not in SECOND_LEVEL_MODES:
            raise ArgumentError(f'unknown second-level mode {self.second_level!r}')
        self.similarity_config()

    def similarity_config(self):
        return SimilarityConfig.from_variant(self.neighborhood, self.gamma, self.rho, self.use_clusters)

    def to_dict(self):
        data = asdict(self)
        data['modalities'] = list(self.modalities)
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f'unknown training keys: {unknown}')
        values = dict(data)
        if 'modalities' in values:
            values['modalities'] = tuple(values['modalities'])
        return cls(**values)

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return type(self).from_dict(data)


class Segment(NamedTuple):
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=int))


class ModelParams:
    """
    All trainable tensors, keyed by segment name.

    Names: ``encoder.<m>.<fwd|bwd>.{W_x,W_h,b}``, ``biam.cluster.<r>.{W,b}``,
    ``biam.W``, ``gcn.<k>.W`` and ``classifier.{W_l,b_l,W_smax,b_smax}``.
    Insertion order fixes the flat layout.
    """

    def __init__(self, tensors):
        self.tensors = {name: np.asarray(value, dtype=DTYPE) for name, value in tensors.items()}

    def __len__(self):
        return len(self.tensors)

    @property
    def size(self):
        return sum(t.size for t in self.tensors.values())

    def segments(self):
        table, offset = [], 0
        for name, tensor in self.tensors.items():
            table.append(Segment(name, offset, tuple(tensor.shape)))
            offset += tensor.size
        return table

    def flat(self):
        if not self.tensors:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([t.reshape(-1) for t in self.tensors.values()])

    @classmethod
    def from_flat(cls, flat, segments):
        flat = np.asarray(flat, dtype=DTYPE)
        expected = sum(seg.size for seg in segments)
        if flat.size != expected:
            raise DimensionError(f'flat view has {flat.size} values, segment table expects {expected}')
        return cls({
            seg.name: flat[seg.offset:seg.offset + seg.size].reshape(seg.shape).copy()
            for seg in segments
        })

    def copy(self):
        return ModelParams({name: t.copy() for name, t in self.tensors.items()})

    def input_dims(self):
        return {
            name.split('.')[1]: t.shape[1]
            for name, t in self.tensors.items()
            if name.startswith('encoder.') and name.endswith('.fwd.W_x')
        }

    @property
    def n_classes(self):
        return self.tensors['classifier.W_smax'].shape[0]

    @classmethod
    def initialize(cls, cfg, dims, n_classes):
        """
        Draws fresh parameters for ``cfg``.

        :param TrainConfig cfg: hyperparameters.
        :param dict dims: raw feature dim per modality.
        :param int n_classes: number of emotion classes.
        """
        if n_classes < 2:
            raise ArgumentError('at least two classes are needed')
        rng = substream(cfg.seed, 'init')
        tensors = {}
        for m in cfg.modalities:
            if m not in dims:
                raise DimensionError(f'no feature dim for modality {m}')
            for direction in DIRECTIONS:
                lstm = LstmParams.initialize(dims[m], cfg.hidden_size, rng)
                prefix = f'encoder.{m}.{direction}'
                tensors[f'{prefix}.W_x'] = lstm.W_x
                tensors[f'{prefix}.W_h'] = lstm.W_h
                tensors[f'{prefix}.b'] = lstm.b
        dim = 2 * cfg.hidden_size
        if cfg.gcn_layers:
            in_dim = dim
            for k in range(cfg.gcn_layers):
                tensors[f'gcn.{k}.W'] = xavier_uniform(cfg.node_dim, in_dim, rng)
                in_dim = cfg.node_dim
        else:
            biam = BiamParams.initialize(dim, cfg.node_dim, cfg.gamma, rng, cfg.second_level)
            for r, (W_r, b_r) in enumerate(zip(biam.cluster_W, biam.cluster_b)):
                tensors[f'biam.cluster.{r}.W'] = W_r
                tensors[f'biam.cluster.{r}.b'] = b_r
            tensors['biam.W'] = biam.W
        utterance_dim = len(cfg.modalities) * cfg.node_dim
        tensors['classifier.W_l'] = xavier_uniform(cfg.classifier_dim, utterance_dim, rng)
        tensors['classifier.b_l'] = np.zeros(cfg.classifier_dim, dtype=DTYPE)
        tensors['classifier.W_smax'] = xavier_uniform(n_classes, cfg.classifier_dim, rng)
        tensors['classifier.b_smax'] = np.zeros(n_classes, dtype=DTYPE)
        params = cls(tensors)
        logger.debug('initialized %d parameters in %d segments', params.size, len(params))
        return params


def encoder_params(view, modality, direction):
    prefix = f'encoder.{modality}.{direction}'
    return LstmParams(view[f'{prefix}.W_x'], view[f'{prefix}.W_h'], view[f'{prefix}.b'])


def biam_params(view, cfg):
    n_clusters = cfg.gamma + 1
    if f'biam.cluster.{n_clusters - 1}.W' not in view or f'biam.cluster.{n_clusters}.W' in view:
        raise DimensionError(f'parameters do not hold {n_clusters} per-cluster maps for gamma={cfg.gamma}')
    return BiamParams(
        [view[f'biam.cluster.{r}.W'] for r in range(n_clusters)],
        [view[f'biam.cluster.{r}.b'] for r in range(n_clusters)],
        view['biam.W'],
        cfg.second_level,
    )


class ForwardResult(NamedTuple):
    probs: np.ndarray
    logits: object


def encode_nodes(view, conversation, cfg):
    """
    Graph and Bi-LSTM node features of one conversation.

    :return: ``(graph, nodes)`` where row k of the (n, 2h) variable belongs to
        ``graph.nodes[k]``.
    """
    modalities = cfg.modalities
    graph = build_graph(conversation, modalities, cfg.graph_mode)
    n = len(conversation.utterances)
    encoded = [
        bilstm_encode(
            conversation.modality_matrix(m),
            encoder_params(view, m, 'fwd'),
            encoder_params(view, m, 'bwd'),
        )
        for m in modalities
    ]
    # rows ordered by utterance, then modality: matches graph.nodes
    nodes = reshape(concat(encoded, axis=1), (n * len(modalities), 2 * cfg.hidden_size))
    return graph, nodes


def aggregate_nodes(view, conversation, cfg, training=False, rng=None):
    """Graph-updated node features (n, d_out) of one conversation."""
    graph, nodes = encode_nodes(view, conversation, cfg)
    if cfg.gcn_layers:
        hidden = nodes
        for k in range(cfg.gcn_layers):
            hidden = baseline_gcn_layer(graph, hidden, view[f'gcn.{k}.W'])
        return hidden
    return rba_layer(
        graph, nodes, biam_params(view, cfg), cfg.similarity_config(),
        cfg.dropout, rng, training,
    )


def conversation_logits(view, conversation, cfg, training=False, rng=None):
    """Logits variable (N, C) for one conversation given a parameter view."""
    n = len(conversation.utterances)
    hidden = aggregate_nodes(view, conversation, cfg, training, rng)
    utterances = reshape(hidden, (n, len(cfg.modalities) * hidden.shape[1]))
    utterances = dropout(utterances, cfg.dropout, rng, training)
    l = relu(linear(view['classifier.W_l'], view['classifier.b_l'], utterances))
    return linear(view['classifier.W_smax'], view['classifier.b_smax'], l)


def forward(conversation, params, cfg, training=False, rng=None):
    """
    Per-utterance class probabilities of one conversation.

    Dropout is active only when ``training`` is true.
    :rtype: ForwardResult
    """
    logits = conversation_logits(params.tensors, conversation, cfg, training, rng)
    return ForwardResult(softmax(logits.value), logits)


def predict(probs):
    """Index of the largest probability; ties go to the smallest index."""
    probs = np.asarray(probs)
    if probs.size == 0:
        raise ArgumentError('cannot predict from an empty probability vector')
    return int(np.argmax(probs))


def slice_loss(view, conversations, cfg, training, rng):
    if not conversations:
        raise ArgumentError('loss needs at least one conversation')
    total, count = None, 0
    for conversation in conversations:
        logits = conversation_logits(view, conversation, cfg, training, rng)
        loss, _ = softmax_cross_entropy(logits, conversation.labels, reduction='sum')
        total = loss if total is None else add(total, loss)
        count += len(conversation.utterances)
    return scale(total, 1.0 / count)


def batch_loss(conversations, params, cfg, training=False, rng=None):
    """Mean cross-entropy over every utterance of ``conversations``."""
    return float(slice_loss(params.tensors, conversations, cfg, training, rng).value)


def loss_and_grad(conversations, params, cfg, training=False, rng=None):
    """
    Loss and gradient of every parameter segment.

    :return: ``(loss, grads)`` where ``grads`` maps segment names to arrays.
    """
    tape = Tape()
    view = tape.watch_all(params.tensors)
    loss = slice_loss(view, conversations, cfg, training, rng)
    value = float(loss.value)
    if not np.isfinite(value):
        raise NumericError('loss is not finite')
    tape.backward(loss)
    return value, tape.gradients()
