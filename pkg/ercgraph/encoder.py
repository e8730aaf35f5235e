"""
Per-modality bidirectional LSTM producing context-aware node features.

Gate blocks are stacked in the order input, forget, candidate, output along
the first axis of ``W_x``, ``W_h`` and ``b``.
"""

from dataclasses import dataclass
from typing import Any, List

import numpy as np

from .errors import ArgumentError, DimensionError
from .numeric import (
    DTYPE, add, concat, linear, lift, lstm_gates, matmul, row, segment, stack, value_of,
)

FORGET_BIAS = 1.0


def xavier_uniform(rows, cols, rng):
    """Glorot/Xavier uniform init by fan-in/fan-out."""
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols)).astype(DTYPE)


@dataclass
class LstmParams:
    """Weights of one LSTM direction; fields hold arrays or tape variables."""
    W_x: Any
    W_h: Any
    b: Any

    @property
    def hidden_dim(self):
        return value_of(self.W_h).shape[1]

    @property
    def input_dim(self):
        return value_of(self.W_x).shape[1]

    def validate(self):
        h = self.hidden_dim
        shapes = (value_of(self.W_x).shape, value_of(self.W_h).shape, value_of(self.b).shape)
        if shapes[0][0] != 4 * h or shapes[1] != (4 * h, h) or shapes[2] != (4 * h,):
            raise DimensionError(f'inconsistent LSTM gate shapes {shapes}')
        return self

    @classmethod
    def initialize(cls, input_dim, hidden_dim, rng, forget_bias=FORGET_BIAS):
        if input_dim < 1 or hidden_dim < 1:
            raise ArgumentError('LSTM dimensions must be positive')
        h = hidden_dim
        W_x = np.concatenate([xavier_uniform(h, input_dim, rng) for _ in range(4)])
        W_h = np.concatenate([xavier_uniform(h, h, rng) for _ in range(4)])
        b = np.zeros(4 * h, dtype=DTYPE)
        b[h:2 * h] = forget_bias
        return cls(W_x, W_h, b)


@dataclass
class ContextualEmbedding:
    """Encoder output for one node: forward and backward states concatenated."""
    vector: np.ndarray
    modality: str
    index: int


def _cell(z, c_prev, hidden):
    state = lstm_gates(z, c_prev)
    return segment(state, 0, hidden), segment(state, hidden, 2 * hidden)


def lstm_cell(x_t, h_prev, c_prev, params):
    """
    One LSTM step.

    :return: ``(h_t, c_t)``
    """
    params.validate()
    x_t, h_prev, c_prev = lift(x_t), lift(h_prev), lift(c_prev)
    hidden = params.hidden_dim
    if x_t.shape != (params.input_dim,) or h_prev.shape != (hidden,) or c_prev.shape != (hidden,):
        raise DimensionError(
            f'lstm_cell: expected input {params.input_dim} and state {hidden}, '
            f'got {x_t.shape}, {h_prev.shape}, {c_prev.shape}'
        )
    z = add(linear(params.W_x, params.b, x_t), matmul(params.W_h, h_prev))
    return _cell(z, c_prev, hidden)


def _unroll(inputs, params, reverse):
    hidden = params.hidden_dim
    projected = linear(params.W_x, params.b, inputs)
    h = lift(np.zeros(hidden, dtype=DTYPE))
    c = lift(np.zeros(hidden, dtype=DTYPE))
    n = inputs.shape[0]
    order = range(n - 1, -1, -1) if reverse else range(n)
    states = [None] * n
    for t in order:
        z = add(row(projected, t), matmul(params.W_h, h))
        h, c = _cell(z, c, hidden)
        states[t] = h
    return states


def bilstm_encode(sequence, fwd, bwd):
    """
    Encodes one modality of a conversation.

    :param sequence: list of equal-length vectors or an (N, d) matrix.
    :param LstmParams fwd: forward-direction weights.
    :param LstmParams bwd: backward-direction weights.
    :return: (N, 2h) variable; row i is forward state i ‖ backward state i.
    """
    if isinstance(sequence, (list, tuple)):
        if not sequence:
            raise ArgumentError('bilstm_encode: sequence must be non-empty')
        inputs = stack(sequence)
    else:
        inputs = lift(sequence)
        if inputs.ndim != 2 or inputs.shape[0] == 0:
            raise ArgumentError('bilstm_encode: sequence must be a non-empty (N, d) matrix')
    fwd.validate()
    bwd.validate()
    if fwd.hidden_dim != bwd.hidden_dim:
        raise DimensionError('forward and backward hidden sizes differ')
    if inputs.shape[1] != fwd.input_dim or inputs.shape[1] != bwd.input_dim:
        raise DimensionError(
            f'bilstm_encode: features have dim {inputs.shape[1]}, encoder expects {fwd.input_dim}'
        )
    forward = stack(_unroll(inputs, fwd, reverse=False))
    backward = stack(_unroll(inputs, bwd, reverse=True))
    return concat([forward, backward], axis=1)


def contextual_embeddings(encoded, modality) -> List[ContextualEmbedding]:
    """Splits an encoded (N, 2h) matrix into per-utterance embeddings."""
    values = value_of(encoded)
    return [ContextualEmbedding(values[i].copy(), modality, i) for i in range(values.shape[0])]
