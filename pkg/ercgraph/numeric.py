"""
Dense fp64 kernel used by every other module.

Values are numpy arrays of dtype float64. Differentiable operations take
either plain arrays or :class:`Var` objects; when any input is a variable
watched by a :class:`Tape`, the result is recorded on that tape and
:meth:`Tape.backward` later propagates vector-Jacobian products in reverse
recording order. Inputs that are not on a tape are treated as constants.
"""

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import ArgumentError, ClassIndexError, DimensionError, NumericError

logger = logging.getLogger(__name__)

DTYPE = np.float64

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def as_array(value, name='value'):
    """Converts ``value`` to a float64 array, rejecting NaN and Inf."""
    arr = np.asarray(value, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f'{name} contains NaN or Inf')
    return arr


def substream(seed, *keys):
    """
    Returns an independent numpy Generator derived from ``seed`` and ``keys``.

    Keys may be ints or strings; strings are hashed with crc32 so the stream
    is stable across processes and Python versions.
    """
    spawn_key = tuple(
        key if isinstance(key, int) else zlib.crc32(str(key).encode('utf-8'))
        for key in keys
    )
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn_key))


class Var:
    """A value on (or off) a gradient tape."""

    __slots__ = ('value', 'grad', 'tape', 'parents', 'vjp', 'name')

    def __init__(self, value, tape=None, parents=(), vjp=None, name=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        label = f' {self.name}' if self.name else ''
        return f'<Var{label} shape={self.value.shape}>'

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def lift(x):
    """Wraps a constant as an off-tape :class:`Var`."""
    if isinstance(x, Var):
        return x
    return Var(as_array(x))


def value_of(x):
    """Returns the raw array behind ``x``."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=DTYPE)


def _emit(value, parents, vjp):
    tape = None
    for parent in parents:
        if parent.tape is None:
            continue
        if tape is None:
            tape = parent.tape
        elif parent.tape is not tape:
            raise ArgumentError('operands belong to different tapes')
    if tape is None:
        return Var(value)
    return tape.record(value, parents, vjp)


class Tape:
    """
    Records differentiable operations for one forward pass.

    Parameters enter the tape through :meth:`watch`; after :meth:`backward`
    every watched parameter has a gradient of its own shape, exactly zero
    when the parameter did not influence the output. A tape is single-use
    and single-writer.
    """

    def __init__(self):
        self._nodes = []
        self._leaves = {}

    def watch(self, name, value):
        if name in self._leaves:
            raise ArgumentError(f'parameter {name} is already watched')
        var = Var(as_array(value, name), tape=self, name=name)
        self._leaves[name] = var
        return var

    def watch_all(self, tensors):
        return {name: self.watch(name, value) for name, value in tensors.items()}

    def record(self, value, parents, vjp):
        var = Var(value, tape=self, parents=parents, vjp=vjp)
        self._nodes.append(var)
        return var

    def backward(self, output, seed=None):
        if output.tape is not self:
            raise ArgumentError('output was not recorded on this tape')
        if seed is None:
            output.grad = np.ones_like(output.value)
        else:
            output.grad = as_array(seed, 'seed')
        for node in reversed(self._nodes):
            if node.grad is None:
                continue
            grads = node.vjp(node.grad)
            for parent, grad in zip(node.parents, grads):
                if grad is None or parent.tape is not self:
                    continue
                parent.grad = grad if parent.grad is None else parent.grad + grad

    def gradients(self):
        return {
            name: np.zeros_like(var.value) if var.grad is None else var.grad
            for name, var in self._leaves.items()
        }


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f'{op}: shapes {a.shape} and {b.shape} differ')


def linear(W, b, x):
    """
    Returns ``W x + b`` for a vector ``x`` or ``x Wᵀ + b`` for a matrix of rows.

    ``b`` may be None for a bias-free map.
    """
    W, x = lift(W), lift(x)
    if W.ndim != 2 or x.ndim not in (1, 2):
        raise DimensionError(f'linear: W must be a matrix and x a vector or matrix, got {W.shape} and {x.shape}')
    if W.shape[1] != x.shape[-1]:
        raise DimensionError(f'linear: W has {W.shape[1]} columns but x has length {x.shape[-1]}')
    y = x.value @ W.value.T
    if b is not None:
        b = lift(b)
        if b.shape != (W.shape[0],):
            raise DimensionError(f'linear: bias shape {b.shape} does not match {W.shape[0]} rows')
        y = y + b.value

    def vjp(g):
        if x.ndim == 1:
            gW = np.outer(g, x.value)
            gb = g
        else:
            gW = g.T @ x.value
            gb = g.sum(axis=0)
        gx = g @ W.value
        if b is None:
            return gW, gx
        return gW, gb, gx

    parents = (W, x) if b is None else (W, b, x)
    return _emit(y, parents, vjp)


def matmul(A, B):
    """Matrix-vector or matrix-matrix product."""
    A, B = lift(A), lift(B)
    if A.ndim != 2 or B.ndim not in (1, 2) or A.shape[1] != B.shape[0]:
        raise DimensionError(f'matmul: cannot multiply {A.shape} by {B.shape}')
    y = A.value @ B.value

    def vjp(g):
        gA = np.outer(g, B.value) if B.ndim == 1 else g @ B.value.T
        return gA, A.value.T @ g

    return _emit(y, (A, B), vjp)


def add(a, b):
    a, b = lift(a), lift(b)
    _same_shape(a, b, 'add')
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def mul(a, b):
    """Elementwise product."""
    a, b = lift(a), lift(b)
    _same_shape(a, b, 'mul')
    return _emit(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def scale(x, factor):
    x = lift(x)
    factor = float(factor)
    return _emit(x.value * factor, (x,), lambda g: (g * factor,))


def relu(x):
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    x = lift(x)
    active = x.value > 0
    return _emit(np.where(active, x.value, 0.0), (x,), lambda g: (g * active,))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x):
    x = lift(x)
    y = _sigmoid(x.value)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x):
    x = lift(x)
    y = np.tanh(x.value)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def lstm_gates(z, c_prev):
    """
    Fused LSTM cell update recorded as a single tape operation.

    ``z`` holds the input, forget, candidate and output pre-activations
    stacked along the last axis (4h); ``c_prev`` is the previous cell state
    (h). Returns the variable ``h_t ‖ c_t`` (2h).
    """
    z, c_prev = lift(z), lift(c_prev)
    hidden = c_prev.shape[-1]
    if z.shape[-1] != 4 * hidden or z.shape[:-1] != c_prev.shape[:-1]:
        raise DimensionError(f'lstm_gates: pre-activations {z.shape} do not match cell state {c_prev.shape}')
    zv, cv = z.value, c_prev.value
    i = _sigmoid(zv[..., :hidden])
    f = _sigmoid(zv[..., hidden:2 * hidden])
    g = np.tanh(zv[..., 2 * hidden:3 * hidden])
    o = _sigmoid(zv[..., 3 * hidden:])
    c = f * cv + i * g
    tc = np.tanh(c)
    h = o * tc

    def vjp(grad):
        g_h = grad[..., :hidden]
        g_c = grad[..., hidden:] + (g_h * o) * (1.0 - tc * tc)
        dz = np.concatenate([
            (g_c * g) * (i * (1.0 - i)),
            (g_c * cv) * (f * (1.0 - f)),
            (g_c * i) * (1.0 - g * g),
            (g_h * tc) * (o * (1.0 - o)),
        ], axis=-1)
        return dz, g_c * f

    return _emit(np.concatenate([h, c], axis=-1), (z, c_prev), vjp)


def concat(parts, axis=-1):
    """Concatenates along ``axis``; the gradient is split back by segment."""
    if not parts:
        raise ArgumentError('concat: parts must be non-empty')
    parts = tuple(lift(p) for p in parts)
    try:
        y = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as e:
        raise DimensionError(f'concat: {e}') from e
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(y, parts, vjp)


def segment(x, start, stop):
    """Slice ``x[..., start:stop]``."""
    x = lift(x)
    if not 0 <= start <= stop <= x.shape[-1]:
        raise DimensionError(f'segment [{start}:{stop}] outside length {x.shape[-1]}')

    def vjp(g):
        out = np.zeros_like(x.value)
        out[..., start:stop] = g
        return (out,)

    return _emit(x.value[..., start:stop], (x,), vjp)


def row(x, i):
    """Row ``i`` of a matrix."""
    x = lift(x)

    def vjp(g):
        out = np.zeros_like(x.value)
        out[i] = g
        return (out,)

    return _emit(x.value[i], (x,), vjp)


def reshape(x, shape):
    x = lift(x)
    try:
        y = x.value.reshape(shape)
    except ValueError as e:
        raise DimensionError(f'reshape: {e}') from e
    return _emit(y, (x,), lambda g: (g.reshape(x.shape),))


def stack(vectors):
    """Stacks equal-length vectors into the rows of a matrix."""
    if not vectors:
        raise ArgumentError('stack: vectors must be non-empty')
    vectors = tuple(lift(v) for v in vectors)
    for v in vectors[1:]:
        _same_shape(vectors[0], v, 'stack')
    y = np.stack([v.value for v in vectors])
    return _emit(y, vectors, lambda g: tuple(g))


def mean_reduce(vectors):
    """
    Elementwise arithmetic mean of equal-length vectors.

    The mean is accumulated incrementally, so k copies of v average to v
    exactly. The gradient sends 1/n to each input.
    """
    if not vectors:
        raise ArgumentError('mean_reduce: vectors must be non-empty')
    vectors = tuple(lift(v) for v in vectors)
    mean = vectors[0].value.copy()
    for k, v in enumerate(vectors[1:], start=2):
        _same_shape(vectors[0], v, 'mean_reduce')
        mean += (v.value - mean) / k
    n = len(vectors)
    return _emit(mean, vectors, lambda g: tuple(g / n for _ in range(n)))


def dropout(x, p, rng=None, training=True):
    """
    Inverted dropout: survivors are scaled by 1/(1-p) at train time so that
    inference is the identity.
    """
    if not 0.0 <= p < 1.0:
        raise ArgumentError(f'dropout rate must lie in [0, 1), got {p}')
    x = lift(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ArgumentError('dropout in training mode needs a random generator')
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit(x.value * mask, (x,), lambda g: (g * mask,))


def softmax(logits):
    """Row-wise softmax stabilized by max-subtraction."""
    z = np.asarray(logits, dtype=DTYPE)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, gold, reduction='mean'):
    """
    Categorical cross-entropy of ``logits`` against class indices.

    For a vector of logits ``gold`` is one index and the loss is
    ``-log softmax(logits)[gold]``. For a matrix, ``gold`` holds one index per
    row and the row losses are summed or averaged according to
    ``reduction``. Returns ``(loss, probs)``.
    """
    logits = lift(logits)
    if logits.ndim not in (1, 2) or logits.shape[-1] == 0:
        raise DimensionError(f'softmax_cross_entropy: bad logits shape {logits.shape}')
    if reduction not in ('mean', 'sum'):
        raise ArgumentError(f'unknown reduction {reduction!r}')
    z = logits.value if logits.ndim == 2 else logits.value[None, :]
    gold_idx = np.atleast_1d(np.asarray(gold))
    if gold_idx.shape != (z.shape[0],):
        raise DimensionError(f'expected {z.shape[0]} gold indices, got {gold_idx.shape}')
    n_classes = z.shape[1]
    for k in gold_idx:
        if not 0 <= int(k) < n_classes:
            raise ClassIndexError(f'gold class {int(k)} outside [0, {n_classes})')
    gold_idx = gold_idx.astype(int)
    rows = np.arange(z.shape[0])
    peak = z.max(axis=1, keepdims=True)
    shifted = z - peak
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    losses = log_norm - shifted[rows, gold_idx]
    probs = softmax(z)
    factor = 1.0 / z.shape[0] if reduction == 'mean' else 1.0
    loss = np.asarray(losses.sum() * factor)

    def vjp(g):
        d = probs.copy()
        d[rows, gold_idx] -= 1.0
        d *= g * factor
        return (d if logits.ndim == 2 else d[0],)

    out_probs = probs if logits.ndim == 2 else probs[0]
    return _emit(loss, (logits,), vjp), out_probs


@dataclass
class AdamState:
    """Per-parameter moments, the step counter and Adam hyperparameters."""
    lr: float = 0.0009
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state):
    """
    Applies one bias-corrected Adam update to ``params`` in place.

    Coordinates whose gradient is exactly zero keep their value while their
    moments decay.

    :param dict params: name -> array, updated in place.
    :param dict grads: name -> gradient of the same shape.
    :param AdamState state: optimizer state, advanced by one step.
    :return: ``params``
    """
    if set(params) != set(grads):
        raise DimensionError('adam_step: parameter and gradient names differ')
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f'adam_step: gradient of {name} has shape {g.shape}, parameter {p.shape}')
        if not np.all(np.isfinite(g)):
            raise NumericError(f'adam_step: gradient of {name} is not finite')
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise DimensionError(f'adam_step: moment of {name} has shape {m.shape}, parameter {p.shape}')
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        np.subtract(p, update, out=p, where=(g != 0))
    return params


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""
    max_error: float
    worst_segment: Optional[str]
    worst_index: Optional[int]
    segment_errors: Dict[str, float]

    def passed(self, tolerance=1e-4):
        return self.max_error < tolerance


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(loss_fn, params, analytic, eps=1e-5):
    """
    Compares ``analytic`` gradients against central differences.

    :param loss_fn: deterministic callable mapping the ``params`` dict to a float.
    :param dict params: name -> array; perturbed in place and restored.
    :param dict analytic: name -> analytic gradient.
    :param float eps: finite-difference step.
    :rtype: GradCheckReport
    """
    worst = (0.0, None, None)
    per_segment = {}
    for name, p in params.items():
        grad = np.asarray(analytic[name])
        if grad.shape != p.shape:
            raise DimensionError(f'grad_check: gradient of {name} has shape {grad.shape}, parameter {p.shape}')
        segment_max = 0.0
        for k, idx in enumerate(np.ndindex(p.shape)):
            original = p[idx]
            p[idx] = original + eps
            upper = float(loss_fn(params))
            p[idx] = original - eps
            lower = float(loss_fn(params))
            p[idx] = original
            if not (math.isfinite(upper) and math.isfinite(lower)):
                raise NumericError(f'grad_check: non-finite loss while perturbing {name}[{k}]')
            error = relative_error(float(grad[idx]), (upper - lower) / (2.0 * eps))
            segment_max = max(segment_max, error)
            if error > worst[0]:
                worst = (error, name, k)
        per_segment[name] = segment_max
        logger.debug('grad_check %s: max relative error %.3e', name, segment_max)
    return GradCheckReport(worst[0], worst[1], worst[2], per_segment)
