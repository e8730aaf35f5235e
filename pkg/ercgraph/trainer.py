"""
Training loop, evaluation, checkpoints and the end-to-end gradient check.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .data import SynthSpec, generate_synthetic
from .errors import ArgumentError, DimensionError, NumericError, SchemaError
from .metrics import Metrics
from .model import ModelParams, Segment, TrainConfig, forward, loss_and_grad, predict, slice_loss
from .numeric import AdamState, adam_step, grad_check, substream

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'ercgraph-checkpoint/1'


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_waf1: Optional[float]


@dataclass
class TrainResult:
    """``params`` holds the best checkpoint; ``final_params`` the last epoch's."""
    params: ModelParams
    final_params: ModelParams
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def evaluate(conversations, params, cfg):
    """
    Eval-mode metrics over ``conversations``.

    :raises ArgumentError: no conversations given.
    :rtype: Metrics
    """
    conversations = list(conversations)
    if not conversations:
        raise ArgumentError('cannot evaluate an empty slice')
    gold, predicted = [], []
    for conversation in conversations:
        probs = forward(conversation, params, cfg).probs
        gold.extend(conversation.labels.tolist())
        predicted.extend(predict(p) for p in probs)
    return Metrics.from_predictions(gold, predicted, params.n_classes)


def predict_dataset(conversations, params, cfg):
    """Yields ``(conversation id, utterance id, gold, predicted, probs)`` per utterance."""
    for conversation in conversations:
        probs = forward(conversation, params, cfg).probs
        for utterance, p in zip(conversation.utterances, probs):
            yield conversation.id, utterance.id, utterance.label, predict(p), p


def _score(record):
    # without a validation split the lowest training loss wins
    return record.val_waf1 if record.val_waf1 is not None else -record.train_loss


def train(dataset, cfg):
    """
    Trains on the ``train`` split, one Adam step per conversation.

    Conversations are shuffled each epoch from the ``shuffle`` substream and
    dropout masks come from a substream keyed by epoch and conversation id.
    The parameters of the epoch with the best validation WAF1 are kept;
    training stops after ``cfg.patience`` epochs without improvement.

    :param Dataset dataset: dataset with splits.
    :param TrainConfig cfg: hyperparameters.
    :rtype: TrainResult
    """
    train_set = dataset.split('train')
    val_set = dataset.split('val')
    if not train_set:
        raise ArgumentError('the train split is empty')
    params = ModelParams.initialize(cfg, dataset.dims, dataset.n_classes)
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    logger.info(
        'training %d parameters on %d conversations (%d for validation)',
        params.size, len(train_set), len(val_set),
    )
    history = []
    best, best_epoch, best_score, stale = params.copy(), 0, None, 0
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = substream(cfg.seed, 'shuffle', epoch).permutation(len(train_set))
        total, count = 0.0, 0
        for k in order:
            conversation = train_set[int(k)]
            rng = substream(cfg.seed, 'dropout', epoch, conversation.id)
            try:
                loss, grads = loss_and_grad([conversation], params, cfg, training=True, rng=rng)
                adam_step(params.tensors, grads, state)
            except NumericError as e:
                raise NumericError(f'epoch {epoch}, conversation {conversation.id}: {e}') from e
            total += loss * len(conversation)
            count += len(conversation)
        val_waf1 = evaluate(val_set, params, cfg).waf1 if val_set else None
        record = EpochRecord(epoch, total / count, val_waf1)
        history.append(record)
        score = _score(record)
        if best_score is None or score > best_score:
            best, best_epoch, best_score, stale = params.copy(), epoch, score, 0
        else:
            stale += 1
        if epoch % cfg.log_every == 0 or epoch == 1:
            logger.info(
                'epoch %d: train loss %.6f, val WAF1 %s', epoch, record.train_loss,
                'n/a' if val_waf1 is None else f'{val_waf1:.4f}',
            )
        else:
            logger.debug('epoch %d: train loss %.6f', epoch, record.train_loss)
        if stale >= cfg.patience:
            stopped_early = True
            logger.info('no improvement for %d epochs, stopping at epoch %d', stale, epoch)
            break
    logger.info('best epoch %d', best_epoch)
    return TrainResult(best, params, history, best_epoch, stopped_early)


def save_checkpoint(path, params, cfg, labels, dims, epoch=0, metrics=None):
    """Writes the config echo, segment table and flat parameters as JSON."""
    payload = {
        'format': CHECKPOINT_FORMAT,
        'config': cfg.to_dict(),
        'labels': list(labels),
        'dims': dict(dims),
        'epoch': int(epoch),
        'segments': [
            {'name': seg.name, 'offset': seg.offset, 'shape': list(seg.shape)}
            for seg in params.segments()
        ],
        'params': params.flat().tolist(),
        'metrics': metrics or {},
    }
    with open(path, 'w', encoding='utf-8') as outfile:
        json.dump(payload, outfile)


@dataclass
class Checkpoint:
    params: ModelParams
    config: TrainConfig
    labels: tuple
    dims: dict
    epoch: int
    metrics: dict


def load_checkpoint(path):
    """
    :raises SchemaError: the file is not a checkpoint.
    :rtype: Checkpoint
    """
    with open(path, 'r', encoding='utf-8') as infile:
        try:
            payload = json.load(infile)
        except json.JSONDecodeError as e:
            raise SchemaError(f'{path} is not valid JSON: {e.msg}') from e
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise SchemaError(f'{path} is not an ercgraph checkpoint')
    segments = [Segment(s['name'], int(s['offset']), tuple(s['shape'])) for s in payload['segments']]
    params = ModelParams.from_flat(np.asarray(payload['params'], dtype=np.float64), segments)
    return Checkpoint(
        params,
        TrainConfig.from_dict(payload['config']),
        tuple(payload['labels']),
        dict(payload['dims']),
        int(payload.get('epoch', 0)),
        payload.get('metrics', {}),
    )


def check_compatible(params, dataset):
    """
    :raises DimensionError: naming the first parameter segment that cannot
        consume ``dataset``.
    """
    for m, dim in params.input_dims().items():
        segment = f'encoder.{m}.fwd.W_x'
        if m not in dataset.dims:
            raise DimensionError(f'segment {segment}: dataset has no modality {m!r}')
        if dataset.dims[m] != dim:
            raise DimensionError(
                f'segment {segment} expects {m} features of dim {dim}, dataset has {dataset.dims[m]}'
            )
    if params.n_classes != dataset.n_classes:
        raise DimensionError(
            f'segment classifier.W_smax has {params.n_classes} classes, dataset has {dataset.n_classes}'
        )


MICRO_SPEC = SynthSpec(
    n_conversations=2, min_length=3, max_length=3, n_classes=2,
    dims={'t': 4, 'v': 3, 'a': 2}, separation=2.0,
)


def micro_config(cfg=None):
    """The gradient-check micro-model: h=4, gamma=2, small classifier."""
    cfg = cfg or TrainConfig(dropout=0.0)
    return cfg.replace(hidden_size=4, node_dim=4, classifier_dim=4, gamma=2, gcn_layers=0)


def run_gradcheck(cfg=None, seed=0, eps=1e-5, corrupt_segment=None):
    """
    End-to-end gradient check on two three-utterance conversations.

    :param TrainConfig cfg: base configuration; must have dropout 0.
    :param str corrupt_segment: test hook; shifts the analytic gradient of
        this segment so the check must fail.
    :rtype: GradCheckReport
    """
    cfg = micro_config(cfg)
    if cfg.dropout > 0:
        raise ArgumentError('gradient check needs dropout 0; the loss would not be deterministic')
    dataset = generate_synthetic(MICRO_SPEC, seed)
    conversations = list(dataset.conversations)
    params = ModelParams.initialize(cfg, dataset.dims, dataset.n_classes)
    _, analytic = loss_and_grad(conversations, params, cfg)
    if corrupt_segment is not None:
        if corrupt_segment not in analytic:
            raise ArgumentError(f'no parameter segment {corrupt_segment!r}')
        analytic[corrupt_segment] = analytic[corrupt_segment] + 1.0

    def loss_fn(tensors):
        return float(slice_loss(tensors, conversations, cfg, False, None).value)

    report = grad_check(loss_fn, params.tensors, analytic, eps)
    logger.info('gradient check over %d parameters: max relative error %.3e', params.size, report.max_error)
    return report
