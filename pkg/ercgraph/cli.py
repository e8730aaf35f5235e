"""
Command-line entry point.

Subcommands: ``train``, ``eval``, ``predict``, ``gen``, ``ablate`` and
``gradcheck``. The log level comes from ``ERCGRAPH_LOG_LEVEL`` (default INFO).
"""

import argparse
import logging
import os
import statistics
import sys

import numpy as np

from .aggregate import node_variance
from .cluster import build_all_clusters, dump_assignments
from .config import RunConfig
from .data import SynthSpec, generate_synthetic, load_dataset, load_splits, save_dataset, save_splits, split
from .errors import ArgumentError, ConfigError, ErcGraphError
from .model import aggregate_nodes, encode_nodes
from .report import (
    CONFUSION_FILE, HISTORY_FILE, METRICS_FILE, PER_CLASS_FILE, PREDICTIONS_FILE, REPORT_FILE,
    EvaluationReport, write_confusion_csv, write_history_csv, write_metrics_json,
    write_per_class_csv, write_predictions_csv, write_table_csv,
)
from .trainer import (
    check_compatible, evaluate, load_checkpoint, predict_dataset, run_gradcheck, save_checkpoint, train,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = 'checkpoint.json'
DATASET_FILE = 'dataset.jsonl'
SPLITS_FILE = 'splits.json'
ABLATION_AXES = ('neighborhood', 'gamma', 'layers', 'modality', 'clusters', 'graph')
GRADCHECK_TOLERANCE = 1e-4


class UsageError(ErcGraphError):
    """Invalid command-line input that maps to exit code 2."""


def _run_config(args):
    run = RunConfig.load(args.config) if getattr(args, 'config', None) else RunConfig()
    return run.with_overrides(
        dataset=getattr(args, 'dataset', None),
        splits=getattr(args, 'splits', None),
        output_dir=getattr(args, 'out', None),
        seed=getattr(args, 'seed', None),
        max_epochs=getattr(args, 'epochs', None),
    )


def _prepare_dataset(run, labels=None):
    if run.dataset:
        dataset = load_dataset(run.dataset, labels)
    elif run.synthetic:
        dataset = generate_synthetic(SynthSpec.load(run.synthetic), run.data_seed)
        logger.info('generated %d conversations from %s (seed %d)', len(dataset), run.synthetic, run.data_seed)
    else:
        raise ConfigError('no dataset given; set "dataset" or "synthetic" in the config or pass --dataset')
    if run.splits:
        return dataset.with_splits(load_splits(run.splits))
    return split(dataset, run.split_ratios, run.train.seed)


def _write_evaluation(out_dir, metrics, labels, extra=None, docx=False, config=None):
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_json(os.path.join(out_dir, METRICS_FILE), metrics, labels, extra)
    write_per_class_csv(os.path.join(out_dir, PER_CLASS_FILE), metrics, labels)
    write_confusion_csv(os.path.join(out_dir, CONFUSION_FILE), metrics, labels)
    if docx:
        EvaluationReport().write(os.path.join(out_dir, REPORT_FILE), metrics, labels, config=config)


def _dump_diagnostics(out_dir, conversation, params, cfg):
    graph, nodes = encode_nodes(params.tensors, conversation, cfg)
    graph.dump(os.path.join(out_dir, 'graph.json'))
    if not cfg.gcn_layers:
        assignments = build_all_clusters(graph, nodes.value, cfg.similarity_config())
        dump_assignments(assignments, os.path.join(out_dir, 'clusters.json'))
        logger.info('zero-norm similarity scores in %s: %d', conversation.id, sum(a.zero_norm for a in assignments))


def cmd_train(args):
    run = _run_config(args)
    dataset = _prepare_dataset(run)
    os.makedirs(run.output_dir, exist_ok=True)
    save_splits(dataset, os.path.join(run.output_dir, SPLITS_FILE))
    if not run.dataset:
        save_dataset(dataset, os.path.join(run.output_dir, DATASET_FILE))
    result = train(dataset, run.train)
    write_history_csv(os.path.join(run.output_dir, HISTORY_FILE), result.history)
    eval_set = dataset.split(run.eval_split)
    metrics = evaluate(eval_set, result.params, run.train)
    extra = {
        'split': run.eval_split,
        'best_epoch': result.best_epoch,
        'epochs_run': len(result.history),
    }
    _write_evaluation(run.output_dir, metrics, dataset.labels, extra, args.docx, run.to_dict())
    save_checkpoint(
        os.path.join(run.output_dir, CHECKPOINT_FILE), result.params, run.train,
        dataset.labels, dataset.dims, result.best_epoch, metrics.to_dict(dataset.labels),
    )
    if run.diagnostics or args.diagnostics:
        _dump_diagnostics(run.output_dir, (eval_set or dataset.conversations)[0], result.params, run.train)
    print(f'{run.eval_split} WAF1 {metrics.waf1:.4f}  accuracy {metrics.accuracy:.4f}  (best epoch {result.best_epoch})')
    return 0


def _checkpoint_dataset(args, checkpoint):
    dataset = load_dataset(args.dataset, checkpoint.labels)
    check_compatible(checkpoint.params, dataset)
    splits_path = args.splits or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), SPLITS_FILE)
    if os.path.exists(splits_path):
        return dataset.with_splits(load_splits(splits_path))
    return split(dataset, RunConfig().split_ratios, checkpoint.config.seed)


def cmd_eval(args):
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = _checkpoint_dataset(args, checkpoint)
    metrics = evaluate(dataset.split(args.split), checkpoint.params, checkpoint.config)
    _write_evaluation(
        args.out, metrics, dataset.labels, {'split': args.split}, args.docx, checkpoint.config.to_dict(),
    )
    if args.diagnostics:
        _dump_diagnostics(args.out, dataset.split(args.split)[0], checkpoint.params, checkpoint.config)
    print(f'{args.split} WAF1 {metrics.waf1:.4f}  accuracy {metrics.accuracy:.4f}')
    return 0


def cmd_predict(args):
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = _checkpoint_dataset(args, checkpoint)
    conversations = dataset.split(args.split) if args.split else list(dataset.conversations)
    predictions = predict_dataset(conversations, checkpoint.params, checkpoint.config)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_predictions_csv(args.out, predictions, dataset.labels)
    print(f'wrote {args.out}')
    return 0


def cmd_gen(args):
    try:
        spec = SynthSpec.load(args.spec) if args.spec else SynthSpec()
    except (ArgumentError, TypeError) as e:
        raise UsageError(f'invalid synthetic spec: {e}') from e
    dataset = generate_synthetic(spec, args.seed)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save_dataset(dataset, args.out)
    print(f'wrote {len(dataset)} conversations to {args.out}')
    return 0


def ablation_variants(run, axis):
    """``(name, TrainConfig)`` pairs along ``axis``; every other setting is shared."""
    base = run.train
    if axis == 'neighborhood':
        return [(v, base.replace(neighborhood=v)) for v in run.neighborhood_sweep]
    if axis == 'gamma':
        return [(str(g), base.replace(gamma=g)) for g in run.gamma_sweep]
    if axis == 'layers':
        variants = [('bilevel', base.replace(gcn_layers=0))]
        variants.extend((f'gcn_x{k}', base.replace(gcn_layers=k)) for k in run.layer_sweep)
        return variants
    if axis == 'modality':
        return [(''.join(s), base.replace(modalities=list(s))) for s in run.modality_sweep]
    if axis == 'clusters':
        variants = []
        for subset in run.modality_sweep:
            name = ''.join(subset)
            variants.append((f'{name}:with_clusters', base.replace(modalities=list(subset), use_clusters=True)))
            variants.append((f'{name}:without_clusters', base.replace(modalities=list(subset), use_clusters=False)))
        return variants
    if axis == 'graph':
        return [(mode, base.replace(graph_mode=mode)) for mode in ('ggm', 'full')]
    raise UsageError(f'unknown ablation axis {axis!r}; choose from {ABLATION_AXES}')


def _mean_node_variance(conversations, params, cfg):
    return float(np.mean([
        node_variance(aggregate_nodes(params.tensors, c, cfg)) for c in conversations
    ]))


def run_ablation(run, axis, dataset):
    """Trains and evaluates every variant for each ablation seed; reports medians."""
    rows = []
    eval_set = dataset.split(run.eval_split)
    for name, cfg in ablation_variants(run, axis):
        scores, accuracies, variances = [], [], []
        for seed in run.ablation_seeds:
            seeded = cfg.replace(seed=seed)
            result = train(dataset, seeded)
            metrics = evaluate(eval_set, result.params, seeded)
            scores.append(metrics.waf1)
            accuracies.append(metrics.accuracy)
            variances.append(_mean_node_variance(eval_set, result.params, seeded))
        logger.info('ablation %s=%s: median WAF1 %.4f', axis, name, statistics.median(scores))
        rows.append((
            axis, name, repr(statistics.median(scores)), repr(statistics.median(accuracies)),
            repr(statistics.median(variances)), ' '.join(repr(s) for s in scores),
        ))
    return rows


def cmd_ablate(args):
    run = _run_config(args)
    if args.seeds:
        run = run.with_overrides(ablation_seeds=tuple(args.seeds))
    dataset = _prepare_dataset(run)
    rows = run_ablation(run, args.axis, dataset)
    os.makedirs(run.output_dir, exist_ok=True)
    path = os.path.join(run.output_dir, f'ablation_{args.axis}.csv')
    write_table_csv(path, ('axis', 'variant', 'waf1', 'accuracy', 'node_variance', 'waf1_per_seed'), rows)
    print(f'wrote {len(rows)} rows to {path}')
    return 0


def cmd_gradcheck(args):
    cfg = RunConfig.load(args.config).train if args.config else None
    report = run_gradcheck(cfg, seed=args.seed, corrupt_segment=args.corrupt_segment)
    print(f'max relative error: {report.max_error:.3e}')
    if report.passed(GRADCHECK_TOLERANCE):
        print('PASS')
        return 0
    print(f'FAIL: worst parameter segment {report.worst_segment} (index {report.worst_index})')
    for name, error in sorted(report.segment_errors.items(), key=lambda item: -item[1]):
        if error >= GRADCHECK_TOLERANCE:
            print(f'  {name}: {error:.3e}')
    return 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog='ercgraph', description='Graph-based emotion recognition in conversation with similarity clusters and bilevel aggregation',
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='Train a model and write checkpoint, history and metrics')
    p.add_argument('--config', help='JSON run config')
    p.add_argument('--dataset', help='JSONL dataset; overrides the config')
    p.add_argument('--splits', help='splits JSON; default is a seeded split by split_ratios')
    p.add_argument('--out', help='output directory; overrides output_dir')
    p.add_argument('--seed', type=int, help='root seed; overrides the config')
    p.add_argument('--epochs', type=int, help='maximum epochs; overrides max_epochs')
    p.add_argument('--docx', action='store_true', help='also write report.docx')
    p.add_argument('--diagnostics', action='store_true', help='dump the graph and clusters of one conversation')
    p.set_defaults(handler=cmd_train)

    for name, handler, help_text in (
        ('eval', cmd_eval, 'Evaluate a checkpoint on a dataset split'),
        ('predict', cmd_predict, 'Write per-utterance predictions'),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('checkpoint', help='checkpoint.json written by train')
        p.add_argument('dataset', help='JSONL dataset')
        p.add_argument('--splits', help='splits JSON; default is splits.json next to the checkpoint')
        if name == 'eval':
            p.add_argument('--split', default='test', choices=('train', 'val', 'test'))
            p.add_argument('--out', default='eval', help='output directory')
            p.add_argument('--docx', action='store_true', help='also write report.docx')
            p.add_argument('--diagnostics', action='store_true', help='dump the graph and clusters of one conversation')
        else:
            p.add_argument('--split', choices=('train', 'val', 'test'), help='restrict to one split')
            p.add_argument('--out', default=PREDICTIONS_FILE, help='predictions CSV path')
        p.set_defaults(handler=handler)

    p = sub.add_parser('gen', help='Generate a synthetic dataset')
    p.add_argument('--spec', help='JSON synthetic spec; defaults apply when omitted')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True, help='output JSONL path')
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser('ablate', help='Train and evaluate variants along one ablation axis')
    p.add_argument('axis', choices=ABLATION_AXES)
    p.add_argument('--config', help='JSON run config')
    p.add_argument('--dataset', help='JSONL dataset; overrides the config')
    p.add_argument('--splits', help='splits JSON')
    p.add_argument('--out', help='output directory; overrides output_dir')
    p.add_argument('--seed', type=int, help='root seed for the split')
    p.add_argument('--seeds', type=int, nargs='+', help='training seeds; overrides ablation_seeds')
    p.add_argument('--epochs', type=int, help='maximum epochs; overrides max_epochs')
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser('gradcheck', help='Finite-difference check of the end-to-end gradient')
    p.add_argument('--config', help='JSON run config; dropout must be 0')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--corrupt-segment', help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get('ERCGRAPH_LOG_LEVEL', 'INFO').upper(),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except UsageError as e:
        print(f'ercgraph {args.command}: {e}', file=sys.stderr)
        return 2
    except (ErcGraphError, OSError) as e:
        logger.debug('%s failed', args.command, exc_info=True)
        print(f'ercgraph {args.command}: error: {e}', file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
