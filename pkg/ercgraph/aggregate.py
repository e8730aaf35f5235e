"""
Bilevel aggregation over similarity clusters, plus a mean-aggregation GCN
layer used as the comparison baseline.

First level: each cluster r of a target o becomes a virtual node, the mean of
``W_r g_u + b_r`` over its members (an empty cluster gives the zero vector).
Second level: ``h_o = ReLU(W (e_0 ‖ ... ‖ e_gamma ‖ g_o))``.

Within-cluster means are taken through a constant averaging matrix whose
columns follow the canonical node order, so results do not depend on the
order in which neighbors happen to be stored.
"""

import logging
from dataclasses import dataclass
from typing import Any, List, Sequence, Tuple

import numpy as np

from .cluster import build_all_clusters
from .encoder import xavier_uniform
from .errors import ArgumentError, DimensionError
from .graph import node_order
from .numeric import (
    DTYPE, add, concat, dropout, lift, linear, matmul, mul, relu, row, scale,
    stack, value_of,
)

logger = logging.getLogger(__name__)

SECOND_LEVEL_MODES = ('joint', 'per_cluster')


@dataclass
class BiamParams:
    """
    Per-cluster affine maps and the second-level matrix.

    ``W`` maps ``(gamma + 2) d`` inputs to ``d_out`` in ``joint`` mode and
    ``2 d`` inputs in ``per_cluster`` mode.
    """
    cluster_W: Sequence[Any]
    cluster_b: Sequence[Any]
    W: Any
    second_level: str = 'joint'

    @property
    def gamma(self):
        return len(self.cluster_W) - 1

    @property
    def dim(self):
        return value_of(self.cluster_W[0]).shape[1]

    @property
    def out_dim(self):
        return value_of(self.W).shape[0]

    def validate(self):
        if len(self.cluster_W) != len(self.cluster_b) or len(self.cluster_W) < 2:
            raise DimensionError('BiAM needs gamma + 1 >= 2 matching per-cluster maps')
        d = self.dim
        for W_r, b_r in zip(self.cluster_W, self.cluster_b):
            if value_of(W_r).shape != (d, d) or value_of(b_r).shape != (d,):
                raise DimensionError(f'per-cluster map must be {d}x{d} with bias {d}')
        if self.second_level not in SECOND_LEVEL_MODES:
            raise ArgumentError(f'unknown second-level mode {self.second_level!r}')
        blocks = self.gamma + 2 if self.second_level == 'joint' else 2
        if value_of(self.W).shape[1] != blocks * d:
            raise DimensionError(
                f'second-level W has {value_of(self.W).shape[1]} columns, expected {blocks * d}'
            )
        return self

    @classmethod
    def initialize(cls, dim, out_dim, gamma, rng, second_level='joint'):
        cluster_W = [xavier_uniform(dim, dim, rng) for _ in range(gamma + 1)]
        cluster_b = [np.zeros(dim, dtype=DTYPE) for _ in range(gamma + 1)]
        blocks = gamma + 2 if second_level == 'joint' else 2
        W = xavier_uniform(out_dim, blocks * dim, rng)
        return cls(cluster_W, cluster_b, W, second_level)


@dataclass
class VirtualNodes:
    """First-level output of one target: one vector per cluster id."""
    vectors: List[Any]
    empty: Tuple[bool, ...]


def membership_weights(assignments, nodes, n_clusters):
    """
    Averaging tensor for a batch of targets.

    :return: ``(weights, nonempty)`` with ``weights[r, k, j] = 1/|cluster r of
        target k|`` for members j, and ``nonempty[k, r]`` in {0, 1}.
    """
    position = {node: j for j, node in enumerate(nodes)}
    weights = np.zeros((n_clusters, len(assignments), len(nodes)), dtype=DTYPE)
    nonempty = np.zeros((len(assignments), n_clusters), dtype=DTYPE)
    for k, assignment in enumerate(assignments):
        groups = {}
        for u, r in assignment.members.items():
            groups.setdefault(r, []).append(position[u])
        for r, columns in groups.items():
            nonempty[k, r] = 1.0
            weights[r, k, columns] = 1.0 / len(columns)
    return weights, nonempty


def _virtual_blocks(weights, nonempty, features, params):
    blocks = []
    dim = params.dim
    for r in range(params.gamma + 1):
        present = nonempty[:, r]
        if not present.any():
            blocks.append(lift(np.zeros((weights.shape[1], dim), dtype=DTYPE)))
            continue
        means = matmul(weights[r], features)
        mapped = linear(params.cluster_W[r], params.cluster_b[r], means)
        if not present.all():
            mapped = mul(mapped, np.repeat(present[:, None], dim, axis=1))
        blocks.append(mapped)
    return blocks


def first_level(assignment, features, params):
    """
    Virtual nodes of one target.

    :param ClusterAssignment assignment: cluster ids of the target's members.
    :param features: mapping NodeId -> vector (array or variable) covering the members.
    :param BiamParams params: aggregation weights.
    :rtype: VirtualNodes
    """
    params.validate()
    nodes = sorted(features, key=node_order)
    for u, r in assignment.members.items():
        if not 0 <= r <= params.gamma:
            raise DimensionError(f'cluster id {r} of {u} exceeds gamma={params.gamma}')
        if u not in features:
            raise ArgumentError(f'no feature for member {u}')
    matrix = stack([features[u] for u in nodes])
    if matrix.shape[1] != params.dim:
        raise DimensionError(f'features have dim {matrix.shape[1]}, BiAM expects {params.dim}')
    weights, nonempty = membership_weights([assignment], nodes, params.gamma + 1)
    blocks = _virtual_blocks(weights, nonempty, matrix, params)
    return VirtualNodes([row(block, 0) for block in blocks], tuple(not bool(x) for x in nonempty[0]))


def _per_cluster_fusion(blocks, nonempty, features, params, rate, rng, training):
    dim_out = params.out_dim
    counts = nonempty.sum(axis=1)
    share = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    total = None
    for r, block in enumerate(blocks):
        weight = nonempty[:, r] * share
        if not weight.any():
            continue
        x = dropout(concat([block, features], axis=1), rate, rng, training)
        term = mul(relu(linear(params.W, None, x)), np.repeat(weight[:, None], dim_out, axis=1))
        total = term if total is None else add(total, term)
    lonely = (counts == 0).astype(DTYPE)
    if lonely.any():
        zeros = np.zeros((features.shape[0], params.dim), dtype=DTYPE)
        x = dropout(concat([zeros, features], axis=1), rate, rng, training)
        term = mul(relu(linear(params.W, None, x)), np.repeat(lonely[:, None], dim_out, axis=1))
        total = term if total is None else add(total, term)
    return total


def second_level(virtual, g_i, params):
    """
    Fuses the virtual nodes of one target with its own embedding.

    In ``joint`` mode the virtual nodes are concatenated in ascending
    cluster-id order followed by ``g_i``.
    """
    params.validate()
    g_i = lift(g_i)
    if len(virtual.vectors) != params.gamma + 1:
        raise DimensionError(f'expected {params.gamma + 1} virtual nodes, got {len(virtual.vectors)}')
    if g_i.shape != (params.dim,):
        raise DimensionError(f'target embedding has shape {g_i.shape}, expected ({params.dim},)')
    if params.second_level == 'joint':
        return relu(linear(params.W, None, concat(list(virtual.vectors) + [g_i])))
    present = [r for r, empty in enumerate(virtual.empty) if not empty]
    if not present:
        return relu(linear(params.W, None, concat([np.zeros(params.dim), g_i])))
    terms = [relu(linear(params.W, None, concat([virtual.vectors[r], g_i]))) for r in present]
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return scale(total, 1.0 / len(present))


def virtual_node_blocks(graph, features, params, cfg):
    """
    First level for every node of ``graph``.

    :return: ``(assignments, blocks, nonempty)`` where ``blocks[r]`` is an
        (n, d) variable holding the cluster-r virtual node of each target.
    """
    params.validate()
    features = lift(features)
    if features.shape != (len(graph), params.dim):
        raise DimensionError(f'features have shape {features.shape}, expected ({len(graph)}, {params.dim})')
    if cfg.gamma != params.gamma:
        raise DimensionError(f'clustering gamma={cfg.gamma} but parameters were built for gamma={params.gamma}')
    assignments = build_all_clusters(graph, features.value, cfg)
    weights, nonempty = membership_weights(assignments, graph.nodes, params.gamma + 1)
    if logger.isEnabledFor(logging.DEBUG):
        dropped = sum(len(a.dropped) for a in assignments)
        logger.debug('clustered %d targets, %d members filtered', len(assignments), dropped)
    return assignments, _virtual_blocks(weights, nonempty, features, params), nonempty


def rba_layer(graph, features, params, cfg, rate=0.0, rng=None, training=False):
    """
    One synchronous bilevel-aggregation layer over all nodes.

    :param ConversationGraph graph: conversation graph.
    :param features: (n, d) node features aligned with ``graph.nodes``; every
        target reads these frozen inputs.
    :param BiamParams params: aggregation weights.
    :param SimilarityConfig cfg: clustering configuration.
    :param float rate: dropout rate on the second-level input.
    :return: (n, d_out) variable.
    """
    features = lift(features)
    _, blocks, nonempty = virtual_node_blocks(graph, features, params, cfg)
    if params.second_level == 'per_cluster':
        return _per_cluster_fusion(blocks, nonempty, features, params, rate, rng, training)
    x = dropout(concat(blocks + [features], axis=1), rate, rng, training)
    return relu(linear(params.W, None, x))


def mean_operator(graph):
    """Row-stochastic matrix averaging each node with its connected neighborhood."""
    n = len(graph)
    P = np.zeros((n, n), dtype=DTYPE)
    for k, node in enumerate(graph.nodes):
        members = [node] + sorted(graph.connected_neighborhood(node), key=node_order)
        for u in members:
            P[k, graph.index_of(u)] = 1.0 / len(members)
    return P


def baseline_gcn_layer(graph, features, W_base):
    """``h_o = ReLU(W_base mean({g_u : u in C_g(o)} ∪ {g_o}))`` for every node."""
    features = lift(features)
    if features.shape[0] != len(graph):
        raise DimensionError(f'{features.shape[0]} feature rows for {len(graph)} nodes')
    return relu(linear(W_base, None, matmul(mean_operator(graph), features)))


def node_variance(features):
    """Mean over feature dimensions of the variance across nodes."""
    values = value_of(features)
    return float(values.var(axis=0).mean())
