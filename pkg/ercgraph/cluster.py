"""
Similarity-based cluster building.

For a target node, every member of its structural neighborhood is scored by
angular similarity and mapped to cluster ``floor(gamma * s)``. Members whose
neighborhood carries the filter flag are dropped when ``s < rho``.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Mapping

import numpy as np

from .errors import ArgumentError, DimensionError, NumericError
from .graph import NodeId, node_order

logger = logging.getLogger(__name__)

FILTERED = -1
CONNECTED = 'connected'
DISCONNECTED = 'disconnected'
NEIGHBORHOOD_MODES = ('cg', 'dg', 'cg+dg')

# name -> (neighborhood_mode, filter_cg, filter_dg)
NEIGHBORHOOD_VARIANTS = {
    'cg': ('cg', False, False),
    'dg': ('dg', False, False),
    'cg_filtered': ('cg', True, False),
    'dg_filtered': ('dg', False, True),
    'cg+dg': ('cg+dg', False, False),
    'cg_filtered+dg': ('cg+dg', True, False),
    'cg_filtered+dg_filtered': ('cg+dg', True, True),
    'cg+dg_filtered': ('cg+dg', False, True),
}
DEFAULT_VARIANT = 'cg+dg_filtered'


@dataclass(frozen=True)
class SimilarityConfig:
    gamma: int = 8
    rho: float = 0.3
    neighborhood_mode: str = 'cg+dg'
    filter_cg: bool = False
    filter_dg: bool = True
    use_clusters: bool = True

    def __post_init__(self):
        if int(self.gamma) != self.gamma or self.gamma < 1:
            raise ArgumentError(f'gamma must be a positive integer, got {self.gamma}')
        if not 0.0 <= self.rho <= 1.0:
            raise ArgumentError(f'rho must lie in [0, 1], got {self.rho}')
        if self.neighborhood_mode not in NEIGHBORHOOD_MODES:
            raise ArgumentError(f'unknown neighborhood mode {self.neighborhood_mode!r}')

    @classmethod
    def from_variant(cls, variant=DEFAULT_VARIANT, gamma=8, rho=0.3, use_clusters=True):
        try:
            mode, filter_cg, filter_dg = NEIGHBORHOOD_VARIANTS[variant]
        except KeyError:
            raise ArgumentError(
                f'unknown neighborhood variant {variant!r}; choose from {sorted(NEIGHBORHOOD_VARIANTS)}'
            ) from None
        return cls(gamma, rho, mode, filter_cg, filter_dg, use_clusters)

    @property
    def n_clusters(self):
        return self.gamma + 1

    def uses(self, membership):
        if membership == CONNECTED:
            return self.neighborhood_mode in ('cg', 'cg+dg')
        return self.neighborhood_mode in ('dg', 'cg+dg')

    def filters(self, membership):
        return self.filter_cg if membership == CONNECTED else self.filter_dg


def similarity(f_u, f_o):
    """
    Angular similarity ``1 - angle(f_u, f_o) / pi`` in [0, 1].

    The angle is evaluated as ``2 atan2(|û - ô|, |û + ô|)``, which equals the
    clamped arccos of the cosine and is exact for parallel, orthogonal and
    antiparallel pairs. A zero-norm vector yields 0.5.
    """
    u = np.asarray(f_u, dtype=np.float64)
    o = np.asarray(f_o, dtype=np.float64)
    if u.shape != o.shape or u.ndim != 1:
        raise DimensionError(f'similarity: shapes {u.shape} and {o.shape} differ')
    norm_u = float(np.linalg.norm(u))
    norm_o = float(np.linalg.norm(o))
    if norm_u == 0.0 or norm_o == 0.0:
        logger.debug('zero-norm feature in similarity; using 0.5')
        return 0.5
    hat_u, hat_o = u / norm_u, o / norm_o
    angle = 2.0 * math.atan2(float(np.linalg.norm(hat_u - hat_o)), float(np.linalg.norm(hat_u + hat_o)))
    return 1.0 - angle / math.pi


def similarity_rows(features, rows=None):
    """
    Angular similarity of selected rows of ``features`` against every row.

    Same formula as :func:`similarity`, evaluated for all pairs at once.

    :param features: (n, d) matrix.
    :param rows: row indices to score; all rows when None.
    :return: ``(scores, zero)`` where ``scores[k, j]`` compares ``rows[k]``
        with row ``j`` and ``zero[j]`` flags zero-norm rows.
    """
    matrix = np.asarray(features, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionError(f'similarity_rows: expected an (n, d) matrix, got shape {matrix.shape}')
    norms = np.sqrt((matrix * matrix).sum(axis=1))
    zero = norms == 0.0
    unit = matrix / np.where(zero, 1.0, norms)[:, None]
    rows = np.arange(len(matrix)) if rows is None else np.asarray(rows, dtype=int)
    targets = unit[rows][:, None, :]
    diff = unit[None, :, :] - targets
    total = unit[None, :, :] + targets
    angle = 2.0 * np.arctan2(np.sqrt((diff * diff).sum(axis=2)), np.sqrt((total * total).sum(axis=2)))
    scores = 1.0 - angle / math.pi
    scores[:, zero] = 0.5
    scores[zero[rows], :] = 0.5
    return scores, zero


def cluster_id(s, membership, cfg):
    """
    Maps a similarity to a cluster id in ``0..gamma`` or ``FILTERED``.

    :param float s: similarity in [0, 1].
    :param str membership: ``connected`` or ``disconnected``.
    :param SimilarityConfig cfg: granularity, threshold and filter flags.
    """
    if not 0.0 <= s <= 1.0:
        raise NumericError(f'similarity {s} outside [0, 1]')
    if cfg.filters(membership) and s < cfg.rho:
        return FILTERED
    if not cfg.use_clusters:
        return 0
    if s >= 1.0:
        return cfg.gamma
    return min(int(math.floor(cfg.gamma * s)), cfg.gamma - 1)


@dataclass(frozen=True)
class ClusterAssignment:
    """
    Cluster ids of the retained neighborhood members of one target.

    ``zero_norm`` counts the candidates scored at 0.5 because either feature
    had zero norm.
    """
    target: NodeId
    members: Dict[NodeId, int]
    dropped: FrozenSet[NodeId]
    similarities: Dict[NodeId, float] = field(default_factory=dict)
    zero_norm: int = 0

    def cluster(self, r):
        """Members of cluster ``r`` in canonical order."""
        return tuple(u for u, rid in self.members.items() if rid == r)

    def to_json(self):
        return {
            'target': str(self.target),
            'members': {str(u): r for u, r in self.members.items()},
            'dropped': [str(u) for u in sorted(self.dropped, key=node_order)],
            'similarity': {str(u): s for u, s in self.similarities.items()},
            'zero_norm': self.zero_norm,
        }


def _feature(features, graph, node):
    if isinstance(features, Mapping):
        return features[node]
    return features[graph.index_of(node)]


def _candidates(graph, target, cfg):
    candidates = []
    if cfg.uses(CONNECTED):
        candidates.extend((u, CONNECTED) for u in graph.connected_neighborhood(target))
    if cfg.uses(DISCONNECTED):
        candidates.extend((u, DISCONNECTED) for u in graph.disconnected_neighborhood(target))
    candidates.sort(key=lambda item: node_order(item[0]))
    return candidates


def _assign(target, candidates, scores, zero_target, zero, cfg):
    members, dropped, similarities = {}, set(), {}
    for (u, membership), s in zip(candidates, scores):
        s = float(s)
        similarities[u] = s
        r = cluster_id(s, membership, cfg)
        if r == FILTERED:
            dropped.add(u)
        else:
            members[u] = r
    zero_norm = len(candidates) if zero_target else int(sum(bool(z) for z in zero))
    if zero_norm:
        logger.debug('%s: %d zero-norm similarities scored 0.5', target, zero_norm)
    return ClusterAssignment(target, members, frozenset(dropped), similarities, zero_norm)


def build_clusters(graph, target, features, cfg):
    """
    Builds the cluster assignment of ``target``.

    :param ConversationGraph graph: the conversation graph.
    :param NodeId target: node being updated; it never joins a cluster itself.
    :param features: (n, d) array aligned with ``graph.nodes`` or a mapping NodeId -> vector.
    :param SimilarityConfig cfg: clustering configuration.
    :rtype: ClusterAssignment
    """
    candidates = _candidates(graph, target, cfg)
    vectors = [_feature(features, graph, target)] + [_feature(features, graph, u) for u, _ in candidates]
    shapes = {np.shape(v) for v in vectors}
    if len(shapes) != 1 or len(next(iter(shapes))) != 1:
        raise DimensionError(f'features of {target} and its neighbors must be equal-length vectors, got {sorted(shapes)}')
    scores, zero = similarity_rows(np.stack(vectors), [0])
    return _assign(target, candidates, scores[0, 1:], zero[0], zero[1:], cfg)


def build_all_clusters(graph, features, cfg):
    """
    Assignments for every node, in canonical node order.

    :param features: (n, d) array aligned with ``graph.nodes``.
    """
    matrix = np.asarray(features, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != len(graph):
        raise DimensionError(f'features have shape {matrix.shape}, expected ({len(graph)}, d)')
    scores, zero = similarity_rows(matrix)
    assignments = []
    for k, target in enumerate(graph.nodes):
        candidates = _candidates(graph, target, cfg)
        columns = [graph.index_of(u) for u, _ in candidates]
        assignments.append(_assign(target, candidates, scores[k, columns], zero[k], zero[columns], cfg))
    return assignments


def dump_assignments(assignments, path):
    with open(path, 'w', encoding='utf-8') as outfile:
        json.dump([a.to_json() for a in assignments], outfile, indent=2)
