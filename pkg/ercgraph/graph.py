"""
Conversation graph generation.

Every (utterance, modality) pair is a node. Nodes of one modality are chained
in conversation order and the modality nodes of one utterance form a clique.
Graphs never span conversations.
"""

import json
import logging
from dataclasses import dataclass
from itertools import combinations
from typing import FrozenSet, NamedTuple

from .errors import ArgumentError, DataError

logger = logging.getLogger(__name__)

MODALITIES = ('t', 'v', 'a')
GRAPH_MODES = ('ggm', 'full')


class NodeId(NamedTuple):
    index: int
    modality: str

    def __str__(self):
        return f'{self.index}:{self.modality}'

    @classmethod
    def parse(cls, text):
        index, _, modality = text.partition(':')
        if modality not in MODALITIES:
            raise ArgumentError(f'bad node id {text!r}')
        return cls(int(index), modality)


def node_order(node):
    """Canonical sort key: utterance index, then modality in t, v, a order."""
    return (node.index, MODALITIES.index(node.modality))


def canonical_modalities(modalities):
    """Validates a modality subset and returns it in canonical order."""
    chosen = set(modalities)
    if not chosen or not chosen <= set(MODALITIES):
        raise ArgumentError(f'modalities must be a non-empty subset of {MODALITIES}, got {tuple(modalities)}')
    return tuple(m for m in MODALITIES if m in chosen)


@dataclass(frozen=True)
class StructuralNeighborhood:
    connected: FrozenSet[NodeId]
    disconnected: FrozenSet[NodeId]


class ConversationGraph:
    """
    Undirected graph of one conversation.

    ``nodes`` is in canonical order and row k of any node-feature matrix
    belongs to ``nodes[k]``. Adjacency is stored as tuples whose order carries
    no meaning; every consumer sorts canonically.
    """

    def __init__(self, nodes, adjacency, n_utterances, modalities, mode='ggm'):
        self.nodes = tuple(nodes)
        self.adjacency = dict(adjacency)
        self.n_utterances = n_utterances
        self.modalities = tuple(modalities)
        self.mode = mode
        self._position = {node: k for k, node in enumerate(self.nodes)}

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, node):
        return node in self._position

    @property
    def edges(self):
        return frozenset(
            frozenset((u, v)) for u, neighbors in self.adjacency.items() for v in neighbors
        )

    def index_of(self, node):
        try:
            return self._position[node]
        except KeyError:
            raise ArgumentError(f'node {node} is not in the graph') from None

    def neighbors(self, node):
        self.index_of(node)
        return self.adjacency[node]

    def connected_neighborhood(self, node):
        return frozenset(self.neighbors(node))

    def disconnected_neighborhood(self, node):
        adjacent = set(self.neighbors(node))
        return frozenset(
            u for u in self.nodes
            if u.modality == node.modality and u != node and u not in adjacent
        )

    def structural_neighborhood(self, node):
        return StructuralNeighborhood(
            self.connected_neighborhood(node), self.disconnected_neighborhood(node)
        )

    def with_shuffled_storage(self, rng):
        """Copy whose adjacency tuples are stored in a random order."""
        shuffled = {}
        for node, neighbors in self.adjacency.items():
            order = rng.permutation(len(neighbors))
            shuffled[node] = tuple(neighbors[k] for k in order)
        return ConversationGraph(self.nodes, shuffled, self.n_utterances, self.modalities, self.mode)

    def to_json(self):
        return {
            'mode': self.mode,
            'nodes': [str(n) for n in self.nodes],
            'adjacency': {
                str(n): [str(u) for u in sorted(self.adjacency[n], key=node_order)]
                for n in self.nodes
            },
        }

    def dump(self, path):
        with open(path, 'w', encoding='utf-8') as outfile:
            json.dump(self.to_json(), outfile, indent=2)


def graph_of_size(n_utterances, modalities=MODALITIES, mode='ggm'):
    """
    Builds the graph for a conversation of ``n_utterances`` utterances.

    :param int n_utterances: N >= 1.
    :param modalities: active modalities; defaults to all three.
    :param str mode: ``ggm`` (chains plus per-utterance cliques) or ``full``.
    """
    if n_utterances < 1:
        raise ArgumentError('a conversation needs at least one utterance')
    if mode not in GRAPH_MODES:
        raise ArgumentError(f'unknown graph mode {mode!r}')
    modalities = canonical_modalities(modalities)
    nodes = [NodeId(i, m) for i in range(n_utterances) for m in modalities]
    adjacency = {node: [] for node in nodes}

    def connect(u, v):
        adjacency[u].append(v)
        adjacency[v].append(u)

    if mode == 'full':
        for u, v in combinations(nodes, 2):
            connect(u, v)
    else:
        for m in modalities:
            for i in range(n_utterances - 1):
                connect(NodeId(i, m), NodeId(i + 1, m))
        for i in range(n_utterances):
            for a, b in combinations(modalities, 2):
                connect(NodeId(i, a), NodeId(i, b))
    graph = ConversationGraph(
        nodes, {n: tuple(adj) for n, adj in adjacency.items()}, n_utterances, modalities, mode
    )
    logger.debug('built %s graph: %d nodes, %d edges', mode, len(nodes), len(graph.edges))
    return graph


def build_graph(conversation, modalities=MODALITIES, mode='ggm'):
    """
    Builds the graph of a conversation after checking every utterance carries
    the active modalities.
    """
    modalities = canonical_modalities(modalities)
    for utterance in conversation.utterances:
        missing = [m for m in modalities if m not in utterance.features]
        if missing:
            raise DataError(f'utterance {utterance.id} is missing modalities {missing}')
    return graph_of_size(len(conversation.utterances), modalities, mode)


def connected_neighborhood(graph, node):
    return graph.connected_neighborhood(node)


def disconnected_neighborhood(graph, node):
    return graph.disconnected_neighborhood(node)
