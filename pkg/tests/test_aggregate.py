import unittest

import numpy as np

from .context import ercgraph  # noqa: F401
from ercgraph.aggregate import (
    BiamParams, baseline_gcn_layer, first_level, mean_operator, membership_weights, node_variance, rba_layer,
    second_level, virtual_node_blocks,
)
from ercgraph.cluster import ClusterAssignment, SimilarityConfig, build_clusters
from ercgraph.errors import DimensionError
from ercgraph.graph import NodeId, graph_of_size
from ercgraph.numeric import Tape, grad_check, linear, reshape


def identity_params(dim, gamma):
    return BiamParams(
        [np.eye(dim) for _ in range(gamma + 1)],
        [np.zeros(dim) for _ in range(gamma + 1)],
        np.hstack([np.zeros((dim, (gamma + 1) * dim)), np.eye(dim)]),
    )


def oracle_layer(graph, features, params, cfg):
    """Straight-line re-implementation: clusters, loop means, dense multiply."""
    d = params.dim
    out = []
    for k, target in enumerate(graph.nodes):
        assignment = build_clusters(graph, target, features, cfg)
        blocks = []
        for r in range(params.gamma + 1):
            members = [u for u, rid in assignment.members.items() if rid == r]
            acc = np.zeros(d)
            for u in members:
                acc += params.cluster_W[r] @ features[graph.index_of(u)] + params.cluster_b[r]
            blocks.append(acc / len(members) if members else acc)
        x = np.concatenate(blocks + [features[k]])
        out.append(np.maximum(params.W @ x, 0.0))
    return np.array(out)


class FirstLevelTest(unittest.TestCase):

    def setUp(self):
        self.target = NodeId(0, 't')

    def assignment(self, members):
        return ClusterAssignment(self.target, members, frozenset())

    def test_single_member_identity(self):
        g = np.array([0.5, -1.0, 2.0])
        virtual = first_level(self.assignment({NodeId(1, 't'): 1}), {NodeId(1, 't'): g}, identity_params(3, 2))
        np.testing.assert_array_equal(virtual.vectors[1].value, g)
        np.testing.assert_array_equal(virtual.vectors[0].value, np.zeros(3))
        self.assertEqual(virtual.empty, (True, False, True))

    def test_opposite_members_cancel(self):
        v = np.array([1.0, 2.0, -3.0])
        features = {NodeId(1, 't'): v, NodeId(0, 'v'): -v}
        virtual = first_level(self.assignment({NodeId(0, 'v'): 0, NodeId(1, 't'): 0}), features, identity_params(3, 1))
        np.testing.assert_array_equal(virtual.vectors[0].value, np.zeros(3))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        params = BiamParams.initialize(4, 3, 2, rng)
        for r in range(3):
            params.cluster_b[r] = rng.normal(size=4)
        nodes = [NodeId(1, 't'), NodeId(0, 'v'), NodeId(0, 'a'), NodeId(2, 't'), NodeId(3, 't')]
        ids = [0, 2, 0, 2, 2]
        features = {u: rng.normal(size=4) for u in nodes}
        virtual = first_level(self.assignment(dict(zip(nodes, ids))), features, params)
        for r in range(3):
            members = [u for u, rid in zip(nodes, ids) if rid == r]
            want = np.zeros(4)
            for u in members:
                want += params.cluster_W[r] @ features[u] + params.cluster_b[r]
            if members:
                want /= len(members)
            np.testing.assert_allclose(virtual.vectors[r].value, want, atol=1e-12)

    def test_membership_weights_for_a_batch(self):
        nodes = [NodeId(0, 't'), NodeId(0, 'v'), NodeId(1, 't'), NodeId(1, 'v')]
        first = ClusterAssignment(nodes[0], {nodes[1]: 1, nodes[2]: 1, nodes[3]: 0}, frozenset())
        second = ClusterAssignment(nodes[2], {nodes[0]: 2}, frozenset())
        weights, nonempty = membership_weights([first, second], nodes, 3)
        self.assertEqual(weights.shape, (3, 2, 4))
        np.testing.assert_array_equal(weights[1, 0], [0.0, 0.5, 0.5, 0.0])
        np.testing.assert_array_equal(weights[0, 0], [0.0, 0.0, 0.0, 1.0])
        np.testing.assert_array_equal(weights[2, 1], [1.0, 0.0, 0.0, 0.0])
        np.testing.assert_array_equal(nonempty, [[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        self.assertEqual(weights[:, 1, :2].sum(), 1.0)

    def test_scaling_members_is_affine(self):
        rng = np.random.default_rng(8)
        params = BiamParams.initialize(3, 2, 1, rng)
        params.cluster_b[1] = rng.normal(size=3)
        nodes = [NodeId(1, 't'), NodeId(0, 'v')]
        features = {u: rng.normal(size=3) for u in nodes}
        assignment = self.assignment({u: 1 for u in nodes})
        base = first_level(assignment, features, params).vectors[1].value
        scaled = first_level(assignment, {u: 2.5 * f for u, f in features.items()}, params).vectors[1].value
        b = params.cluster_b[1]
        np.testing.assert_allclose(scaled, 2.5 * (base - b) + b, atol=1e-12)

    def test_duplicating_members_keeps_the_mean(self):
        rng = np.random.default_rng(9)
        params = BiamParams.initialize(3, 2, 2, rng)
        a, b = rng.normal(size=3), rng.normal(size=3)
        small = {NodeId(1, 't'): a, NodeId(2, 't'): b}
        large = dict(small)
        large.update({NodeId(3, 't'): a, NodeId(4, 't'): b})
        e_small = first_level(self.assignment({u: 2 for u in small}), small, params).vectors[2].value
        e_large = first_level(self.assignment({u: 2 for u in large}), large, params).vectors[2].value
        np.testing.assert_allclose(e_small, e_large, atol=1e-12)

    def test_dimension_errors(self):
        params = identity_params(3, 1)
        with self.assertRaises(DimensionError):
            first_level(self.assignment({NodeId(1, 't'): 1}), {NodeId(1, 't'): np.ones(4)}, params)
        with self.assertRaises(DimensionError):
            first_level(self.assignment({NodeId(1, 't'): 5}), {NodeId(1, 't'): np.ones(3)}, params)


class SecondLevelTest(unittest.TestCase):

    def virtual(self, gamma, dim):
        first = identity_params(dim, gamma)
        return first_level(ClusterAssignment(NodeId(0, 't'), {}, frozenset()), {NodeId(1, 't'): np.ones(dim)}, first)

    def test_selecting_the_target(self):
        g = np.array([1.0, -2.0, 0.5])
        h = second_level(self.virtual(2, 3), g, identity_params(3, 2))
        np.testing.assert_array_equal(h.value, np.maximum(g, 0.0))

    def test_zero_weights(self):
        params = identity_params(3, 2)
        params.W = np.zeros_like(params.W)
        h = second_level(self.virtual(2, 3), np.ones(3), params)
        np.testing.assert_array_equal(h.value, np.zeros(3))

    def test_dense_oracle(self):
        rng = np.random.default_rng(3)
        params = BiamParams.initialize(2, 3, 2, rng)
        nodes = [NodeId(1, 't'), NodeId(0, 'v'), NodeId(2, 't')]
        features = {u: rng.normal(size=2) for u in nodes}
        assignment = ClusterAssignment(NodeId(0, 't'), dict(zip(nodes, [0, 2, 2])), frozenset())
        virtual = first_level(assignment, features, params)
        g = rng.normal(size=2)
        x = np.concatenate([v.value for v in virtual.vectors] + [g])
        np.testing.assert_allclose(second_level(virtual, g, params).value, np.maximum(params.W @ x, 0), atol=1e-12)

    def test_target_dimension(self):
        with self.assertRaises(DimensionError):
            second_level(self.virtual(2, 3), np.ones(4), identity_params(3, 2))


class RbaLayerTest(unittest.TestCase):

    def test_single_utterance(self):
        rng = np.random.default_rng(0)
        graph = graph_of_size(1)
        params = BiamParams.initialize(4, 4, 8, rng)
        features = rng.normal(size=(3, 4))
        out = rba_layer(graph, features, params, SimilarityConfig())
        self.assertEqual(out.shape, (3, 4))
        np.testing.assert_allclose(out.value, oracle_layer(graph, features, params, SimilarityConfig()), atol=1e-10)

    def test_identical_features_give_identical_outputs(self):
        graph = graph_of_size(4)
        features = np.tile([0.4, 1.0, -0.2], (len(graph), 1))
        params = identity_params(3, 8)
        params.W = np.hstack([np.tile(np.eye(3), (1, 9)) / 9.0, np.eye(3)])
        out = rba_layer(graph, features, params, SimilarityConfig()).value
        for row_values in out[1:]:
            np.testing.assert_allclose(row_values, out[0], atol=1e-14)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(11)
        graph = graph_of_size(4)
        for variant in ('cg+dg_filtered', 'cg', 'dg', 'cg_filtered+dg_filtered'):
            cfg = SimilarityConfig.from_variant(variant, gamma=4, rho=0.3)
            params = BiamParams.initialize(5, 3, 4, rng)
            for r in range(5):
                params.cluster_b[r] = rng.normal(size=5)
            features = rng.normal(size=(len(graph), 5))
            np.testing.assert_allclose(
                rba_layer(graph, features, params, cfg).value, oracle_layer(graph, features, params, cfg), atol=1e-10,
            )

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        graph = graph_of_size(5)
        cfg = SimilarityConfig(gamma=4)
        params = BiamParams.initialize(4, 4, 4, rng)
        features = rng.normal(size=(len(graph), 4))
        _, blocks, _ = virtual_node_blocks(graph, features, params, cfg)
        reference = rba_layer(graph, features, params, cfg).value
        for seed in range(100):
            shuffled = graph.with_shuffled_storage(np.random.default_rng(seed))
            _, shuffled_blocks, _ = virtual_node_blocks(shuffled, features, params, cfg)
            for block, other in zip(blocks, shuffled_blocks):
                np.testing.assert_array_equal(block.value, other.value)
            np.testing.assert_array_equal(rba_layer(shuffled, features, params, cfg).value, reference)

    def test_per_cluster_mode_matches_per_target_fusion(self):
        rng = np.random.default_rng(12)
        graph = graph_of_size(3)
        cfg = SimilarityConfig(gamma=3)
        params = BiamParams.initialize(4, 3, 3, rng, second_level='per_cluster')
        features = rng.normal(size=(len(graph), 4))
        layer = rba_layer(graph, features, params, cfg).value
        mapping = {u: features[k] for k, u in enumerate(graph.nodes)}
        for k, target in enumerate(graph.nodes):
            virtual = first_level(build_clusters(graph, target, features, cfg), mapping, params)
            np.testing.assert_allclose(layer[k], second_level(virtual, features[k], params).value, atol=1e-12)

    def test_gamma_mismatch(self):
        params = BiamParams.initialize(3, 3, 2, np.random.default_rng(0))
        with self.assertRaises(DimensionError):
            rba_layer(graph_of_size(2), np.ones((6, 3)), params, SimilarityConfig(gamma=8))

    def test_gradients_of_biam_params(self):
        rng = np.random.default_rng(21)
        graph = graph_of_size(3)
        cfg = SimilarityConfig(gamma=2)
        biam = BiamParams.initialize(4, 3, 2, rng)
        params = {f'W{r}': biam.cluster_W[r] for r in range(3)}
        params.update({f'b{r}': rng.normal(size=4) for r in range(3)})
        params['W'] = biam.W
        params['g'] = rng.normal(size=(len(graph), 4))
        weights = rng.normal(size=len(graph) * 3)

        def loss(view):
            p = BiamParams([view[f'W{r}'] for r in range(3)], [view[f'b{r}'] for r in range(3)], view['W'])
            out = reshape(rba_layer(graph, view['g'], p, cfg), (weights.size,))
            return reshape(linear(weights.reshape(1, -1), None, out), ())

        tape = Tape()
        tape.backward(loss(tape.watch_all(params)))
        grads = tape.gradients()
        frozen = {k: v for k, v in params.items() if k != 'g'}
        report = grad_check(lambda p: float(loss(dict(p, g=params['g'])).value), frozen, grads)
        self.assertLess(report.max_error, 1e-4, report.worst_segment)


class BaselineGcnTest(unittest.TestCase):

    def test_identical_features_unchanged(self):
        graph = graph_of_size(4)
        features = np.tile([0.5, 2.0], (len(graph), 1))
        out = baseline_gcn_layer(graph, features, np.eye(2)).value
        np.testing.assert_allclose(out, features, atol=1e-14)

    def test_one_hot_diffuses_to_neighbors(self):
        graph = graph_of_size(3)
        features = np.zeros((len(graph), 1))
        features[graph.index_of(NodeId(1, 't'))] = 1.0
        out = baseline_gcn_layer(graph, features, np.eye(1)).value[:, 0]
        expected = {
            NodeId(1, 't'): 1 / 5, NodeId(0, 't'): 1 / 4, NodeId(2, 't'): 1 / 4,
            NodeId(1, 'v'): 1 / 5, NodeId(1, 'a'): 1 / 5,
        }
        for k, node in enumerate(graph.nodes):
            self.assertAlmostEqual(out[k], expected.get(node, 0.0), places=15)

    def test_mean_operator_is_row_stochastic(self):
        np.testing.assert_allclose(mean_operator(graph_of_size(5)).sum(axis=1), 1.0, atol=1e-15)

    def test_stacking_oversmooths(self):
        rng = np.random.default_rng(4)
        graph = graph_of_size(6)
        features = rng.uniform(0.0, 1.0, size=(len(graph), 3))
        start = node_variance(features)
        hidden = features
        for _ in range(64):
            hidden = baseline_gcn_layer(graph, hidden, np.eye(3))
        self.assertLess(node_variance(hidden), 0.05 * start)

    def test_node_variance(self):
        self.assertEqual(node_variance(np.ones((4, 3))), 0.0)
        self.assertAlmostEqual(node_variance(np.array([[0.0], [2.0]])), 1.0)


if __name__ == '__main__':
    unittest.main()
