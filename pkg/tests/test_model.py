import math
import unittest

import numpy as np

from .context import ercgraph  # noqa: F401
from ercgraph.data import Conversation, SynthSpec, Utterance, generate_synthetic
from ercgraph.errors import ArgumentError, ConfigError, DimensionError
from ercgraph.model import ModelParams, TrainConfig, batch_loss, forward, loss_and_grad, predict
from ercgraph.numeric import AdamState, adam_step
from ercgraph.trainer import run_gradcheck

SMALL = SynthSpec(n_conversations=3, min_length=3, max_length=5, dims={'t': 5, 'v': 4, 'a': 3})


def small_config(**changes):
    base = TrainConfig(hidden_size=4, node_dim=6, classifier_dim=5, gamma=4, dropout=0.0)
    return base.replace(**changes)


class ForwardTest(unittest.TestCase):

    def setUp(self):
        self.dataset = generate_synthetic(SMALL, 0)
        self.cfg = small_config()
        self.params = ModelParams.initialize(self.cfg, self.dataset.dims, self.dataset.n_classes)

    def test_rows_are_distributions(self):
        for conversation in self.dataset.conversations:
            probs = forward(conversation, self.params, self.cfg).probs
            self.assertEqual(probs.shape, (len(conversation), 3))
            self.assertTrue(np.all(probs >= 0.0))
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_eval_mode_is_deterministic(self):
        cfg = self.cfg.replace(dropout=0.5)
        conversation = self.dataset.conversations[0]
        a = forward(conversation, self.params, cfg).probs
        b = forward(conversation, self.params, cfg, rng=np.random.default_rng(1)).probs
        np.testing.assert_array_equal(a, b)

    def test_training_mode_applies_dropout(self):
        cfg = self.cfg.replace(dropout=0.5)
        conversation = self.dataset.conversations[0]
        plain = forward(conversation, self.params, cfg).probs
        dropped = forward(conversation, self.params, cfg, training=True, rng=np.random.default_rng(1)).probs
        again = forward(conversation, self.params, cfg, training=True, rng=np.random.default_rng(1)).probs
        self.assertFalse(np.array_equal(plain, dropped))
        np.testing.assert_array_equal(dropped, again)

    def test_zero_classifier_gives_uniform_output(self):
        params = self.params.copy()
        params.tensors['classifier.W_smax'][:] = 0.0
        probs = forward(self.dataset.conversations[1], params, self.cfg).probs
        np.testing.assert_allclose(probs, 1.0 / 3.0, atol=1e-15)
        self.assertAlmostEqual(batch_loss(self.dataset.conversations, params, self.cfg), math.log(3.0), places=12)

    def test_single_utterance_conversation(self):
        dataset = generate_synthetic(SynthSpec(n_conversations=1, min_length=1, max_length=1, dims=SMALL.dims), 4)
        probs = forward(dataset.conversations[0], self.params, self.cfg).probs
        self.assertEqual(probs.shape, (1, 3))

    def test_modality_subset_and_baseline(self):
        for cfg in (small_config(modalities=('v', 't')), small_config(gcn_layers=2)):
            params = ModelParams.initialize(cfg, self.dataset.dims, self.dataset.n_classes)
            probs = forward(self.dataset.conversations[0], params, cfg).probs
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        self.assertEqual(small_config(modalities=('v', 't')).modalities, ('t', 'v'))

    def test_per_cluster_second_level(self):
        cfg = small_config(second_level='per_cluster')
        params = ModelParams.initialize(cfg, self.dataset.dims, self.dataset.n_classes)
        probs = forward(self.dataset.conversations[2], params, cfg).probs
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_gamma_must_match_parameters(self):
        with self.assertRaises(DimensionError):
            forward(self.dataset.conversations[0], self.params, self.cfg.replace(gamma=6))


class BatchLossTest(unittest.TestCase):
    """Logits are pinned to ``classifier.b_smax`` by zeroing ``W_smax``."""

    def setUp(self):
        self.cfg = small_config()
        self.params = ModelParams.initialize(self.cfg, SMALL.dims, 2)
        self.params.tensors['classifier.W_smax'][:] = 0.0
        self.rng = np.random.default_rng(0)

    def conversation(self, name, labels):
        utterances = tuple(
            Utterance(
                f'{name}_u{i}', label,
                {m: self.rng.normal(size=SMALL.dims[m]) for m in ('t', 'v', 'a')},
            )
            for i, label in enumerate(labels)
        )
        return Conversation(name, utterances)

    def test_two_utterances_by_hand(self):
        self.params.tensors['classifier.b_smax'][:] = np.log([0.25, 0.75])
        loss = batch_loss([self.conversation('c', [0, 1])], self.params, self.cfg)
        self.assertAlmostEqual(loss, (math.log(4.0) + math.log(4.0 / 3.0)) / 2.0, places=12)

    def test_confident_correct_predictions_cost_nothing(self):
        self.params.tensors['classifier.b_smax'][:] = [0.0, 800.0]
        conversations = [self.conversation('a', [1, 1, 1]), self.conversation('b', [1])]
        self.assertEqual(batch_loss(conversations, self.params, self.cfg), 0.0)

    def test_normalized_by_total_utterances(self):
        self.params.tensors['classifier.b_smax'][:] = np.log([0.25, 0.75])
        short = self.conversation('short', [0])
        long = self.conversation('long', [1, 1, 1])
        loss = batch_loss([short, long], self.params, self.cfg)
        self.assertAlmostEqual(loss, (math.log(4.0) + 3.0 * math.log(4.0 / 3.0)) / 4.0, places=12)
        per_conversation = (math.log(4.0) + math.log(4.0 / 3.0)) / 2.0
        self.assertGreater(abs(loss - per_conversation), 0.1)

    def test_empty_slice(self):
        with self.assertRaises(ArgumentError):
            batch_loss([], self.params, self.cfg)


class PredictTest(unittest.TestCase):

    def test_argmax_with_ties(self):
        self.assertEqual(predict([0.1, 0.7, 0.2]), 1)
        self.assertEqual(predict([0.4, 0.4, 0.2]), 0)
        self.assertEqual(predict([0.25, 0.25, 0.25, 0.25]), 0)

    def test_empty(self):
        with self.assertRaises(ArgumentError):
            predict([])


class ParamsTest(unittest.TestCase):

    def test_segment_names(self):
        dims = {'t': 5, 'v': 4, 'a': 3}
        params = ModelParams.initialize(small_config(gamma=8), dims, 4)
        names = [seg.name for seg in params.segments()]
        self.assertEqual(names[0], 'encoder.t.fwd.W_x')
        self.assertIn('biam.cluster.8.W', names)
        self.assertNotIn('biam.cluster.9.W', names)
        self.assertEqual(names[-1], 'classifier.b_smax')
        self.assertEqual(params.input_dims(), dims)
        self.assertEqual(params.n_classes, 4)
        baseline = ModelParams.initialize(small_config(gcn_layers=2), dims, 4)
        self.assertIn('gcn.1.W', baseline.tensors)
        self.assertNotIn('biam.W', baseline.tensors)

    def test_flat_view(self):
        params = ModelParams.initialize(small_config(), {'t': 5, 'v': 4, 'a': 3}, 3)
        segments = params.segments()
        flat = params.flat()
        self.assertEqual(flat.size, params.size)
        self.assertEqual(segments[-1].offset + segments[-1].size, params.size)
        rebuilt = ModelParams.from_flat(flat, segments)
        for name, tensor in params.tensors.items():
            np.testing.assert_array_equal(rebuilt.tensors[name], tensor)
        with self.assertRaises(DimensionError):
            ModelParams.from_flat(flat[:-1], segments)

    def test_initialization_is_seeded(self):
        dims = {'t': 5, 'v': 4, 'a': 3}
        a = ModelParams.initialize(small_config(seed=3), dims, 3).flat()
        b = ModelParams.initialize(small_config(seed=3), dims, 3).flat()
        c = ModelParams.initialize(small_config(seed=4), dims, 3).flat()
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))


class TrainConfigTest(unittest.TestCase):

    def test_defaults(self):
        cfg = TrainConfig()
        self.assertEqual((cfg.lr, cfg.dropout, cfg.gamma, cfg.rho), (0.0009, 0.5, 8, 0.3))
        self.assertEqual((cfg.max_epochs, cfg.patience, cfg.hidden_size), (1500, 100, 16))

    def test_validation(self):
        with self.assertRaises(ArgumentError):
            TrainConfig(dropout=1.0)
        with self.assertRaises(ArgumentError):
            TrainConfig(neighborhood='nearby')
        with self.assertRaises(ArgumentError):
            TrainConfig(gamma=0)
        with self.assertRaises(ConfigError):
            TrainConfig.from_dict({'learning_rate': 0.1})

    def test_replace_round_trip(self):
        cfg = TrainConfig().replace(gamma=4, modalities=['a', 't'])
        self.assertEqual(cfg.gamma, 4)
        self.assertEqual(TrainConfig.from_dict(cfg.to_dict()), cfg)


class GradientTest(unittest.TestCase):

    def test_end_to_end_gradient_check(self):
        report = run_gradcheck()
        self.assertLess(report.max_error, 1e-4, f'{report.worst_segment}[{report.worst_index}]')
        self.assertTrue(report.passed())

    def test_corrupted_gradient_is_caught(self):
        report = run_gradcheck(corrupt_segment='classifier.b_smax')
        self.assertFalse(report.passed())
        self.assertEqual(report.worst_segment, 'classifier.b_smax')

    def test_refuses_dropout(self):
        with self.assertRaises(ArgumentError):
            run_gradcheck(TrainConfig(dropout=0.5))
        with self.assertRaises(ArgumentError):
            run_gradcheck(corrupt_segment='nowhere')

    def test_adam_step_lowers_the_loss(self):
        dataset = generate_synthetic(SMALL, 0)
        conversation = [dataset.conversations[0]]
        for seed in range(20):
            # unfiltered and unclustered keeps the loss smooth in the parameters
            cfg = small_config(seed=seed, neighborhood='cg+dg', use_clusters=False)
            params = ModelParams.initialize(cfg, dataset.dims, dataset.n_classes)
            before, grads = loss_and_grad(conversation, params, cfg)
            adam_step(params.tensors, grads, AdamState(lr=1e-3))
            self.assertLess(batch_loss(conversation, params, cfg), before, f'seed {seed}')

    def test_zero_learning_rate_keeps_parameters(self):
        dataset = generate_synthetic(SMALL, 0)
        cfg = small_config()
        params = ModelParams.initialize(cfg, dataset.dims, dataset.n_classes)
        start = params.flat()
        _, grads = loss_and_grad(list(dataset.conversations), params, cfg)
        adam_step(params.tensors, grads, AdamState(lr=0.0))
        np.testing.assert_array_equal(params.flat(), start)


if __name__ == '__main__':
    unittest.main()
