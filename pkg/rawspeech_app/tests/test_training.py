from django.test import SimpleTestCase
from pathlib import Path
from unittest import skipUnless
import json
import os
import tempfile

import numpy as np

from rawspeech_app.autograd import Tensor
from rawspeech_app.constants import Decision
from rawspeech_app.corpus import LosoFold, SynthSpec, generate_synthetic, loso_folds
from rawspeech_app.exceptions import ConfigError, FoldError, NonFiniteError
from rawspeech_app.gradcheck import tiny_model_config
from rawspeech_app.model import load_model
from rawspeech_app.run_config import parse_config_text
from rawspeech_app.training import (
    ExperimentConfig,
    OptimizerState,
    ScheduleState,
    TrainConfig,
    clip_gradients,
    load_partition,
    make_batches,
    repeat_and_aggregate,
    repeat_seeds,
    rmsprop_step,
    sample_std,
    schedule_update,
    scheduled_learning_rate,
    train_fold,
)

SLOW_TESTS = os.getenv('RAWSPEECH_SLOW_TESTS', '0').lower() in ('1', 'true', 'yes')


def tiny_experiment(**train):
    values = {'learning_rate': 1e-3, 'batch_size': 4, 'max_epochs': 3}
    values.update(train)
    return ExperimentConfig(model=tiny_model_config(), train=TrainConfig(**values), augment=False)


def replay(uars, halve_patience=5, stop_patience=20):
    state, decisions = ScheduleState(), []
    for value in uars:
        state, decision = schedule_update(state, value, halve_patience, stop_patience)
        decisions.append(decision)
    return state, decisions


class RMSPropTests(SimpleTestCase):
    def test_first_step_by_hand(self):
        p = Tensor([1.0])
        state = OptimizerState(learning_rate=0.1)

        rmsprop_step({'p': p}, {'p': np.array([1.0])}, state)

        self.assertAlmostEqual(float(state.accumulators['p'][0]), 0.1)
        self.assertAlmostEqual(1.0 - float(p.data[0]), 0.31623, places=5)

    def test_two_step_trace(self):
        p = Tensor([1.0])
        state = OptimizerState(learning_rate=0.1)

        rmsprop_step({'p': p}, {'p': np.array([1.0])}, state)
        after_first = float(p.data[0])
        rmsprop_step({'p': p}, {'p': np.array([1.0])}, state)

        # acc = 0.9 * 0.1 + 0.1
        self.assertAlmostEqual(float(state.accumulators['p'][0]), 0.19)
        self.assertAlmostEqual(after_first - float(p.data[0]), 0.1 / np.sqrt(0.19), places=6)

    def test_zero_gradient_leaves_parameter(self):
        p = Tensor([0.7, -0.2])
        rmsprop_step({'p': p}, {'p': np.zeros(2)}, OptimizerState(learning_rate=0.1))

        self.assertEqual(p.data.tolist(), [0.7, -0.2])

    def test_quadratic_descent(self):
        p = Tensor([2.0])
        loss = lambda: float((p.data[0] - 3.0) ** 2)
        before = loss()

        rmsprop_step({'p': p}, {'p': 2 * (p.data - 3.0)}, OptimizerState(learning_rate=0.01))

        self.assertLess(loss(), before)

    def test_rejects_bad_gradients(self):
        p = Tensor([1.0])
        state = OptimizerState(learning_rate=0.1)

        with self.assertRaises(NonFiniteError):
            rmsprop_step({'p': p}, {'p': np.array([np.nan])}, state)
        with self.assertRaises(KeyError):
            rmsprop_step({'p': p}, {'q': np.array([1.0])}, state)
        self.assertEqual(p.data.tolist(), [1.0])

    def test_clip_gradients(self):
        grads = {'a': np.array([3.0]), 'b': np.array([4.0])}

        same, norm, clipped = clip_gradients(grads, 5.0)
        self.assertIs(same, grads)
        self.assertEqual(norm, 5.0)
        self.assertFalse(clipped)

        scaled, _, clipped = clip_gradients(grads, 1.0)
        self.assertTrue(clipped)
        self.assertAlmostEqual(float(scaled['a'][0]), 0.6)
        self.assertAlmostEqual(float(scaled['b'][0]), 0.8)


class ScheduleTests(SimpleTestCase):
    def test_increasing_uar_never_halves(self):
        state, decisions = replay([0.1 * i for i in range(1, 10)])

        self.assertEqual(set(decisions), {Decision.CONTINUE})
        self.assertEqual(state.halvings_applied, 0)
        self.assertAlmostEqual(state.best_val_uar, 0.9)

    def test_constant_uar_halves_then_stops(self):
        for value in (0.0, 0.25, 0.5):
            with self.subTest(value=value):
                state, decisions = replay([value] * 20)

                halved = [epoch for epoch, d in enumerate(decisions, 1) if d == Decision.HALVE]
                self.assertEqual(halved, [5, 10, 15])
                self.assertEqual(decisions.index(Decision.STOP) + 1, 20)
                self.assertTrue(state.stopped)
                self.assertEqual(state.halvings_applied, 3)
                self.assertEqual(state.best_val_uar, value)

    def test_first_epoch_sets_baseline(self):
        state, decision = schedule_update(ScheduleState(), 0.7)

        self.assertEqual(decision, Decision.CONTINUE)
        self.assertEqual(state.best_val_uar, 0.7)
        self.assertEqual(state.epochs_since_improvement, 1)

    def test_improvement_resets_counter(self):
        state, decisions = replay([0.5, 0.4, 0.4, 0.4, 0.6, 0.4, 0.4, 0.4, 0.4, 0.4])

        self.assertEqual(decisions.count(Decision.HALVE), 1)
        self.assertEqual(decisions[-1], Decision.HALVE)
        self.assertEqual(state.best_val_uar, 0.6)

    def test_float_noise_is_not_improvement(self):
        state, _ = replay([0.5, 0.5 + 1e-9])

        self.assertEqual(state.best_val_uar, 0.5)
        self.assertEqual(state.epochs_since_improvement, 2)

    def test_replay_is_reproducible(self):
        uars = np.random.default_rng(0).uniform(0, 1, 40).tolist()
        self.assertEqual(replay(uars), replay(uars))

    def test_stopped_stays_stopped(self):
        state, decision = schedule_update(ScheduleState(stopped=True), 1.0)
        self.assertEqual(decision, Decision.STOP)
        self.assertTrue(state.stopped)

    def test_uar_out_of_range(self):
        with self.assertRaises(ValueError):
            schedule_update(ScheduleState(), 1.5)

    def test_learning_rate_halvings(self):
        self.assertEqual(scheduled_learning_rate(1e-4, 2), 2.5e-5)
        self.assertEqual(scheduled_learning_rate(1e-4, 0), 1e-4)


class BatchingTests(SimpleTestCase):
    def test_trailing_singleton_is_merged(self):
        batches = make_batches(np.arange(9), 4)
        self.assertEqual([len(b) for b in batches], [4, 5])

    def test_regular_split(self):
        batches = make_batches(np.arange(10), 4)
        self.assertEqual([b.tolist() for b in batches], [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]])

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            TrainConfig(batch_size=1)
        with self.assertRaises(ConfigError):
            ExperimentConfig(speed_factors=())


class TrainFoldTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        spec = SynthSpec(
            output_dir=Path(cls.tmp.name) / 'corpus', sessions=2, utterances_per_speaker=4, duration_s=0.3,
        )
        cls.manifest = generate_synthetic(spec, seed=0)
        cls.fold = loso_folds(cls.manifest)[0]
        cls.config = tiny_experiment()

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_partition_shapes(self):
        windows, labels = load_partition(self.fold.val, self.config)

        self.assertEqual(windows.shape, (4, self.config.model.input_samples))
        self.assertEqual(labels.shape, (4,))

    def test_same_seed_same_run(self):
        first = train_fold(self.config, self.fold, seed=1)
        second = train_fold(self.config, self.fold, seed=1)

        self.assertEqual(first.history, second.history)
        for name, value in first.checkpoint.items():
            self.assertEqual(value.tobytes(), second.checkpoint[name].tobytes())

    def test_history_and_best_epoch(self):
        result = train_fold(self.config, self.fold, seed=2)

        self.assertEqual([r.epoch for r in result.history], [1, 2, 3])
        self.assertEqual(result.best_val_uar, max(r.val_uar for r in result.history))
        self.assertEqual(result.history[result.best_epoch - 1].val_uar, result.best_val_uar)
        self.assertTrue(all(r.learning_rate == 1e-3 for r in result.history))

    def test_log_and_checkpoint_written(self):
        with tempfile.TemporaryDirectory() as tmp:
            result = train_fold(self.config, self.fold, seed=0, run_dir=tmp)
            lines = (Path(tmp) / 'train_log.jsonl').read_text(encoding='utf-8').splitlines()
            summary = json.loads((Path(tmp) / 'checkpoint.json').read_text(encoding='utf-8'))
            model = load_model(Path(tmp) / 'checkpoint.npz')

        self.assertEqual(len(lines), 3)
        self.assertEqual(set(json.loads(lines[0])), {
            'epoch', 'train_loss', 'train_uar', 'val_uar', 'learning_rate', 'decision', 'clipped',
        })
        self.assertEqual(summary['best_epoch'], result.best_epoch)
        self.assertEqual(model.config, self.config.model)

    def test_early_stop(self):
        config = tiny_experiment(max_epochs=50, halve_patience=1, stop_patience=2)
        result = train_fold(config, self.fold, seed=0)

        self.assertLess(len(result.history), 50)
        self.assertEqual(result.history[-1].decision, Decision.STOP)

    def test_empty_validation(self):
        fold = LosoFold(0, 'a', 'b', self.fold.train, self.fold.val.subset([]), self.fold.test)

        with self.assertRaises(FoldError):
            train_fold(self.config, fold, seed=0)

    def test_single_repeat(self):
        summary = repeat_and_aggregate(self.config, self.fold, n_repeats=1, seed=4)

        self.assertEqual(summary.seeds, [4])
        self.assertEqual(summary.std_uar, 0.0)
        self.assertEqual(summary.ensemble_uar, summary.repeat_uars[0])
        self.assertEqual(summary.ensemble_confusion, summary.repeat_confusions[0])

    def test_identical_seeds_have_no_spread(self):
        summary = repeat_and_aggregate(self.config, self.fold, seeds=[7, 7])

        self.assertEqual(summary.repeat_uars[0], summary.repeat_uars[1])
        self.assertEqual(summary.std_uar, 0.0)

    def test_summary_recomputes(self):
        summary = repeat_and_aggregate(self.config, self.fold, n_repeats=2, seed=0)

        self.assertEqual(summary.seeds, [0, 1])
        self.assertAlmostEqual(summary.mean_uar, float(np.mean(summary.repeat_uars)))
        self.assertAlmostEqual(summary.std_uar, sample_std(summary.repeat_uars))
        self.assertEqual(summary.epochs_run, [3, 3])


class RepeatHelperTests(SimpleTestCase):
    def test_repeat_seeds(self):
        self.assertEqual(repeat_seeds(10, 3), [10, 11, 12])
        with self.assertRaises(ValueError):
            repeat_seeds(0, 0)

    def test_sample_std(self):
        self.assertEqual(sample_std([0.5]), 0.0)
        self.assertAlmostEqual(sample_std([1.0, 3.0]), np.sqrt(2.0))


@skipUnless(SLOW_TESTS, 'Set RAWSPEECH_SLOW_TESTS=1 to run desk-scale training')
class DeskTrainingTests(SimpleTestCase):
    '''One desk-scale fold on the default synthetic corpus, in this process'''

    def test_fits_training_data_within_fifty_epochs(self):
        config = parse_config_text('[run]\ndesk_scale = true\nmax_epochs = 50\n').experiment

        with tempfile.TemporaryDirectory() as tmp:
            manifest = generate_synthetic(SynthSpec(output_dir=Path(tmp) / 'corpus'), seed=0)
            result = train_fold(config, loso_folds(manifest)[0], seed=0)

        self.assertLessEqual(len(result.history), 50)
        self.assertGreaterEqual(max(h.train_uar for h in result.history[:50]), 0.95)
