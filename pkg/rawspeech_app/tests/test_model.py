from django.test import SimpleTestCase
from pathlib import Path
import tempfile

import numpy as np

from rawspeech_app.autograd import Tensor
from rawspeech_app.constants import BlockVariant, Mode
from rawspeech_app.exceptions import ConfigError, ShapeError
from rawspeech_app.gradcheck import tiny_model_config
from rawspeech_app.model import (
    DEFAULT_BLOCK,
    BlockLayer,
    ModelConfig,
    build,
    build_ablation_block,
    feature_map,
    forward,
    infer_block_shapes,
    load_model,
    parallel_branch_sets,
    parse_block_spec,
    predict_proba,
    save_model,
)


def tokens(block):
    return [layer.token for layer in block]


class BlockSpecTests(SimpleTestCase):
    def test_token_parsing(self):
        block = parse_block_spec('conv2d:2x2:32, pool2d:2x2, LSTM:128, dense:1024')

        self.assertEqual(tokens(block), ['conv2d:2x2:32', 'pool2d:2x2', 'lstm:128', 'dense:1024'])
        self.assertEqual(block, DEFAULT_BLOCK)
        self.assertEqual(BlockLayer.parse('conv2d:3x1:8').kernel, (3, 1))

    def test_bad_tokens(self):
        for token in ('conv3d:2x2:4', 'lstm', 'dense:2x2:4', 'pool2d:2x2:4', 'lstm:0'):
            with self.subTest(token=token):
                with self.assertRaises(ConfigError):
                    parse_block_spec([token])

    def test_invalid_sequencing(self):
        with self.assertRaises(ConfigError):
            ModelConfig(block_spec=('lstm:8', 'conv2d:2x2:4'))
        with self.assertRaises(ConfigError):
            ModelConfig(block_spec=('dense:8', 'lstm:8'))

    def test_ablation_blocks(self):
        self.assertEqual(tokens(build_ablation_block('DNN')), ['dense:1024', 'dense:512', 'dense:512'])
        self.assertEqual(tokens(build_ablation_block('LSTM')), ['lstm:256', 'lstm:256'])
        self.assertEqual(build_ablation_block('cnn-lstm-dnn'), DEFAULT_BLOCK)
        self.assertEqual(tokens(build_ablation_block('CNN')), ['conv2d:2x2:256', 'pool2d:2x2'] * 3)
        self.assertEqual(
            tokens(build_ablation_block('CNN-LSTM')), ['conv2d:2x2:256', 'pool2d:2x2', 'lstm:256', 'lstm:256']
        )
        self.assertEqual(tokens(build_ablation_block('DNN', width_divisor=4)), ['dense:256', 'dense:128', 'dense:128'])

        with self.assertRaises(ConfigError):
            build_ablation_block('GRU')

    def test_parallel_branch_sets(self):
        self.assertEqual(parallel_branch_sets(1), [25.0])
        self.assertEqual(parallel_branch_sets(2), [25.0, 100.0])
        self.assertEqual(parallel_branch_sets(3), [15.0, 25.0, 100.0])
        self.assertEqual(parallel_branch_sets(4), [15.0, 25.0, 100.0, 200.0])

        for n in (0, 5):
            with self.assertRaises(ValueError):
                parallel_branch_sets(n)


class ModelConfigTests(SimpleTestCase):
    def test_defaults_in_samples(self):
        config = ModelConfig()

        self.assertEqual(config.branch_widths_samples, [240, 400, 1600])
        self.assertEqual(config.stride_samples, 160)
        self.assertEqual(config.input_samples, 96000)
        self.assertEqual(config.n_channels, 120)
        self.assertEqual(config.pool_mode, 'max')

    def test_validation(self):
        for changes in ({'branch_widths_ms': ()}, {'branch_widths_ms': (7000.0,)}, {'pool_mode': 'median'},
                        {'dropout': 1.0}, {'n_classes': 1}):
            with self.subTest(changes=changes):
                with self.assertRaises(ConfigError):
                    ModelConfig(**changes)

    def test_dict_round_trip(self):
        config = ModelConfig.desk(pool_mode='L2')
        self.assertEqual(ModelConfig.from_dict(config.to_dict()), config)
        self.assertEqual(config.pool_mode, 'l2')

    def test_layer_that_does_not_fit(self):
        with self.assertRaises(ConfigError):
            infer_block_shapes(tiny_model_config().replace(block_spec=('conv2d:9x2:2',)))


class BuildTests(SimpleTestCase):
    def test_full_scale_shapes(self):
        config = ModelConfig()
        shapes = infer_block_shapes(config)

        self.assertEqual(shapes[:3], [(32, 63, 119), (32, 31, 59), (31, 128)])

        model = build(config, seed=0)
        self.assertEqual(model.block[2].layer.w_x.shape, (59 * 32, 4 * 128))

        x = Tensor(np.random.default_rng(0).normal(0, 0.1, size=(1, 96000)))
        self.assertEqual(feature_map(model, x, Mode.EVAL).shape, (1, 64, 120))
        self.assertEqual(forward(model, x).shape, (1, 4))

    def test_same_seed_identical_bytes(self):
        first, second = build(tiny_model_config(), seed=3), build(tiny_model_config(), seed=3)
        third = build(tiny_model_config(), seed=4)

        for name, p in first.parameters().items():
            self.assertEqual(p.data.tobytes(), second.parameters()[name].data.tobytes())
        self.assertFalse(np.array_equal(first.output.weight.data, third.output.weight.data))

    def test_init_statistics(self):
        model = build(ModelConfig.desk(), seed=0)
        params = model.parameters()

        w = params['block3.dense.weight'].data
        self.assertAlmostEqual(float(w.std()), np.sqrt(2 / w.shape[1]), delta=0.1 * np.sqrt(2 / w.shape[1]))
        self.assertTrue(np.all(params['block3.dense.bias'].data == 0))

        lstm_bias = params['block2.lstm.bias'].data
        hidden = model.block[2].layer.hidden_size
        self.assertTrue(np.all(lstm_bias[hidden:2 * hidden] == 1.0))

    def test_parameter_names_unique_and_count_stable(self):
        config = tiny_model_config()
        model = build(config, seed=0)
        count = model.parameter_count()

        forward(model, np.zeros((2, config.input_samples)), Mode.TRAIN, rng=np.random.default_rng(0))

        self.assertEqual(model.parameter_count(), count)
        self.assertEqual(build(config, seed=9).parameter_count(), count)
        self.assertIn('branch0.conv.weight', model.parameters())
        self.assertIn('block0.bn.gamma', model.parameters())

    def test_minimal_model(self):
        config = ModelConfig(
            input_seconds=0.05, branch_widths_ms=(1.0,), filters_per_branch=1, pooled_frames=2,
            block_spec=('dense:3',),
        )
        logits = forward(build(config), np.zeros((2, config.input_samples)))
        self.assertEqual(logits.shape, (2, 4))


class ForwardTests(SimpleTestCase):
    def setUp(self):
        self.config = tiny_model_config()
        self.model = build(self.config, seed=1)
        self.batch = np.random.default_rng(2).normal(0, 0.3, size=(3, self.config.input_samples))

    def test_eval_is_deterministic(self):
        self.assertTrue(np.array_equal(forward(self.model, self.batch).data, forward(self.model, self.batch).data))

    def test_zero_batch_finite(self):
        logits = forward(self.model, np.zeros((2, self.config.input_samples)))
        self.assertTrue(np.all(np.isfinite(logits.data)))

    def test_wrong_input_length(self):
        with self.assertRaises(ShapeError):
            forward(self.model, np.zeros((2, self.config.input_samples + 1)))

    def test_eval_batch_permutation(self):
        perm = [2, 0, 1]
        logits = forward(self.model, self.batch).data

        np.testing.assert_allclose(forward(self.model, self.batch[perm]).data, logits[perm], rtol=1e-12, atol=1e-12)

    def test_every_variant_gives_four_logits(self):
        base = ModelConfig.desk(input_seconds=0.5)

        for variant in BlockVariant:
            with self.subTest(variant=variant.value):
                config = base.replace(block_spec=build_ablation_block(variant, width_divisor=32))
                model = build(config, seed=0)
                logits = forward(model, np.zeros((2, config.input_samples)), Mode.TRAIN, rng=np.random.default_rng(0))
                self.assertEqual(logits.shape, (2, 4))

    def test_train_mode_needs_rng_for_dropout(self):
        with self.assertRaises(ValueError):
            forward(self.model, self.batch, Mode.TRAIN)


class CheckpointTests(SimpleTestCase):
    def test_save_load_round_trip(self):
        config = tiny_model_config()
        model = build(config, seed=5)
        model.branches[0].bn.running_mean[:] = 0.25
        batch = np.random.default_rng(1).normal(0, 0.2, size=(2, config.input_samples))

        with tempfile.TemporaryDirectory() as tmp:
            path = save_model(model, Path(tmp) / 'model.npz')
            loaded = load_model(path)

        self.assertEqual(loaded.config, config)
        self.assertTrue(np.array_equal(loaded.branches[0].bn.running_mean, model.branches[0].bn.running_mean))
        self.assertTrue(np.array_equal(forward(loaded, batch).data, forward(model, batch).data))

    def test_mismatched_state(self):
        model = build(tiny_model_config(), seed=0)
        state = model.state()

        state.pop('output.bias')
        with self.assertRaises(ConfigError):
            model.load_state(state)

        state = model.state()
        state['output.bias'] = np.zeros(7)
        with self.assertRaises(ConfigError):
            model.load_state(state)

    def test_predict_proba_ensemble(self):
        config = tiny_model_config()
        models = [build(config, seed=s) for s in (0, 1)]
        batch = np.random.default_rng(3).normal(0, 0.2, size=(2, config.input_samples))

        probs = predict_proba(models, batch)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        np.testing.assert_allclose(probs, (predict_proba(models[0], batch) + predict_proba(models[1], batch)) / 2)
