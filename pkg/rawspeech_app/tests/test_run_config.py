from django.test import SimpleTestCase
from pathlib import Path
import tempfile

from rawspeech_app.constants import DESK_FILTERS_PER_BRANCH, DESK_INPUT_SECONDS, DESK_REPEATS, FULL_REPEATS
from rawspeech_app.exceptions import ConfigError
from rawspeech_app.model import build_ablation_block
from rawspeech_app.run_config import RunConfig, load_run_config, parse_config_text, section_defaults
from rawspeech_app.serializers import (
    CorpusSectionSerializer,
    ModelSectionSerializer,
    RunSectionSerializer,
)


class DefaultsTests(SimpleTestCase):
    def test_empty_file_is_full_scale(self):
        config = parse_config_text('')

        self.assertFalse(config.desk_scale)
        self.assertEqual(config.repeats, FULL_REPEATS)
        self.assertEqual(config.experiment.model.input_seconds, 6.0)
        self.assertEqual(config.experiment.model.branch_widths_ms, (15.0, 25.0, 100.0))
        self.assertEqual(config.experiment.train.learning_rate, 1e-4)
        self.assertEqual(config.experiment.speed_factors, (0.9, 1.1))

    def test_desk_flag_switches_every_size_default(self):
        config = parse_config_text('[run]\ndesk_scale = true\n')

        self.assertTrue(config.desk_scale)
        self.assertEqual(config.repeats, DESK_REPEATS)
        self.assertEqual(config.experiment.model.input_seconds, DESK_INPUT_SECONDS)
        self.assertEqual(config.experiment.model.filters_per_branch, DESK_FILTERS_PER_BRANCH)
        self.assertEqual(config.experiment.model.block_spec, build_ablation_block('CNN-LSTM-DNN', 4))
        self.assertEqual(config.block_width_divisor, 4)

    def test_argument_overrides_file_flag(self):
        self.assertFalse(parse_config_text('[run]\ndesk_scale = true\n', desk_scale=False).desk_scale)
        self.assertTrue(load_run_config(None, desk_scale=True).desk_scale)

    def test_explicit_keys_win_over_desk_defaults(self):
        config = parse_config_text('[run]\ndesk_scale = yes\nrepeats = 1\n[model]\ninput_seconds = 1.0\n')

        self.assertEqual(config.repeats, 1)
        self.assertEqual(config.experiment.model.input_seconds, 1.0)

    def test_default_sections_cover_every_key(self):
        self.assertEqual(set(section_defaults(True)), {'run', 'corpus', 'model', 'synth'})
        self.assertEqual(section_defaults(True)['model'].keys(), section_defaults(False)['model'].keys())


class ParseTests(SimpleTestCase):
    def test_values_are_parsed(self):
        config = parse_config_text(
            '[run]\nseed = 7\njobs = 2\nsweep_lengths = 1, 3\n'
            '[corpus]\nmanifest = corpus/manifest.csv\naugment = off\n'
            '[model]\npool_mode = L2\nblock_spec = conv2d:2x2:8, pool2d:2x2, dense:16\n'
        )

        self.assertEqual(config.seed, 7)
        self.assertEqual(config.jobs, 2)
        self.assertEqual(config.sweep_lengths, (1.0, 3.0))
        self.assertEqual(config.manifest, Path('corpus/manifest.csv'))
        self.assertFalse(config.experiment.augment)
        self.assertEqual(config.experiment.model.pool_mode, 'l2')
        self.assertEqual([layer.token for layer in config.experiment.model.block_spec],
                         ['conv2d:2x2:8', 'pool2d:2x2', 'dense:16'])

    def test_unknown_section(self):
        with self.assertRaisesMessage(ConfigError, 'Unknown config sections'):
            parse_config_text('[training]\nseed = 1\n')

    def test_unknown_key_lists_allowed(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config_text('[model]\nfilters = 8\n')

        self.assertIn('filters', str(ctx.exception))
        self.assertIn('filters_per_branch', str(ctx.exception))

    def test_invalid_values(self):
        for text in (
            '[run]\nbatch_size = 1\n',
            '[run]\nlearning_rate = 0\n',
            '[run]\nsweep_lengths = 0, 2\n',
            '[corpus]\nspeed_factors = -0.9\n',
            '[corpus]\naugment = true\nspeed_factors =\n',
            '[model]\npool_mode = median\n',
            '[model]\nblock_spec = lstm:8, conv2d:2x2:4\n',
            '[model]\nbranch_widths_ms = 7000\n',
            '[synth]\nsessions = 0\n',
            'not an ini file',
        ):
            with self.subTest(text=text):
                with self.assertRaises(ConfigError):
                    parse_config_text(text)

    def test_section_name_in_message(self):
        with self.assertRaisesMessage(ConfigError, 'Invalid [run] section: batch_size'):
            parse_config_text('[run]\nbatch_size = 1\n')


class RoundTripTests(SimpleTestCase):
    def test_echoed_ini_reparses_identically(self):
        for text in ('', '[run]\ndesk_scale = true\nseed = 3\n', '[model]\npool_mode = average\ndropout = 0.1\n'):
            with self.subTest(text=text):
                config = parse_config_text(text)
                self.assertEqual(parse_config_text(config.to_ini()), config)

    def test_write_and_load(self):
        config = parse_config_text('[run]\ndesk_scale = true\n')

        with tempfile.TemporaryDirectory() as tmp:
            path = config.write(tmp)
            self.assertEqual(path, Path(tmp) / 'config.ini')
            self.assertEqual(load_run_config(path), config)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_run_config('/nonexistent/run.ini')


class OverrideTests(SimpleTestCase):
    def test_none_is_ignored(self):
        config = RunConfig()
        self.assertEqual(config.with_overrides(seed=None, jobs=None), config)

    def test_applied_and_typed(self):
        config = RunConfig().with_overrides(out_dir='elsewhere', seed=4, repeats=2)

        self.assertEqual(config.out_dir, Path('elsewhere'))
        self.assertEqual((config.seed, config.repeats), (4, 2))

    def test_out_of_range(self):
        for changes in ({'jobs': 0}, {'repeats': 0}, {'seed': -1}):
            with self.subTest(changes=changes):
                with self.assertRaises(ConfigError):
                    RunConfig().with_overrides(**changes)

    def test_fingerprint_ignores_paths_and_jobs(self):
        config = RunConfig()

        self.assertEqual(config.with_overrides(jobs=8, out_dir='x').fingerprint, config.fingerprint)
        self.assertNotEqual(config.with_overrides(seed=1).fingerprint, config.fingerprint)
        self.assertIn(config.fingerprint, config.to_ini())


class SectionSerializerTests(SimpleTestCase):
    def test_comma_lists(self):
        data = {**section_defaults(False)['run'], 'sweep_lengths': '2, 4,'}
        serializer = RunSectionSerializer(data=data)

        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data['sweep_lengths'], [2.0, 4.0])

    def test_lists_accepted_directly(self):
        data = {**section_defaults(False)['corpus'], 'speed_factors': [0.8, 1.2]}
        serializer = CorpusSectionSerializer(data=data)

        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data['speed_factors'], [0.8, 1.2])

    def test_model_cross_field_rules(self):
        data = {**section_defaults(True)['model'], 'input_seconds': '0.05', 'branch_widths_ms': '100'}
        serializer = ModelSectionSerializer(data=data)

        self.assertFalse(serializer.is_valid())
        self.assertIn('non_field_errors', serializer.errors)

    def test_trim_threshold_must_be_negative(self):
        data = {**section_defaults(False)['corpus'], 'trim_threshold_db': '3'}
        serializer = CorpusSectionSerializer(data=data)

        self.assertFalse(serializer.is_valid())
        self.assertIn('trim_threshold_db', serializer.errors)
