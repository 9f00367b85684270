from django.test import SimpleTestCase
from django.core.management import call_command
from django.core.management.base import CommandError
from io import StringIO
from pathlib import Path
from unittest import mock, skipUnless
import json
import os
import tempfile

import numpy as np

from rawspeech_app import autograd as ag
from rawspeech_app.gradcheck import COMPONENTS, DEFAULT_SEEDS, run_suite
from rawspeech_app.reports import read_report

SLOW_TESTS = os.getenv('RAWSPEECH_SLOW_TESTS', '0').lower() in ('1', 'true', 'yes')

# Tiny model and a two-session corpus so every command finishes in seconds
TINY_CONFIG = '''
[run]
seed = 0
repeats = 1
learning_rate = 0.001
batch_size = 4
max_epochs = 1

[corpus]
manifest = {root}/corpus/manifest.csv
augment = false

[model]
input_seconds = 0.25
branch_widths_ms = 25, 100
filters_per_branch = 2
pooled_frames = 8
block_spec = conv2d:2x2:2, pool2d:2x2, lstm:3, dense:4

[synth]
output_dir = {root}/corpus
sessions = 2
utterances_per_speaker = 4
duration_s = 0.3
'''


def leaky_tanh(a):
    '''tanh with a backward rule that is off by a factor of 2'''
    a = ag.as_tensor(a)
    out = np.tanh(a.data)
    return ag.make_op(out, (a,), lambda g: (2 * (1 - out * out) * g,), 'bad-tanh')


def run(name, *args, **options):
    '''
    Run a management command and return its stdout
    '''
    out = StringIO()
    call_command(name, *args, stdout=out, **options)
    return out.getvalue()


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config = self.root / 'tiny.ini'
        self.config.write_text(TINY_CONFIG.format(root=self.root.as_posix()), encoding='utf-8')

    def tearDown(self):
        self.tmp.cleanup()

    def synth(self):
        return run('synth', config=str(self.config))


class SynthCommandTests(CommandTestCase):
    def test_writes_corpus_and_stats(self):
        output = self.synth()

        self.assertTrue((self.root / 'corpus' / 'manifest.csv').is_file())
        self.assertTrue((self.root / 'corpus' / 'config.ini').is_file())
        self.assertIn('16 utterances, 4 speakers, 2 sessions', output)

        # One stats row per emotion class
        rows = [line.split() for line in output.splitlines() if line.split()[:1] in (['angry'], ['happy'], ['neutral'], ['sad'])]
        self.assertEqual([row[0] for row in rows], ['angry', 'happy', 'neutral', 'sad'])
        self.assertEqual([row[1:] for row in rows], [['4', '4']] * 4)

    def test_cli_overrides(self):
        output = run('synth', config=str(self.config), out=str(self.root / 'other'), sessions=3, utterances=2)

        self.assertIn('12 utterances, 6 speakers, 3 sessions', output)
        self.assertTrue((self.root / 'other' / 'manifest.csv').is_file())

    def test_bad_settings_are_config_errors(self):
        with self.assertRaises(CommandError) as ctx:
            run('synth', config=str(self.config), sessions=0)
        self.assertEqual(ctx.exception.returncode, 2)


class ConfigErrorTests(CommandTestCase):
    def test_missing_manifest(self):
        with self.assertRaises(CommandError) as ctx:
            run('eval', config=str(self.config))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_missing_config_file(self):
        with self.assertRaises(CommandError) as ctx:
            run('eval', config=str(self.root / 'nope.ini'))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_unknown_axis_lists_valid_ones(self):
        self.synth()

        with self.assertRaises(CommandError) as ctx:
            run('ablate', '--axis=foo', config=str(self.config))

        self.assertEqual(ctx.exception.returncode, 2)
        for axis in ('layers', 'pooling', 'block', 'augmentation'):
            self.assertIn(axis, str(ctx.exception))

    def test_unknown_axis_reported_before_manifest(self):
        # no corpus on disk either
        with self.assertRaises(CommandError) as ctx:
            run('ablate', '--axis=speed', config=str(self.config))

        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('Unknown ablation axis', str(ctx.exception))
        self.assertIn('augmentation', str(ctx.exception))

    def test_bad_override(self):
        with self.assertRaises(CommandError) as ctx:
            run('eval', config=str(self.config), jobs=0)
        self.assertEqual(ctx.exception.returncode, 2)

    def test_fold_index_out_of_range(self):
        self.synth()

        with self.assertRaises(CommandError) as ctx:
            run('train', config=str(self.config), out=str(self.root / 'train'), fold_index=4)
        self.assertEqual(ctx.exception.returncode, 2)


class ExperimentCommandTests(CommandTestCase):
    def setUp(self):
        super().setUp()
        self.synth()

    def test_train_one_fold(self):
        out = self.root / 'train'
        output = run('train', config=str(self.config), out=str(out), fold_index=1)

        summary = json.loads((out / 'fold01' / 'summary.json').read_text(encoding='utf-8'))
        self.assertEqual(summary['fold'], 1)
        self.assertEqual(summary['seeds'], [0])
        self.assertTrue((out / 'fold01' / 'repeat00' / 'checkpoint.npz').is_file())
        self.assertTrue((out / 'fold01' / 'repeat00' / 'train_log.jsonl').is_file())
        self.assertTrue((out / 'fold01' / 'config.ini').is_file())
        self.assertIn('Fold 1 UAR', output)

    def test_eval_writes_fold_dirs_and_report(self):
        out = self.root / 'eval'
        output = run('eval', config=str(self.config), out=str(out))

        self.assertEqual(sorted(p.name for p in out.glob('fold*')), ['fold00', 'fold01', 'fold02', 'fold03'])
        self.assertTrue((out / 'config.ini').is_file())
        self.assertIn('UAR (%)', output)

        report = read_report(out / 'report.json')
        self.assertEqual(len(report.rows[0].folds), 4)
        self.assertTrue(report.run_fingerprint)

    def test_eval_is_reproducible(self):
        run('eval', config=str(self.config), out=str(self.root / 'a'))
        run('eval', config=str(self.config), out=str(self.root / 'b'))

        for name in ('report.json', 'report.txt'):
            self.assertEqual((self.root / 'a' / name).read_bytes(), (self.root / 'b' / name).read_bytes())

    def test_ablate_pooling(self):
        out = self.root / 'ablate'
        run('ablate', '--axis=Pooling', config=str(self.config), out=str(out))

        report = read_report(out / 'ablate_pooling.json')
        self.assertEqual([row.label for row in report.rows], ['max', 'l2', 'average'])
        self.assertTrue((out / 'ablate_pooling.txt').is_file())
        self.assertTrue((out / 'l2' / 'fold00' / 'repeat00').is_dir())

    def test_sweep_lengths(self):
        out = self.root / 'sweep'
        output = run('sweep', '--lengths=0.3,0.25', config=str(self.config), out=str(out))

        report = read_report(out / 'sweep_length.json')
        self.assertEqual([row.value for row in report.rows], [0.25, 0.3])
        self.assertEqual(len((out / 'sweep_length_series.csv').read_text(encoding='utf-8').splitlines()), 3)
        self.assertIn('Best input length', output)


class GradCheckCommandTests(SimpleTestCase):
    def test_all_components_pass(self):
        output = run('gradcheck', seeds=2)

        lines = [line for line in output.splitlines() if line.rstrip().endswith(' ok')]
        self.assertGreaterEqual(len(lines), 10)
        self.assertIn('All', output)

    def test_subset(self):
        output = run('gradcheck', '--components=matmul,lstm', seeds=1)
        self.assertIn('matmul', output)
        self.assertNotIn('conv2d', output)

    def test_planted_bug_fails(self):
        with mock.patch.object(ag, 'tanh', leaky_tanh):
            with self.assertRaises(CommandError) as ctx:
                run('gradcheck', '--components=lstm', seeds=1)

        self.assertEqual(ctx.exception.returncode, 1)
        self.assertIn('lstm', str(ctx.exception))

    def test_seed_generator_counted_for_every_component(self):
        results = run_suite(components=['matmul', 'elementwise'], seeds=(seed for seed in range(2)))

        self.assertEqual([result.seeds for result in results], [2, 2])
        self.assertTrue(all(result.checked > 0 and result.passed for result in results))

    def test_bad_seed_count(self):
        with self.assertRaises(CommandError) as ctx:
            run('gradcheck', seeds=0)
        self.assertEqual(ctx.exception.returncode, 2)


@skipUnless(SLOW_TESTS, 'Set RAWSPEECH_SLOW_TESTS=1 to run the desk-scale acceptance runs')
class AcceptanceTests(SimpleTestCase):
    '''Desk-scale runs on the default ten-speaker synthetic corpus'''

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config = self.root / 'desk.ini'
        self.config.write_text(
            f'[run]\ndesk_scale = true\njobs = 1\n'
            f'[corpus]\nmanifest = {self.root.as_posix()}/corpus/manifest.csv\n'
            f'[synth]\noutput_dir = {self.root.as_posix()}/corpus\n',
            encoding='utf-8',
        )
        run('synth', config=str(self.config))

    def tearDown(self):
        self.tmp.cleanup()

    def test_loso_on_separable_corpus(self):
        run('eval', config=str(self.config), out=str(self.root / 'eval'))
        report = read_report(self.root / 'eval' / 'report.json')

        self.assertEqual(len(report.rows[0].folds), 10)
        self.assertGreaterEqual(report.rows[0].pooled_uar, 0.85)

    def test_block_ablation_has_seven_rows(self):
        run('ablate', '--axis=block', config=str(self.config), out=str(self.root / 'block'))
        self.assertEqual(len(read_report(self.root / 'block' / 'ablate_block.json').rows), 7)


@skipUnless(SLOW_TESTS, 'Set RAWSPEECH_SLOW_TESTS=1 to run the full gradient check')
class FullGradCheckTests(SimpleTestCase):
    def test_default_seeds_pass(self):
        output = run('gradcheck')

        lines = [line for line in output.splitlines() if line.rstrip().endswith(' ok')]
        self.assertEqual(len(lines), len(COMPONENTS))
        self.assertIn(f'All {len(COMPONENTS)} components', output)

    def test_every_seed_is_counted(self):
        results = run_suite(components=['matmul', 'pool1d-l2'])
        self.assertEqual({result.seeds for result in results}, {len(DEFAULT_SEEDS)})
        self.assertGreaterEqual(len(DEFAULT_SEEDS), 10)
