import json

from rawspeech_app.corpus import loso_folds
from rawspeech_app.evaluation import experiment_manifest, format_mean_std
from rawspeech_app.exceptions import ConfigError
from rawspeech_app.training import repeat_and_aggregate

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Train and test one LOSO fold (every repeat), writing logs and checkpoints.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--fold-index', type=int, default=0, help='LOSO fold to train (0-based)')

    def run(self, config, **options):
        manifest = self.load_manifest(config)
        folds = loso_folds(experiment_manifest(config.experiment, manifest))

        fold_index = options.get('fold_index', 0)
        if not 0 <= fold_index < len(folds):
            raise ConfigError(f'--fold-index must be in 0..{len(folds) - 1}, got {fold_index}')

        fold = folds[fold_index]
        out_dir = config.out_dir / f'fold{fold.index:02d}'

        self.stdout.write(
            f'Fold {fold.index}: test {fold.test_speaker}, val {fold.val_speaker}, '
            f'{len(fold.train)} train / {len(fold.val)} val / {len(fold.test)} test utterances'
        )

        summary = repeat_and_aggregate(
            config.experiment, fold, n_repeats=config.repeats, seed=config.seed, jobs=config.jobs, run_dir=out_dir
        )
        config.write(out_dir)

        document = {
            'fingerprint': config.fingerprint,
            'fold': fold.index,
            'test_speaker': fold.test_speaker,
            'val_speaker': fold.val_speaker,
            'seeds': summary.seeds,
            'repeat_uars': summary.repeat_uars,
            'mean_uar': summary.mean_uar,
            'std_uar': summary.std_uar,
            'ensemble_uar': summary.ensemble_uar,
            'confusion': summary.ensemble_confusion.tolist(),
            'best_epochs': summary.best_epochs,
            'epochs_run': summary.epochs_run,
        }
        summary_path = out_dir / 'summary.json'
        summary_path.write_text(json.dumps(document, indent=2, sort_keys=True) + '\n', encoding='utf-8')

        for seed, value, best in zip(summary.seeds, summary.repeat_uars, summary.best_epochs):
            self.stdout.write(f'  seed {seed}: test UAR {100 * value:.2f} (best epoch {best})')

        self.stdout.write(self.style.SUCCESS(
            f'Fold {fold.index} UAR {format_mean_std(summary.mean_uar, summary.std_uar)}, '
            f'ensemble {100 * summary.ensemble_uar:.2f}'
        ))

        missing = summary.ensemble_confusion.missing_classes()
        if missing:
            self.stdout.write(self.style.WARNING(f'Test speaker has no {", ".join(missing)} utterances'))

        self.stdout.write(self.style.SUCCESS(f'Wrote {summary_path}'))
