from rawspeech_app.evaluation import format_mean_std, sweep_input_length

from ._base import ExperimentCommand


def parse_lengths(value: str) -> list[float]:
    return [float(item) for item in value.split(',') if item.strip()]


class Command(ExperimentCommand):
    help = 'Sweep the input window length under LOSO and write the UAR series.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--lengths', type=parse_lengths, default=None, help='Comma separated lengths in seconds')

    def run(self, config, **options):
        lengths = options.get('lengths') or list(config.sweep_lengths)
        config = config.with_overrides(sweep_lengths=tuple(lengths))
        manifest = self.load_manifest(config)

        report = sweep_input_length(
            config.experiment,
            manifest,
            n_repeats=config.repeats,
            lengths_s=lengths,
            seed=config.seed,
            jobs=config.jobs,
            out_dir=config.out_dir,
        )
        self.write_outputs(config, report, config.out_dir, stem='sweep_length')

        best = report.best_row
        self.stdout.write(self.style.SUCCESS(
            f'Best input length: {best.label} ({format_mean_std(best.mean_uar, best.std_uar)})'
        ))
