from rawspeech_app.constants import AblationAxis
from rawspeech_app.evaluation import parse_axis, run_axis

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Run one ablation axis under LOSO and write a one-row-per-variant report.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        # Checked by parse_axis so an unknown axis is reported as a config error
        parser.add_argument(
            '--axis',
            type=str,
            required=True,
            help=f'Ablation axis: {", ".join(AblationAxis.values)}',
        )

    def run(self, config, **options):
        # Axis first: it needs no manifest
        axis = parse_axis(options['axis'])
        manifest = self.load_manifest(config)

        report = run_axis(
            axis,
            config.experiment,
            manifest,
            n_repeats=config.repeats,
            seed=config.seed,
            jobs=config.jobs,
            out_dir=config.out_dir,
            width_divisor=config.block_width_divisor,
        )
        self.write_outputs(config, report, config.out_dir, stem=f'ablate_{axis.value}')
