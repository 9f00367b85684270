from rawspeech_app.evaluation import run_loso

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Full leave-one-speaker-out evaluation of the configured model.'

    def run(self, config, **options):
        manifest = self.load_manifest(config)

        report = run_loso(
            config.experiment,
            manifest,
            n_repeats=config.repeats,
            seed=config.seed,
            jobs=config.jobs,
            out_dir=config.out_dir,
        )
        self.write_outputs(config, report, config.out_dir)
