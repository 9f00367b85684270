from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from rawspeech_app.corpus import CorpusManifest, load_manifest
from rawspeech_app.evaluation import EvalReport, format_table
from rawspeech_app.exceptions import ConfigError, ManifestError, RawSpeechError
from rawspeech_app.reports import write_report
from rawspeech_app.run_config import RunConfig, load_run_config

# Exit codes: bad input (config, manifest, arguments) vs failure while running
CONFIG_ERROR_CODE = 2
RUNTIME_ERROR_CODE = 1


class ExperimentCommand(BaseCommand):
    '''
    Shared flags and error mapping for the experiment commands.
    Subclasses implement `run(config, **options)`.
    '''

    def add_arguments(self, parser):
        parser.add_argument('--config', type=str, default=None, help='Path to the INI run config')
        parser.add_argument('--out', type=str, default=None, help='Output directory (overrides [run] out_dir)')
        parser.add_argument('--seed', type=int, default=None, help='Base seed (overrides [run] seed)')
        parser.add_argument('--jobs', type=int, default=None, help='Worker processes; 1 runs sequentially')
        parser.add_argument('--repeats', type=int, default=None, help='Training repeats per fold')
        parser.add_argument(
            '--desk-scale',
            action='store_true',
            default=None,
            help='Use the desk-scale defaults for every size setting',
        )

    def load_config(self, options) -> RunConfig:
        config = load_run_config(options.get('config'), desk_scale=options.get('desk_scale'))

        return config.with_overrides(
            out_dir=options.get('out'),
            seed=options.get('seed'),
            jobs=options.get('jobs'),
            repeats=options.get('repeats'),
        )

    def load_manifest(self, config: RunConfig) -> CorpusManifest:
        return load_manifest(config.manifest)

    def write_outputs(self, config: RunConfig, report: EvalReport, out_dir: Path, stem: str = 'report') -> None:
        report.run_fingerprint = config.fingerprint
        config.write(out_dir)
        paths = write_report(report, out_dir, stem)

        self.stdout.write(format_table(report))
        for kind, path in paths.items():
            self.stdout.write(self.style.SUCCESS(f'Wrote {kind}: {path}'))

    def handle(self, *args, **options):
        try:
            config = self.load_config(options)
            run_options = {key: value for key, value in options.items() if key != 'config'}
            return self.run(config, **run_options)
        except (ConfigError, ManifestError) as exc:
            raise CommandError(str(exc), returncode=CONFIG_ERROR_CODE) from exc
        except RawSpeechError as exc:
            raise CommandError(f'{type(exc).__name__}: {exc}', returncode=RUNTIME_ERROR_CODE) from exc

    def run(self, config: RunConfig, **options):
        raise NotImplementedError
