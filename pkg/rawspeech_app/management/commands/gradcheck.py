import time

from django.core.management.base import BaseCommand, CommandError

from rawspeech_app.constants import GRADCHECK_STEP, GRADCHECK_TOLERANCE
from rawspeech_app.gradcheck import COMPONENTS, run_suite


def parse_components(value: str) -> list[str]:
    names = [item.strip() for item in value.split(',') if item.strip()]
    unknown = [name for name in names if name not in COMPONENTS]
    if unknown:
        raise ValueError(f'Unknown components {unknown}')
    return names


class Command(BaseCommand):
    help = 'Finite-difference gradient check of every layer and the end-to-end tiny model.'

    def add_arguments(self, parser):
        parser.add_argument('--seeds', type=int, default=10, help='Random seeds per component')
        parser.add_argument('--components', type=parse_components, default=None,
                            help=f'Comma separated subset of: {", ".join(COMPONENTS)}')
        parser.add_argument('--step', type=float, default=GRADCHECK_STEP, help='Central-difference step')
        parser.add_argument('--tolerance', type=float, default=GRADCHECK_TOLERANCE, help='Max relative error')

    def handle(self, *args, **options):
        if options['seeds'] < 1:
            raise CommandError('--seeds must be >= 1', returncode=2)

        started = time.perf_counter()
        results = run_suite(
            components=options.get('components'),
            seeds=range(options['seeds']),
            step=options['step'],
            tolerance=options['tolerance'],
        )

        width = max(len(result.name) for result in results)
        self.stdout.write(f'{"Component":<{width}}  {"Max rel. error":>14}  {"Checked":>8}  {"Skipped":>8}  Status')

        for result in results:
            line = (f'{result.name:<{width}}  {result.max_error:>14.3e}  '
                    f'{result.checked:>8}  {result.skipped:>8}  {"ok" if result.passed else "FAIL"}')
            self.stdout.write(self.style.SUCCESS(line) if result.passed else self.style.ERROR(line))

        failed = [result.name for result in results if not result.passed]
        elapsed = time.perf_counter() - started

        if failed:
            raise CommandError(
                f'{len(failed)} of {len(results)} components above tolerance {options["tolerance"]:g}: {", ".join(failed)}',
                returncode=1,
            )

        self.stdout.write(self.style.SUCCESS(
            f'All {len(results)} components below {options["tolerance"]:g} ({elapsed:.1f} s)'
        ))
