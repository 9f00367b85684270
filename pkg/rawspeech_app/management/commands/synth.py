from collections import Counter
from dataclasses import replace
from pathlib import Path

from rawspeech_app.constants import EMOTION_ORDER
from rawspeech_app.corpus import CorpusManifest, generate_synthetic
from rawspeech_app.exceptions import ConfigError

from ._base import ExperimentCommand


def corpus_stats(manifest: CorpusManifest) -> list[tuple[str, int, int]]:
    '''(class, utterances, speakers) per emotion class, in label order'''
    utterances = Counter(record.label for record in manifest.records)
    speakers = {
        emotion.value: len({r.speaker_id for r in manifest.records if r.label == emotion.value})
        for emotion in EMOTION_ORDER
    }
    return [(emotion.value, utterances.get(emotion.value, 0), speakers[emotion.value]) for emotion in EMOTION_ORDER]


class Command(ExperimentCommand):
    help = 'Generate the synthetic dyadic-session corpus (WAV files plus manifest.csv).'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--sessions', type=int, default=None, help='Sessions (two speakers each)')
        parser.add_argument('--utterances', type=int, default=None, help='Utterances per speaker')

    def run(self, config, **options):
        changes = {}
        # --out names the corpus directory here
        if options.get('out'):
            changes['output_dir'] = Path(options['out'])
        if options.get('sessions') is not None:
            changes['sessions'] = options['sessions']
        if options.get('utterances') is not None:
            changes['utterances_per_speaker'] = options['utterances']

        try:
            spec = replace(config.synth, **changes)
        except ValueError as exc:
            raise ConfigError(f'Invalid synthetic corpus settings: {exc}') from None

        config = replace(config, synth=spec, manifest=Path(spec.output_dir) / 'manifest.csv')
        manifest = generate_synthetic(spec, config.seed)
        config.write(spec.output_dir)

        speakers = manifest.speakers()
        self.stdout.write(self.style.SUCCESS(f'Manifest: {Path(spec.output_dir) / "manifest.csv"}'))
        self.stdout.write(
            f'{len(manifest)} utterances, {len(speakers)} speakers, {len(manifest.sessions())} sessions, seed {config.seed}'
        )

        self.stdout.write(f'{"Class":<10}{"Utterances":>12}{"Speakers":>10}')
        for label, n_utterances, n_speakers in corpus_stats(manifest):
            self.stdout.write(f'{label:<10}{n_utterances:>12}{n_speakers:>10}')
