'''
Corpus manifests, speaker-aware LOSO splitting, augmentation bookkeeping and
the synthetic desk-scale corpus generator.
'''
from __future__ import annotations

import csv
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rawspeech_app.audio_io import Waveform, write_wav
from rawspeech_app.constants import (
    DEFAULT_SAMPLE_RATE,
    EMOTION_INDEX,
    EMOTION_MAP,
    EMOTION_ORDER,
    MANIFEST_COLUMNS,
    ORIGINAL,
    normalize_str,
    parse_augmentation,
    speed_tag,
)
from rawspeech_app.exceptions import AudioWriteError, FoldError, ManifestError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UtteranceRecord:
    path: str
    speaker_id: str
    session_id: str
    label: str
    augmentation: str = ORIGINAL

    @property
    def is_original(self) -> bool:
        return self.augmentation == ORIGINAL

    @property
    def speed_factor(self) -> float | None:
        return parse_augmentation(self.augmentation)

    @property
    def label_index(self) -> int:
        return EMOTION_INDEX[self.label]


@dataclass(frozen=True)
class CorpusManifest:
    records: tuple[UtteranceRecord, ...]
    name: str = 'corpus'
    # Directory that relative record paths are resolved against
    root: Path = field(default=Path('.'), compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def audio_path(self, record: UtteranceRecord) -> Path:
        path = Path(record.path)
        return path if path.is_absolute() else self.root / path

    def speakers(self) -> list[str]:
        return sorted({record.speaker_id for record in self.records})

    def sessions(self) -> dict[str, list[str]]:
        '''session -> sorted distinct speakers'''
        by_session: dict[str, set[str]] = {}
        for record in self.records:
            by_session.setdefault(record.session_id, set()).add(record.speaker_id)

        return {session: sorted(speakers) for session, speakers in sorted(by_session.items())}

    def subset(self, records, name: str | None = None) -> CorpusManifest:
        return CorpusManifest(records=tuple(records), name=name or self.name, root=self.root)


@dataclass(frozen=True)
class LosoFold:
    index: int
    test_speaker: str
    val_speaker: str
    train: CorpusManifest
    val: CorpusManifest
    test: CorpusManifest


# === Manifest CSV ===

def normalize_header(header: str) -> str:
    h = str(header).strip()
    h = re.sub(r'\s+', ' ', h)

    return h.casefold()


def normalize_cell(value: str | None) -> str:
    v = '' if value is None else str(value)
    return re.sub(r'\s+', ' ', v.strip())


def parse_label(value: str) -> str:
    try:
        return EMOTION_MAP[normalize_str(value)].value
    except KeyError:
        allowed = ', '.join(emotion.value for emotion in EMOTION_ORDER)
        raise ValueError(f'Unknown label {value!r}; allowed labels: {allowed}') from None


def parse_record(row: dict) -> UtteranceRecord:
    # DictReader stores surplus cells under None and missing ones as None
    if None in row or any(value is None for value in row.values()):
        raise ValueError('Malformed row: wrong number of fields')

    path = normalize_cell(row['path'])
    speaker = normalize_cell(row['speaker'])
    session = normalize_cell(row['session'])

    for column, value in (('path', path), ('speaker', speaker), ('session', session)):
        if not value:
            raise ValueError(f'Malformed row: empty `{column}`')

    augmentation = normalize_str(row['augmentation']) or ORIGINAL
    factor = parse_augmentation(augmentation)

    return UtteranceRecord(
        path=path,
        speaker_id=speaker,
        session_id=session,
        label=parse_label(row['label']),
        augmentation=ORIGINAL if factor is None else speed_tag(factor),
    )


def load_manifest(path: str | Path) -> CorpusManifest:
    '''
    Parse a manifest CSV (`path,speaker,session,label,augmentation`).
    Audio files are not opened. Errors carry the CSV line number (header = 1).
    '''
    path = Path(path).expanduser().resolve()

    if not path.is_file():
        raise ManifestError(f'Manifest file not found: {path}')

    records: list[UtteranceRecord] = []
    seen: set[tuple[str, str]] = set()
    # session -> {speaker: first row}
    session_rows: dict[str, dict[str, int]] = {}

    with path.open('r', encoding='utf-8-sig', newline='') as f:
        reader = csv.DictReader(f)
        fieldnames = [normalize_header(header) for header in (reader.fieldnames or [])]

        # Header-only and empty files both need the header
        missing = [col for col in MANIFEST_COLUMNS if col not in fieldnames]
        if missing:
            raise ManifestError(f'Manifest missing required columns: {missing}', row=1)

        reader.fieldnames = fieldnames

        # Row 1 is the header, so data starts from 2
        for ind, row in enumerate(reader, start=2):
            try:
                record = parse_record(row)
            except ValueError as exc:
                raise ManifestError(str(exc), row=ind) from None

            key = (record.path, record.augmentation)
            if key in seen:
                raise ManifestError(f'Duplicate (path, augmentation): {key}', row=ind)

            speakers = session_rows.setdefault(record.session_id, {})
            if record.speaker_id not in speakers and len(speakers) == 2:
                raise ManifestError(
                    f'Session {record.session_id!r} already has two speakers {sorted(speakers)}, got {record.speaker_id!r}',
                    row=ind,
                )
            speakers.setdefault(record.speaker_id, ind)

            seen.add(key)
            records.append(record)

    for session, speakers in session_rows.items():
        if len(speakers) != 2:
            raise ManifestError(f'Session {session!r} needs two speakers, got {sorted(speakers)}', row=min(speakers.values()))

    logger.info('Loaded manifest %s: %d records', path, len(records))

    return CorpusManifest(records=tuple(records), name=path.stem, root=path.parent)


def write_manifest(manifest: CorpusManifest, path: str | Path) -> Path:
    path = Path(path)

    with path.open('w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(MANIFEST_COLUMNS)

        for record in manifest.records:
            writer.writerow([record.path, record.speaker_id, record.session_id, record.label, record.augmentation])

    return path


# === Augmentation and splitting ===

def augment_manifest(manifest: CorpusManifest, factors: list[float]) -> CorpusManifest:
    '''
    Add one speed-perturbed copy per (record, factor); |out| = |m| * (1 + |factors|)
    '''
    if not factors:
        raise ValueError('At least one speed factor is required')

    if any(factor <= 0 for factor in factors):
        raise ValueError(f'Speed factors must be positive: {factors}')

    if any(not record.is_original for record in manifest.records):
        raise ManifestError('Manifest already contains augmented records')

    records: list[UtteranceRecord] = []
    for record in manifest.records:
        records.append(record)
        for factor in factors:
            records.append(
                UtteranceRecord(
                    path=record.path,
                    speaker_id=record.speaker_id,
                    session_id=record.session_id,
                    label=record.label,
                    augmentation=speed_tag(factor),
                )
            )

    return manifest.subset(records)


def loso_folds(manifest: CorpusManifest) -> list[LosoFold]:
    '''
    One fold per speaker: the speaker is tested, its session partner validates,
    everyone else (with augmented copies) trains. Val/test hold originals only.
    '''
    sessions = manifest.sessions()

    bad = {session: speakers for session, speakers in sessions.items() if len(speakers) != 2}
    if bad:
        raise FoldError(f'Every session needs exactly two speakers, got: {bad}')

    folds: list[LosoFold] = []
    for session, (first, second) in sessions.items():
        for test_speaker, val_speaker in ((first, second), (second, first)):
            held_out = {test_speaker, val_speaker}

            train = [r for r in manifest.records if r.speaker_id not in held_out]
            val = [r for r in manifest.records if r.speaker_id == val_speaker and r.is_original]
            test = [r for r in manifest.records if r.speaker_id == test_speaker and r.is_original]

            if not train:
                raise FoldError(f'Fold with test speaker {test_speaker!r} has an empty training partition')
            if not val or not test:
                raise FoldError(f'Session {session!r} has a speaker without original utterances')

            ind = len(folds)
            folds.append(
                LosoFold(
                    index=ind,
                    test_speaker=test_speaker,
                    val_speaker=val_speaker,
                    train=manifest.subset(train, f'{manifest.name}-fold{ind}-train'),
                    val=manifest.subset(val, f'{manifest.name}-fold{ind}-val'),
                    test=manifest.subset(test, f'{manifest.name}-fold{ind}-test'),
                )
            )

    return folds


def label_counts(manifest: CorpusManifest) -> dict[str, int]:
    counts = Counter(record.label for record in manifest.records)
    return {emotion.value: counts.get(emotion.value, 0) for emotion in EMOTION_ORDER}


# === Synthetic corpus ===

# Per-class signal family: fundamental-frequency band (Hz) and amplitude-modulation rate (Hz)
CLASS_SIGNATURES = {
    'angry': ((210.0, 250.0), 8.0),
    'happy': ((165.0, 195.0), 5.5),
    'neutral': ((120.0, 140.0), 3.5),
    'sad': ((85.0, 105.0), 2.0),
}

N_HARMONICS = 6
AM_DEPTH = 0.8
PEAK_LEVEL = 0.9


@dataclass(frozen=True)
class SynthSpec:
    output_dir: Path = Path('data/synthetic')
    sessions: int = 5
    utterances_per_speaker: int = 12
    duration_s: float = 2.5
    sample_rate: int = DEFAULT_SAMPLE_RATE
    noise_level: float = 0.05
    silence_s: float = 0.25

    def __post_init__(self):
        if self.sessions < 1:
            raise ValueError(f'sessions must be >= 1, got {self.sessions}')
        if self.utterances_per_speaker < 1:
            raise ValueError(f'utterances_per_speaker must be >= 1, got {self.utterances_per_speaker}')
        if self.duration_s <= 0 or self.sample_rate <= 0:
            raise ValueError('duration_s and sample_rate must be positive')
        if self.noise_level < 0 or self.silence_s < 0:
            raise ValueError('noise_level and silence_s cannot be negative')


def speaker_timbre(rng: np.random.Generator) -> np.ndarray:
    '''Harmonic weighting drawn once per speaker'''
    weights = rng.uniform(0.2, 1.0, N_HARMONICS) / np.arange(1, N_HARMONICS + 1)
    return weights / weights.sum()


def synth_utterance(
    rng: np.random.Generator,
    label: str,
    timbre: np.ndarray,
    spec: SynthSpec,
) -> np.ndarray:
    (f0_low, f0_high), am_rate = CLASS_SIGNATURES[label]
    n_voiced = int(round(spec.duration_s * spec.sample_rate))
    t = np.arange(n_voiced) / spec.sample_rate

    f0 = rng.uniform(f0_low, f0_high)
    phases = rng.uniform(0, 2 * np.pi, N_HARMONICS + 1)

    voiced = np.zeros(n_voiced)
    for h, weight in enumerate(timbre, start=1):
        voiced += weight * np.sin(2 * np.pi * h * f0 * t + phases[h])

    envelope = 1 - AM_DEPTH / 2 + (AM_DEPTH / 2) * np.sin(2 * np.pi * am_rate * t + phases[0])
    voiced = voiced * envelope
    voiced = voiced / np.max(np.abs(voiced))
    voiced = voiced + spec.noise_level * rng.standard_normal(n_voiced)

    # Silent margins give the non-speech trimmer something to remove
    pad = np.zeros(int(round(spec.silence_s * spec.sample_rate)))
    samples = np.concatenate([pad, voiced, pad])

    return PEAK_LEVEL * samples / np.max(np.abs(samples))


def generate_synthetic(spec: SynthSpec, seed: int) -> CorpusManifest:
    '''
    Write a dyadic-session corpus of WAV files plus `manifest.csv`.
    Identical (spec, seed) gives a bit-identical corpus.
    '''
    out_dir = Path(spec.output_dir)
    wav_dir = out_dir / 'wav'

    try:
        wav_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise AudioWriteError(f'Cannot create output directory {out_dir}: {exc}') from exc

    rng = np.random.default_rng(seed)
    records: list[UtteranceRecord] = []

    for session_ind in range(1, spec.sessions + 1):
        session_id = f'ses{session_ind:02d}'

        for partner in range(2):
            speaker_id = f'spk{(session_ind - 1) * 2 + partner + 1:02d}'
            timbre = speaker_timbre(rng)

            for utt_ind in range(spec.utterances_per_speaker):
                # Round-robin labels keep every speaker class-balanced
                label = EMOTION_ORDER[utt_ind % len(EMOTION_ORDER)].value
                samples = synth_utterance(rng, label, timbre, spec)

                rel_path = f'wav/{speaker_id}_{utt_ind:03d}.wav'
                write_wav(Waveform(samples=samples, sample_rate=spec.sample_rate), out_dir / rel_path)

                records.append(UtteranceRecord(rel_path, speaker_id, session_id, label))

    manifest = CorpusManifest(records=tuple(records), name='manifest', root=out_dir.resolve())
    write_manifest(manifest, out_dir / 'manifest.csv')

    logger.info('Synthetic corpus: %d utterances, %d speakers -> %s', len(records), spec.sessions * 2, out_dir)

    return manifest
