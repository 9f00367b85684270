'''
Run configuration: one INI file with [run], [corpus], [model] and [synth]
sections. Missing keys take the full-scale defaults, or the desk-scale ones
when `desk_scale = true`. The effective config is echoed back as INI and
re-parses to an identical RunConfig.
'''
from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from rawspeech_app.constants import (
    BATCH_SIZE,
    DEFAULT_SAMPLE_RATE,
    DESK_FILTERS_PER_BRANCH,
    DESK_INPUT_SECONDS,
    DESK_MAX_EPOCHS,
    DESK_POOLED_FRAMES,
    DESK_REPEATS,
    DESK_WIDTH_DIVISOR,
    EMOTION_ORDER,
    FULL_BRANCH_STRIDE_MS,
    FULL_BRANCH_WIDTHS_MS,
    FULL_DROPOUT,
    FULL_FILTERS_PER_BRANCH,
    FULL_HALVE_PATIENCE,
    FULL_INPUT_SECONDS,
    FULL_LEARNING_RATE,
    FULL_POOLED_FRAMES,
    FULL_REPEATS,
    FULL_SPEED_FACTORS,
    FULL_STOP_PATIENCE,
    GRAD_CLIP_NORM,
    MAX_EPOCHS,
    SWEEP_LENGTHS_S,
    TRIM_FRAME_MS,
    TRIM_THRESHOLD_DB,
    BlockVariant,
    PoolMode,
)
from rawspeech_app.corpus import SynthSpec
from rawspeech_app.evaluation import config_fingerprint
from rawspeech_app.exceptions import ConfigError
from rawspeech_app.model import ModelConfig, build_ablation_block
from rawspeech_app.serializers import (
    CorpusSectionSerializer,
    ModelSectionSerializer,
    RunSectionSerializer,
    SynthSectionSerializer,
)
from rawspeech_app.training import ExperimentConfig, TrainConfig

logger = logging.getLogger(__name__)

SECTIONS = ('run', 'corpus', 'model', 'synth')

SECTION_SERIALIZERS = {
    'run': RunSectionSerializer,
    'corpus': CorpusSectionSerializer,
    'model': ModelSectionSerializer,
    'synth': SynthSectionSerializer,
}


def _join(values) -> str:
    return ', '.join(repr(float(v)) if isinstance(v, float) else str(v) for v in values)


def section_defaults(desk_scale: bool) -> dict[str, dict[str, str]]:
    '''Default key values (as config-file strings) for every section'''
    divisor = DESK_WIDTH_DIVISOR if desk_scale else 1

    return {
        'run': {
            'seed': '0',
            'jobs': '1',
            'repeats': str(DESK_REPEATS if desk_scale else FULL_REPEATS),
            'out_dir': 'runs',
            'desk_scale': 'true' if desk_scale else 'false',
            'learning_rate': repr(FULL_LEARNING_RATE),
            'batch_size': str(BATCH_SIZE),
            'max_epochs': str(DESK_MAX_EPOCHS if desk_scale else MAX_EPOCHS),
            'halve_patience': str(FULL_HALVE_PATIENCE),
            'stop_patience': str(FULL_STOP_PATIENCE),
            'grad_clip': repr(GRAD_CLIP_NORM),
            'sweep_lengths': _join(SWEEP_LENGTHS_S),
        },
        'corpus': {
            'manifest': 'data/synthetic/manifest.csv',
            'augment': 'true',
            'speed_factors': _join(FULL_SPEED_FACTORS),
            'trim_threshold_db': repr(TRIM_THRESHOLD_DB),
            'trim_frame_ms': repr(TRIM_FRAME_MS),
        },
        'model': {
            'sample_rate': str(DEFAULT_SAMPLE_RATE),
            'input_seconds': repr(DESK_INPUT_SECONDS if desk_scale else FULL_INPUT_SECONDS),
            'branch_widths_ms': _join(FULL_BRANCH_WIDTHS_MS),
            'branch_stride_ms': repr(FULL_BRANCH_STRIDE_MS),
            'filters_per_branch': str(DESK_FILTERS_PER_BRANCH if desk_scale else FULL_FILTERS_PER_BRANCH),
            'pool_mode': PoolMode.MAX.value,
            'pooled_frames': str(DESK_POOLED_FRAMES if desk_scale else FULL_POOLED_FRAMES),
            'block_spec': _join(layer.token for layer in build_ablation_block(BlockVariant.CNN_LSTM_DNN, divisor)),
            'n_classes': str(len(EMOTION_ORDER)),
            'dropout': repr(FULL_DROPOUT),
            'block_width_divisor': str(divisor),
        },
        'synth': {
            'output_dir': 'data/synthetic',
            'sessions': '5',
            'utterances_per_speaker': '12',
            'duration_s': '2.5',
            'sample_rate': str(DEFAULT_SAMPLE_RATE),
            'noise_level': '0.05',
            'silence_s': '0.25',
        },
    }


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    manifest: Path = Path('data/synthetic/manifest.csv')
    seed: int = 0
    jobs: int = 1
    repeats: int = FULL_REPEATS
    out_dir: Path = Path('runs')
    desk_scale: bool = False
    block_width_divisor: int = 1
    sweep_lengths: tuple[float, ...] = tuple(SWEEP_LENGTHS_S)
    synth: SynthSpec = field(default_factory=SynthSpec)

    @property
    def fingerprint(self) -> str:
        '''Experiment fields plus seed and repeat count; paths and job count excluded'''
        data = self.experiment.to_dict()
        data['run'] = {'seed': self.seed, 'repeats': self.repeats}
        return config_fingerprint(data)

    def with_overrides(self, **overrides) -> RunConfig:
        '''Apply command-line overrides (None values are ignored)'''
        changes = {key: value for key, value in overrides.items() if value is not None}
        if 'out_dir' in changes:
            changes['out_dir'] = Path(changes['out_dir'])
        if 'manifest' in changes:
            changes['manifest'] = Path(changes['manifest'])

        for key, minimum in (('seed', 0), ('jobs', 1), ('repeats', 1)):
            if key in changes and changes[key] < minimum:
                raise ConfigError(f'--{key} must be >= {minimum}, got {changes[key]}')

        try:
            return replace(self, **changes)
        except TypeError as exc:
            raise ConfigError(f'Invalid override: {exc}') from None

    def to_sections(self) -> dict[str, dict[str, str]]:
        model = self.experiment.model
        train = self.experiment.train

        return {
            'run': {
                'seed': str(self.seed),
                'jobs': str(self.jobs),
                'repeats': str(self.repeats),
                'out_dir': str(self.out_dir),
                'desk_scale': 'true' if self.desk_scale else 'false',
                'learning_rate': repr(train.learning_rate),
                'batch_size': str(train.batch_size),
                'max_epochs': str(train.max_epochs),
                'halve_patience': str(train.halve_patience),
                'stop_patience': str(train.stop_patience),
                'grad_clip': repr(train.grad_clip),
                'sweep_lengths': _join(self.sweep_lengths),
            },
            'corpus': {
                'manifest': str(self.manifest),
                'augment': 'true' if self.experiment.augment else 'false',
                'speed_factors': _join(self.experiment.speed_factors),
                'trim_threshold_db': repr(train.trim_threshold_db),
                'trim_frame_ms': repr(train.trim_frame_ms),
            },
            'model': {
                'sample_rate': str(model.sample_rate),
                'input_seconds': repr(model.input_seconds),
                'branch_widths_ms': _join(model.branch_widths_ms),
                'branch_stride_ms': repr(model.branch_stride_ms),
                'filters_per_branch': str(model.filters_per_branch),
                'pool_mode': model.pool_mode,
                'pooled_frames': str(model.pooled_frames),
                'block_spec': _join(layer.token for layer in model.block_spec),
                'n_classes': str(model.n_classes),
                'dropout': repr(model.dropout),
                'block_width_divisor': str(self.block_width_divisor),
            },
            'synth': {
                'output_dir': str(self.synth.output_dir),
                'sessions': str(self.synth.sessions),
                'utterances_per_speaker': str(self.synth.utterances_per_speaker),
                'duration_s': repr(float(self.synth.duration_s)),
                'sample_rate': str(self.synth.sample_rate),
                'noise_level': repr(float(self.synth.noise_level)),
                'silence_s': repr(float(self.synth.silence_s)),
            },
        }

    def to_ini(self) -> str:
        lines = [f'# Effective configuration, fingerprint {self.fingerprint}']
        for section, values in self.to_sections().items():
            lines.append(f'\n[{section}]')
            lines.extend(f'{key} = {value}' for key, value in values.items())
        return '\n'.join(lines) + '\n'

    def write(self, out_dir: str | Path | None = None) -> Path:
        '''Echo the effective config to `<out_dir>/config.ini`'''
        out_dir = Path(out_dir or self.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        path = out_dir / 'config.ini'
        path.write_text(self.to_ini(), encoding='utf-8')
        return path


def _validate_section(name: str, values: dict[str, str]) -> dict:
    serializer = SECTION_SERIALIZERS[name](data=values)

    if not serializer.is_valid():
        errors = '; '.join(f'{key}: {" ".join(str(m) for m in msgs)}' for key, msgs in serializer.errors.items())
        raise ConfigError(f'Invalid [{name}] section: {errors}')

    return serializer.validated_data


def _read_parser(parser: configparser.ConfigParser, desk_scale: bool | None = None) -> RunConfig:
    unknown_sections = [s for s in parser.sections() if s not in SECTIONS]
    if unknown_sections:
        raise ConfigError(f'Unknown config sections {unknown_sections}; expected {list(SECTIONS)}')

    raw = {section: dict(parser[section]) if parser.has_section(section) else {} for section in SECTIONS}

    # The desk-scale switch decides the defaults of every other key
    if desk_scale is None:
        flag = raw['run'].get('desk_scale', 'false').strip().casefold()
        desk_scale = flag in {'1', 'true', 'yes', 'on'}

    defaults = section_defaults(desk_scale)
    merged = {}
    for section in SECTIONS:
        unknown = sorted(set(raw[section]) - set(defaults[section]))
        if unknown:
            raise ConfigError(f'Unknown keys in [{section}]: {unknown}; allowed: {sorted(defaults[section])}')

        merged[section] = {**defaults[section], **raw[section]}

    merged['run']['desk_scale'] = 'true' if desk_scale else 'false'

    run = _validate_section('run', merged['run'])
    corpus = _validate_section('corpus', merged['corpus'])
    model = _validate_section('model', merged['model'])
    synth = _validate_section('synth', merged['synth'])

    model_fields = {key: value for key, value in model.items() if key != 'block_width_divisor'}

    experiment = ExperimentConfig(
        model=ModelConfig(**model_fields),
        train=TrainConfig(
            learning_rate=run['learning_rate'],
            batch_size=run['batch_size'],
            max_epochs=run['max_epochs'],
            halve_patience=run['halve_patience'],
            stop_patience=run['stop_patience'],
            grad_clip=run['grad_clip'],
            trim_threshold_db=corpus['trim_threshold_db'],
            trim_frame_ms=corpus['trim_frame_ms'],
        ),
        augment=corpus['augment'],
        speed_factors=tuple(corpus['speed_factors']),
    )

    try:
        synth_spec = SynthSpec(output_dir=Path(synth.pop('output_dir')), **synth)
    except ValueError as exc:
        raise ConfigError(f'Invalid [synth] section: {exc}') from None

    return RunConfig(
        experiment=experiment,
        manifest=Path(corpus['manifest']),
        seed=run['seed'],
        jobs=run['jobs'],
        repeats=run['repeats'],
        out_dir=Path(run['out_dir']),
        desk_scale=desk_scale,
        block_width_divisor=model['block_width_divisor'],
        sweep_lengths=tuple(run['sweep_lengths']),
        synth=synth_spec,
    )


def parse_config_text(text: str, desk_scale: bool | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f'Malformed config: {exc}') from None

    return _read_parser(parser, desk_scale)


def load_run_config(path: str | Path | None = None, desk_scale: bool | None = None) -> RunConfig:
    '''
    Parse a config file (None -> all defaults). `desk_scale` overrides the
    file's own flag when given.
    '''
    if path is None:
        return parse_config_text('', desk_scale)

    path = Path(path)
    if not path.is_file():
        raise ConfigError(f'Config file not found: {path}')

    config = parse_config_text(path.read_text(encoding='utf-8'), desk_scale)
    logger.info('Loaded run config %s (desk scale: %s)', path, config.desk_scale)

    return config
