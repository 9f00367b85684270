'''
Leave-one-speaker-out experiments and the analysis harnesses built on them:
parallel-layer count, pooling mode, classification-block composition,
augmentation on/off and the input-length sweep.
'''
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rawspeech_app.constants import (
    PARALLEL_BRANCH_SETS,
    SWEEP_LENGTHS_S,
    AblationAxis,
    BlockVariant,
    PoolMode,
    normalize_str,
)
from rawspeech_app.corpus import CorpusManifest, augment_manifest, loso_folds
from rawspeech_app.exceptions import ConfigError
from rawspeech_app.metrics import ConfusionMatrix, class_names, confusion_matrix, uar
from rawspeech_app.model import build, build_ablation_block, parallel_branch_sets
from rawspeech_app.training import (
    ExperimentConfig,
    aggregate_repeats,
    repeat_seeds,
    run_training_tasks,
    sample_std,
)

logger = logging.getLogger(__name__)

__all__ = [
    'ConfusionMatrix', 'confusion_matrix', 'uar', 'EvalReport', 'ReportRow', 'FoldResult',
    'run_loso', 'ablate_parallel_layers', 'ablate_pooling', 'ablate_block',
    'ablate_augmentation', 'sweep_input_length', 'format_table', 'config_fingerprint',
]

# Axis label used for plain LOSO reports and the length sweep
LOSO_AXIS = 'loso'
LENGTH_AXIS = 'length'

# Config field each harness is allowed to change
ABLATED_FIELD = {
    AblationAxis.LAYERS.value: 'model.branch_widths_ms',
    AblationAxis.POOLING.value: 'model.pool_mode',
    AblationAxis.BLOCK.value: 'model.block_spec',
    AblationAxis.AUGMENTATION.value: 'augment',
    LENGTH_AXIS: 'model.input_seconds',
}


# === Fingerprints ===

def _flatten(data: dict, prefix: str = '') -> dict:
    flat = {}
    for key, value in data.items():
        name = f'{prefix}{key}'
        if isinstance(value, dict):
            flat.update(_flatten(value, f'{name}.'))
        else:
            flat[name] = value
    return flat


def config_fingerprint(config: ExperimentConfig | dict, exclude=()) -> str:
    '''sha256 over the canonical JSON of the experiment fields (dotted names in `exclude` left out)'''
    data = config.to_dict() if isinstance(config, ExperimentConfig) else config
    flat = {key: value for key, value in _flatten(data).items() if key not in set(exclude)}
    canonical = json.dumps(flat, sort_keys=True, separators=(',', ':'))

    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


# === Report types ===

@dataclass
class FoldResult:
    index: int
    test_speaker: str
    val_speaker: str
    seeds: list[int]
    repeat_uars: list[float]
    mean_uar: float
    std_uar: float
    ensemble_uar: float
    confusion: ConfusionMatrix
    repeat_confusions: list[ConfusionMatrix] = field(default_factory=list)
    best_epochs: list[int] = field(default_factory=list)
    epochs_run: list[int] = field(default_factory=list)

    @property
    def missing_classes(self) -> list[str]:
        return self.confusion.missing_classes()


@dataclass
class ReportRow:
    '''One evaluated configuration'''
    label: str
    fingerprint: str
    shared_fingerprint: str
    parameter_count: int
    config: dict
    folds: list[FoldResult]
    value: float | None = None

    @property
    def fold_uars(self) -> list[float]:
        return [fold.mean_uar for fold in self.folds]

    @property
    def mean_uar(self) -> float:
        return float(np.mean(self.fold_uars))

    @property
    def std_uar(self) -> float:
        '''Spread across LOSO folds'''
        return sample_std(self.fold_uars)

    @property
    def repeat_uars(self) -> list[float]:
        '''Per repeat index, the fold-averaged test UAR'''
        n_repeats = min(len(fold.repeat_uars) for fold in self.folds)
        return [float(np.mean([fold.repeat_uars[r] for fold in self.folds])) for r in range(n_repeats)]

    @property
    def repeat_std(self) -> float:
        '''Spread across training repeats'''
        return sample_std(self.repeat_uars)

    @property
    def ensemble_uar(self) -> float:
        return float(np.mean([fold.ensemble_uar for fold in self.folds]))

    @property
    def pooled_confusion(self) -> ConfusionMatrix:
        total = self.folds[0].confusion
        for fold in self.folds[1:]:
            total = total + fold.confusion
        return total

    @property
    def pooled_uar(self) -> float:
        return uar(self.pooled_confusion)


@dataclass
class EvalReport:
    axis: str
    fingerprint: str
    rows: list[ReportRow]
    notes: list[str] = field(default_factory=list)
    # Set by the commands: fingerprint of the whole run config (seed, repeats included)
    run_fingerprint: str = ''

    def row(self, label: str) -> ReportRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)

    @property
    def series(self) -> list[tuple[float, float, float]]:
        '''(value, mean UAR, fold std) per row, for rows that carry a numeric value'''
        return [(row.value, row.mean_uar, row.std_uar) for row in self.rows if row.value is not None]

    @property
    def best_row(self) -> ReportRow:
        # First row wins ties, rows are already in report order
        return max(self.rows, key=lambda row: (row.mean_uar, -self.rows.index(row)))


# === LOSO ===

def slugify(label: str) -> str:
    return re.sub(r'[^a-z0-9.]+', '-', label.casefold()).strip('-') or 'row'


def experiment_manifest(config: ExperimentConfig, manifest: CorpusManifest) -> CorpusManifest:
    '''Originals, plus speed-perturbed copies when augmentation is on'''
    originals = manifest.subset([r for r in manifest.records if r.is_original])

    if config.augment:
        return augment_manifest(originals, list(config.speed_factors))
    return originals


def run_loso(
    config: ExperimentConfig,
    manifest: CorpusManifest,
    n_repeats: int,
    seed: int = 0,
    jobs: int = 1,
    out_dir: str | Path | None = None,
    label: str = 'default',
    shared_fingerprint: str | None = None,
    value: float | None = None,
) -> EvalReport:
    '''
    Every fold x repeat is trained (in parallel when jobs > 1), then each
    fold's repeats are tested and ensembled in fold order.
    '''
    folds = loso_folds(experiment_manifest(config, manifest))
    seeds = repeat_seeds(seed, n_repeats)
    out_dir = Path(out_dir) if out_dir is not None else None

    tasks = []
    for fold in folds:
        for r, s in enumerate(seeds):
            run_dir = out_dir / f'fold{fold.index:02d}' / f'repeat{r:02d}' if out_dir is not None else None
            tasks.append((config, fold, s, run_dir))

    logger.info('LOSO %s: %d folds x %d repeats, %d jobs', label, len(folds), n_repeats, jobs)
    runs = run_training_tasks(tasks, jobs)

    results = []
    for fold in folds:
        fold_runs = runs[fold.index * n_repeats:(fold.index + 1) * n_repeats]
        summary = aggregate_repeats(config, fold.test, fold_runs)

        results.append(
            FoldResult(
                index=fold.index,
                test_speaker=fold.test_speaker,
                val_speaker=fold.val_speaker,
                seeds=summary.seeds,
                repeat_uars=summary.repeat_uars,
                mean_uar=summary.mean_uar,
                std_uar=summary.std_uar,
                ensemble_uar=summary.ensemble_uar,
                confusion=summary.ensemble_confusion,
                repeat_confusions=summary.repeat_confusions,
                best_epochs=summary.best_epochs,
                epochs_run=summary.epochs_run,
            )
        )

        missing = summary.ensemble_confusion.missing_classes()
        if missing:
            logger.warning('Fold %d test set has no %s utterances; excluded from its UAR', fold.index, missing)

    fingerprint = config_fingerprint(config)
    row = ReportRow(
        label=label,
        fingerprint=fingerprint,
        shared_fingerprint=shared_fingerprint or fingerprint,
        parameter_count=build(config.model, seed=0).parameter_count(),
        config=config.to_dict(),
        folds=results,
        value=value,
    )

    logger.info('LOSO %s: UAR %s, pooled %.4f', label, format_mean_std(row.mean_uar, row.std_uar), row.pooled_uar)

    return EvalReport(axis=LOSO_AXIS, fingerprint=row.shared_fingerprint, rows=[row])


def _run_axis(
    axis: str,
    variants: list[tuple[str, ExperimentConfig, float | None]],
    manifest: CorpusManifest,
    n_repeats: int,
    seed: int,
    jobs: int,
    out_dir,
    notes=(),
) -> EvalReport:
    '''
    Evaluate each variant with identical seeds, and check that the variants
    differ only in the ablated field.
    '''
    ablated = ABLATED_FIELD[axis]
    shared = {config_fingerprint(config, exclude=(ablated,)) for _, config, _ in variants}

    if len(shared) != 1:
        raise ConfigError(f'{axis} harness variants differ outside `{ablated}`')

    shared_fp = shared.pop()
    rows = []
    for label, config, value in variants:
        row_dir = Path(out_dir) / slugify(label) if out_dir is not None else None
        report = run_loso(config, manifest, n_repeats, seed, jobs, row_dir, label, shared_fp, value)
        rows.extend(report.rows)

    return EvalReport(axis=axis, fingerprint=shared_fp, rows=rows, notes=list(notes))


def ablate_parallel_layers(config: ExperimentConfig, manifest, n_repeats: int, seed=0, jobs=1, out_dir=None) -> EvalReport:
    variants = []
    for n in sorted(PARALLEL_BRANCH_SETS):
        widths = parallel_branch_sets(n)
        variants.append((str(n), config.replace(model=config.model.replace(branch_widths_ms=widths)), None))

    notes = ['Branch widths (ms): ' + '; '.join(f'{n}: {parallel_branch_sets(n)}' for n in sorted(PARALLEL_BRANCH_SETS)),
             'The 4-branch set adds a 200 ms filter as an extension']

    return _run_axis(AblationAxis.LAYERS.value, variants, manifest, n_repeats, seed, jobs, out_dir, notes)


def ablate_pooling(config: ExperimentConfig, manifest, n_repeats: int, seed=0, jobs=1, out_dir=None) -> EvalReport:
    variants = [
        (mode.value, config.replace(model=config.model.replace(pool_mode=mode.value)), None)
        for mode in PoolMode
    ]
    notes = ['l2 pooling is the root mean square over each window']

    return _run_axis(AblationAxis.POOLING.value, variants, manifest, n_repeats, seed, jobs, out_dir, notes)


def ablate_block(
    config: ExperimentConfig,
    manifest,
    n_repeats: int,
    seed=0,
    jobs=1,
    out_dir=None,
    width_divisor: int = 1,
) -> EvalReport:
    '''Feature extraction block fixed; only the classification block changes'''
    variants = [
        (kind.value, config.replace(model=config.model.replace(block_spec=build_ablation_block(kind, width_divisor))), None)
        for kind in BlockVariant
    ]
    notes = [f'Block sizes divided by {width_divisor}'] if width_divisor != 1 else []

    return _run_axis(AblationAxis.BLOCK.value, variants, manifest, n_repeats, seed, jobs, out_dir, notes)


def ablate_augmentation(config: ExperimentConfig, manifest, n_repeats: int, seed=0, jobs=1, out_dir=None) -> EvalReport:
    variants = [
        ('with augmentation', config.replace(augment=True), None),
        ('no augmentation', config.replace(augment=False), None),
    ]
    notes = [f'Speed factors: {list(config.speed_factors)}']

    return _run_axis(AblationAxis.AUGMENTATION.value, variants, manifest, n_repeats, seed, jobs, out_dir, notes)


def sweep_input_length(
    config: ExperimentConfig,
    manifest,
    n_repeats: int,
    lengths_s=SWEEP_LENGTHS_S,
    seed=0,
    jobs=1,
    out_dir=None,
) -> EvalReport:
    lengths = sorted(float(length) for length in lengths_s)

    if not lengths or lengths[0] <= 0:
        raise ConfigError(f'Sweep lengths must be positive, got {list(lengths_s)}')

    variants = [
        (f'{length:g} s', config.replace(model=config.model.replace(input_seconds=length)), length)
        for length in lengths
    ]
    report = _run_axis(LENGTH_AXIS, variants, manifest, n_repeats, seed, jobs, out_dir)
    report.notes.append(f'Best input length: {report.best_row.label}')

    return report


def parse_axis(axis: str) -> AblationAxis:
    try:
        return AblationAxis(normalize_str(axis))
    except ValueError:
        raise ConfigError(f'Unknown ablation axis {axis!r}; valid axes: {", ".join(AblationAxis.values)}') from None


def run_axis(axis: str, config: ExperimentConfig, manifest, n_repeats: int, seed=0, jobs=1, out_dir=None,
             width_divisor: int = 1) -> EvalReport:
    axis = parse_axis(axis)

    if axis == AblationAxis.BLOCK:
        return ablate_block(config, manifest, n_repeats, seed, jobs, out_dir, width_divisor)

    harness = {
        AblationAxis.LAYERS: ablate_parallel_layers,
        AblationAxis.POOLING: ablate_pooling,
        AblationAxis.AUGMENTATION: ablate_augmentation,
    }[axis]

    return harness(config, manifest, n_repeats, seed, jobs, out_dir)


# === Formatting ===

def format_mean_std(mean: float, std: float) -> str:
    '''UAR fractions as percent, e.g. 0.6023, 0.032 -> `60.23±3.2`'''
    return f'{100 * mean:.2f}±{100 * std:.1f}'


AXIS_HEADERS = {
    LOSO_AXIS: 'Model',
    AblationAxis.LAYERS.value: 'Parallel layers',
    AblationAxis.POOLING.value: 'Pooling',
    AblationAxis.BLOCK.value: 'Classification block',
    AblationAxis.AUGMENTATION.value: 'Augmentation',
    LENGTH_AXIS: 'Input length',
}


def format_table(report: EvalReport) -> str:
    header = [AXIS_HEADERS.get(report.axis, report.axis), 'UAR (%)', 'Repeat std', 'Pooled', 'Ensemble', 'Params']
    body = [
        [
            row.label,
            format_mean_std(row.mean_uar, row.std_uar),
            f'{100 * row.repeat_std:.1f}',
            f'{100 * row.pooled_uar:.2f}',
            f'{100 * row.ensemble_uar:.2f}',
            str(row.parameter_count),
        ]
        for row in report.rows
    ]

    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]

    def fmt(line):
        return '  '.join(cell.ljust(width) if i == 0 else cell.rjust(width) for i, (cell, width) in enumerate(zip(line, widths))).rstrip()

    lines = [fmt(header), '  '.join('-' * w for w in widths)]
    lines.extend(fmt(line) for line in body)

    for row in report.rows:
        missing = sorted({name for fold in row.folds for name in fold.missing_classes})
        if missing:
            lines.append(f'Note: {row.label}: some test folds had no {", ".join(missing)} utterances (excluded from UAR)')

    lines.extend(f'Note: {note}' for note in report.notes)
    lines.append(f'Config fingerprint: {report.fingerprint}')

    return '\n'.join(lines) + '\n'


def format_fold_table(row: ReportRow) -> str:
    names = class_names(row.folds[0].confusion.n_classes) if row.folds else []
    lines = [f'{"Fold":<6}{"Test":<10}{"Val":<10}{"UAR (%)":>12}{"Ensemble":>10}']

    for fold in row.folds:
        lines.append(
            f'{fold.index:<6}{fold.test_speaker:<10}{fold.val_speaker:<10}'
            f'{format_mean_std(fold.mean_uar, fold.std_uar):>12}{100 * fold.ensemble_uar:>10.2f}'
        )

    lines.append('Pooled confusion (rows true, cols predicted): ' + ', '.join(names))
    for name, counts in zip(names, row.pooled_confusion.tolist()):
        lines.append(f'  {name:<8}' + ' '.join(f'{c:>5}' for c in counts))

    return '\n'.join(lines) + '\n'
