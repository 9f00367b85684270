'''
RMSProp training with the UAR-driven learning-rate schedule, early stopping,
best-epoch checkpointing and multi-repeat aggregation.

This module is imported by pool workers, so it must stay free of Django
settings and DRF.
'''
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from rawspeech_app import autograd as ag
from rawspeech_app.audio_io import Waveform, prepare_waveform, read_wav
from rawspeech_app.autograd import Tensor
from rawspeech_app.constants import (
    BATCH_SIZE,
    FULL_HALVE_PATIENCE,
    FULL_LEARNING_RATE,
    FULL_SPEED_FACTORS,
    FULL_STOP_PATIENCE,
    GRAD_CLIP_NORM,
    IMPROVEMENT_EPS,
    MAX_EPOCHS,
    RMSPROP_EPS,
    RMSPROP_RHO,
    TRIM_FRAME_MS,
    TRIM_THRESHOLD_DB,
    Decision,
    Mode,
)
from rawspeech_app.corpus import CorpusManifest, LosoFold
from rawspeech_app.exceptions import ConfigError, DivergenceError, FoldError, NonFiniteError, ShapeError
from rawspeech_app.layers import softmax_cross_entropy
from rawspeech_app.metrics import ConfusionMatrix, confusion_matrix, uar
from rawspeech_app.model import Model, ModelConfig, build, forward, predict_proba, save_model

logger = logging.getLogger(__name__)

EVAL_CHUNK = 64


# === Configs ===

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = FULL_LEARNING_RATE
    batch_size: int = BATCH_SIZE
    max_epochs: int = MAX_EPOCHS
    halve_patience: int = FULL_HALVE_PATIENCE
    stop_patience: int = FULL_STOP_PATIENCE
    grad_clip: float = GRAD_CLIP_NORM
    trim_threshold_db: float = TRIM_THRESHOLD_DB
    trim_frame_ms: float = TRIM_FRAME_MS

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f'learning_rate must be positive, got {self.learning_rate}')
        if self.batch_size < 2:
            raise ConfigError(f'batch_size must be >= 2 (batch norm), got {self.batch_size}')
        if self.max_epochs < 1 or self.halve_patience < 1 or self.stop_patience < 1:
            raise ConfigError('max_epochs and patiences must be >= 1')
        if self.grad_clip <= 0:
            raise ConfigError(f'grad_clip must be positive, got {self.grad_clip}')


@dataclass(frozen=True)
class ExperimentConfig:
    '''Everything that affects the numbers of one LOSO experiment'''
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: bool = True
    speed_factors: tuple[float, ...] = tuple(FULL_SPEED_FACTORS)

    def __post_init__(self):
        object.__setattr__(self, 'speed_factors', tuple(float(f) for f in self.speed_factors))

        if self.augment and not self.speed_factors:
            raise ConfigError('Augmentation is enabled but no speed factors are configured')
        if any(f <= 0 for f in self.speed_factors):
            raise ConfigError(f'Speed factors must be positive, got {list(self.speed_factors)}')

    def replace(self, **changes) -> ExperimentConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            'model': self.model.to_dict(),
            'train': asdict(self.train),
            'augment': self.augment,
            'speed_factors': list(self.speed_factors),
        }


# === Optimizer ===

@dataclass
class OptimizerState:
    learning_rate: float
    rho: float = RMSPROP_RHO
    eps: float = RMSPROP_EPS
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f'learning_rate must be positive, got {self.learning_rate}')


def rmsprop_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    '''
    acc <- rho * acc + (1 - rho) * g^2
    p   <- p - lr * g / (sqrt(acc) + eps)
    '''
    for name, grad in grads.items():
        if name not in params:
            raise KeyError(f'Gradient for unknown parameter {name!r}')
        if grad.shape != params[name].shape:
            raise ShapeError(f'Gradient shape mismatch for {name}', params[name].shape, grad.shape)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f'Non-finite gradient for {name}')

    for name, grad in grads.items():
        acc = state.accumulators.get(name)
        if acc is None:
            acc = state.accumulators[name] = np.zeros_like(grad)

        acc *= state.rho
        acc += (1 - state.rho) * grad * grad

        params[name].data -= state.learning_rate * grad / (np.sqrt(acc) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float, bool]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))

    if norm <= max_norm:
        return grads, norm, False

    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm, True


# === Schedule ===

@dataclass(frozen=True)
class ScheduleState:
    best_val_uar: float | None = None
    epochs_since_improvement: int = 0
    halvings_applied: int = 0
    stopped: bool = False


def schedule_update(
    state: ScheduleState,
    epoch_val_uar: float,
    halve_patience: int = FULL_HALVE_PATIENCE,
    stop_patience: int = FULL_STOP_PATIENCE,
) -> tuple[ScheduleState, Decision]:
    '''
    Next state and decision for one epoch's validation UAR. The first epoch sets
    the baseline and counts as non-improving. After that an improvement
    (uar > best + 1e-6) resets the counter; otherwise the counter reaching
    `stop_patience` stops and every multiple of `halve_patience` halves.
    '''
    if not 0.0 <= epoch_val_uar <= 1.0:
        raise ValueError(f'UAR must be in [0, 1], got {epoch_val_uar}')

    if state.stopped:
        return state, Decision.STOP

    if state.best_val_uar is None:
        state = replace(state, best_val_uar=epoch_val_uar)
    elif epoch_val_uar > state.best_val_uar + IMPROVEMENT_EPS:
        return replace(state, best_val_uar=epoch_val_uar, epochs_since_improvement=0), Decision.CONTINUE

    counter = state.epochs_since_improvement + 1

    if counter >= stop_patience:
        return replace(state, epochs_since_improvement=counter, stopped=True), Decision.STOP

    if counter % halve_patience == 0:
        return replace(state, epochs_since_improvement=counter, halvings_applied=state.halvings_applied + 1), Decision.HALVE

    return replace(state, epochs_since_improvement=counter), Decision.CONTINUE


def scheduled_learning_rate(initial: float, halvings: int) -> float:
    return initial * 0.5 ** halvings


# === Data ===

@lru_cache(maxsize=4096)
def _cached_wav(path: str, mtime_ns: int) -> Waveform:
    return read_wav(path)


def read_cached(path: Path) -> Waveform:
    # mtime in the key so a regenerated corpus at the same path is re-read
    try:
        mtime_ns = path.stat().st_mtime_ns
    except OSError:
        mtime_ns = -1
    return _cached_wav(str(path), mtime_ns)


def load_partition(manifest: CorpusManifest, config: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    '''Model-ready windows [N x T] and class indices [N], in manifest order'''
    model_config = config.model
    windows = np.empty((len(manifest), model_config.input_samples))
    labels = np.empty(len(manifest), dtype=np.int64)

    for ind, record in enumerate(manifest.records):
        wav = read_cached(manifest.audio_path(record))

        if wav.sample_rate != model_config.sample_rate:
            raise ConfigError(
                f'{record.path} is sampled at {wav.sample_rate} Hz, model expects {model_config.sample_rate} Hz'
            )

        windows[ind] = prepare_waveform(
            wav,
            model_config.input_seconds,
            speed_factor=record.speed_factor,
            threshold_db=config.train.trim_threshold_db,
            frame_ms=config.train.trim_frame_ms,
        )
        labels[ind] = record.label_index

    return windows, labels


def make_batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    '''Consecutive chunks; a trailing single-item chunk joins the previous one (batch norm needs 2)'''
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]

    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])

    return batches


def predict_in_chunks(models, windows: np.ndarray, chunk: int = EVAL_CHUNK) -> np.ndarray:
    '''Ensemble eval-mode probabilities [N x n_classes]'''
    return np.concatenate([predict_proba(models, windows[i:i + chunk]) for i in range(0, len(windows), chunk)])


# === Training ===

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_uar: float
    val_uar: float
    learning_rate: float
    decision: str
    clipped: int


@dataclass
class TrainRunResult:
    seed: int
    model_config: ModelConfig
    history: list[EpochRecord]
    best_epoch: int
    best_val_uar: float
    checkpoint: dict[str, np.ndarray]
    final_state: dict[str, np.ndarray]
    schedule: ScheduleState

    def best_model(self) -> Model:
        model = build(self.model_config, seed=self.seed)
        model.load_state(self.checkpoint)
        return model


def _epoch_loop(
    model: Model,
    config: ExperimentConfig,
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray],
    shuffle_rng: np.random.Generator,
    dropout_rng: np.random.Generator,
    log_path: Path | None = None,
) -> tuple[list[EpochRecord], int, float, dict, ScheduleState]:
    tc = config.train
    n_classes = model.config.n_classes
    x_train, y_train = train_data
    x_val, y_val = val_data

    params = model.parameters()
    optimizer = OptimizerState(learning_rate=tc.learning_rate)
    schedule = ScheduleState()

    history: list[EpochRecord] = []
    best_epoch, best_uar, best_state = 0, -np.inf, model.state()

    log_file = log_path.open('w', encoding='utf-8') if log_path else None

    try:
        for epoch in range(1, tc.max_epochs + 1):
            order = shuffle_rng.permutation(len(x_train))
            total_loss, clipped = 0.0, 0
            predictions = np.empty(len(x_train), dtype=np.int64)

            for batch in make_batches(order, tc.batch_size):
                model.zero_grad()

                try:
                    logits = forward(model, x_train[batch], Mode.TRAIN, rng=dropout_rng)
                    loss = softmax_cross_entropy(logits, y_train[batch])
                    ag.backward(loss)
                except NonFiniteError as exc:
                    raise DivergenceError(f'Training diverged at epoch {epoch}: {exc}') from exc

                grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in params.items()}
                grads, norm, was_clipped = clip_gradients(grads, tc.grad_clip)
                if was_clipped:
                    clipped += 1
                    logger.info('Epoch %d: gradient norm %.3f clipped to %.1f', epoch, norm, tc.grad_clip)

                rmsprop_step(params, grads, optimizer)

                total_loss += loss.item() * len(batch)
                predictions[batch] = np.argmax(logits.data, axis=1)

            train_uar = uar(confusion_matrix(y_train, predictions, n_classes))
            val_pred = np.argmax(predict_in_chunks(model, x_val), axis=1)
            val_uar = uar(confusion_matrix(y_val, val_pred, n_classes))

            lr_used = optimizer.learning_rate
            schedule, decision = schedule_update(schedule, val_uar, tc.halve_patience, tc.stop_patience)

            if val_uar > best_uar:
                best_epoch, best_uar, best_state = epoch, val_uar, model.state()

            if decision == Decision.HALVE:
                optimizer.learning_rate = scheduled_learning_rate(tc.learning_rate, schedule.halvings_applied)
                logger.info('Epoch %d: no improvement for %d epochs, learning rate -> %g',
                            epoch, schedule.epochs_since_improvement, optimizer.learning_rate)

            record = EpochRecord(
                epoch=epoch,
                train_loss=total_loss / len(x_train),
                train_uar=train_uar,
                val_uar=val_uar,
                learning_rate=lr_used,
                decision=decision.value,
                clipped=clipped,
            )
            history.append(record)

            if log_file:
                log_file.write(json.dumps(asdict(record), sort_keys=True) + '\n')

            logger.debug('Epoch %d: loss %.4f train UAR %.4f val UAR %.4f', epoch, record.train_loss, train_uar, val_uar)

            if decision == Decision.STOP:
                logger.info('Early stop at epoch %d (best val UAR %.4f at epoch %d)', epoch, best_uar, best_epoch)
                break
    finally:
        if log_file:
            log_file.close()

    return history, best_epoch, float(best_uar), best_state, schedule


def train_fold(
    config: ExperimentConfig,
    fold: LosoFold,
    seed: int,
    run_dir: str | Path | None = None,
) -> TrainRunResult:
    '''
    Train on fold.train, select on fold.val. The test partition is never loaded
    here. Deterministic for a fixed (config, fold, seed).
    '''
    if len(fold.train) < 2 or len(fold.val) == 0:
        raise FoldError(f'Fold {fold.index} needs >= 2 train and >= 1 val utterances')

    train_data = load_partition(fold.train, config)
    val_data = load_partition(fold.val, config)

    init_seq, shuffle_seq, dropout_seq = np.random.SeedSequence(seed).spawn(3)
    model = build(config.model, seed=int(init_seq.generate_state(1)[0]))

    log_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / 'train_log.jsonl'

    history, best_epoch, best_uar, best_state, schedule = _epoch_loop(
        model,
        config,
        train_data,
        val_data,
        np.random.default_rng(shuffle_seq),
        np.random.default_rng(dropout_seq),
        log_path,
    )

    result = TrainRunResult(
        seed=seed,
        model_config=config.model,
        history=history,
        best_epoch=best_epoch,
        best_val_uar=best_uar,
        checkpoint=best_state,
        final_state=model.state(),
        schedule=schedule,
    )

    if run_dir is not None:
        write_checkpoint(result, run_dir)

    logger.info('Fold %d seed %d: %d epochs, best val UAR %.4f (epoch %d)',
                fold.index, seed, len(history), best_uar, best_epoch)

    return result


def write_checkpoint(result: TrainRunResult, run_dir: Path) -> None:
    save_model(result.best_model(), run_dir / 'checkpoint.npz')

    summary = {
        'seed': result.seed,
        'best_epoch': result.best_epoch,
        'best_val_uar': result.best_val_uar,
        'schedule': asdict(result.schedule),
        'history': [asdict(record) for record in result.history],
    }
    (run_dir / 'checkpoint.json').write_text(json.dumps(summary, indent=2, sort_keys=True) + '\n', encoding='utf-8')


def run_training_tasks(tasks: list[tuple], jobs: int = 1) -> list[TrainRunResult]:
    '''
    Run `train_fold(*task)` for every task. Results come back in task order
    whatever the job count.
    '''
    if jobs <= 1 or len(tasks) <= 1:
        return [train_fold(*task) for task in tasks]

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(train_fold, *task) for task in tasks]
        return [future.result() for future in futures]


# === Repeats ===

@dataclass
class RepeatSummary:
    seeds: list[int]
    repeat_uars: list[float]
    mean_uar: float
    std_uar: float
    ensemble_uar: float
    ensemble_confusion: ConfusionMatrix
    repeat_confusions: list[ConfusionMatrix]
    best_epochs: list[int]
    epochs_run: list[int]


def sample_std(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(np.std(values, ddof=1)) if values.size > 1 else 0.0


def aggregate_repeats(config: ExperimentConfig, test: CorpusManifest, runs: list[TrainRunResult]) -> RepeatSummary:
    '''
    Test every repeat's best checkpoint; also score the averaged softmax
    probabilities of all repeats as one ensemble.
    '''
    if not runs:
        raise ValueError('At least one training run is required')

    n_classes = config.model.n_classes
    x_test, y_test = load_partition(test, config)

    probs = []
    confusions = []
    for run in runs:
        p = predict_in_chunks(run.best_model(), x_test)
        probs.append(p)
        confusions.append(confusion_matrix(y_test, np.argmax(p, axis=1), n_classes))

    repeat_uars = [uar(cm) for cm in confusions]
    ensemble_cm = confusion_matrix(y_test, np.argmax(np.mean(probs, axis=0), axis=1), n_classes)

    return RepeatSummary(
        seeds=[run.seed for run in runs],
        repeat_uars=repeat_uars,
        mean_uar=float(np.mean(repeat_uars)),
        std_uar=sample_std(repeat_uars),
        ensemble_uar=uar(ensemble_cm),
        ensemble_confusion=ensemble_cm,
        repeat_confusions=confusions,
        best_epochs=[run.best_epoch for run in runs],
        epochs_run=[len(run.history) for run in runs],
    )


def repeat_seeds(seed: int, n_repeats: int) -> list[int]:
    if n_repeats < 1:
        raise ValueError(f'n_repeats must be >= 1, got {n_repeats}')
    return [seed + r for r in range(n_repeats)]


def repeat_and_aggregate(
    config: ExperimentConfig,
    fold: LosoFold,
    n_repeats: int = 10,
    seed: int = 0,
    jobs: int = 1,
    run_dir: str | Path | None = None,
    seeds: list[int] | None = None,
) -> RepeatSummary:
    '''Train with seeds seed..seed+n-1 (or explicit `seeds`) and aggregate on fold.test'''
    seeds = list(seeds) if seeds is not None else repeat_seeds(seed, n_repeats)

    tasks = [
        (config, fold, s, Path(run_dir) / f'repeat{r:02d}' if run_dir is not None else None)
        for r, s in enumerate(seeds)
    ]

    return aggregate_repeats(config, fold.test, run_training_tasks(tasks, jobs))
