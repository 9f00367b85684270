'''
Model assembly: parallel raw-waveform convolution branches (feature extraction
block) feeding a configurable stack of conv2d / pool2d / lstm / dense layers
(classification block).
'''
from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from rawspeech_app import autograd as ag
from rawspeech_app.audio_io import ms_to_samples
from rawspeech_app.autograd import Tensor, load_arrays, no_grad, save_arrays
from rawspeech_app.constants import (
    BLOCK_VARIANT_MAP,
    DEFAULT_SAMPLE_RATE,
    DESK_FILTERS_PER_BRANCH,
    DESK_INPUT_SECONDS,
    DESK_POOLED_FRAMES,
    DESK_WIDTH_DIVISOR,
    EMOTION_ORDER,
    FULL_BRANCH_STRIDE_MS,
    FULL_BRANCH_WIDTHS_MS,
    FULL_DROPOUT,
    FULL_FILTERS_PER_BRANCH,
    FULL_INPUT_SECONDS,
    FULL_POOLED_FRAMES,
    PARALLEL_BRANCH_SETS,
    POOL_MODE_MAP,
    BlockVariant,
    LayerKind,
    Mode,
    PoolMode,
    normalize_str,
)
from rawspeech_app.exceptions import ConfigError, ShapeError
from rawspeech_app.layers import (
    BatchNormLayer,
    Conv1DLayer,
    Conv2DLayer,
    DenseLayer,
    LstmLayer,
    adaptive_pool1d,
    conv1d_output_length,
    dropout,
    pool2d,
    relu,
    softmax,
)

logger = logging.getLogger(__name__)

MODEL_FORMAT = 1


# === Classification block descriptors ===

TOKEN_RE = re.compile(r'^(conv2d|pool2d|lstm|dense)(?::(\d+)x(\d+))?(?::(\d+))?$')


@dataclass(frozen=True)
class BlockLayer:
    '''
    One classification-block layer. `size` is the filter count (conv2d),
    cell count (lstm) or unit count (dense); `kernel` is the conv filter or
    pool size.
    '''
    kind: str
    size: int = 0
    kernel: tuple[int, int] = (2, 2)

    def __post_init__(self):
        kind = LayerKind(self.kind)
        object.__setattr__(self, 'kind', kind.value)
        object.__setattr__(self, 'kernel', tuple(int(k) for k in self.kernel))

        if kind != LayerKind.POOL2D and self.size < 1:
            raise ConfigError(f'{kind.value} layer needs a positive size, got {self.size}')
        if min(self.kernel) < 1:
            raise ConfigError(f'Kernel sizes must be >= 1, got {self.kernel}')

    @classmethod
    def parse(cls, token: str) -> BlockLayer:
        '''`conv2d:2x2:32`, `pool2d:2x2`, `lstm:128`, `dense:1024`'''
        match = TOKEN_RE.match(normalize_str(token))
        if not match:
            raise ConfigError(
                f'Invalid block layer {token!r}; expected conv2d:HxW:N, pool2d:HxW, lstm:N or dense:N'
            )

        kind, kh, kw, size = match.groups()
        kernel = (int(kh), int(kw)) if kh else (2, 2)

        if kind == LayerKind.POOL2D:
            if size:
                raise ConfigError(f'pool2d takes no size: {token!r}')
            return cls(kind, 0, kernel)

        if not size:
            raise ConfigError(f'{kind} layer needs a size: {token!r}')
        if kind in (LayerKind.LSTM, LayerKind.DENSE) and kh:
            raise ConfigError(f'{kind} layer takes no kernel: {token!r}')

        return cls(kind, int(size), kernel)

    @property
    def token(self) -> str:
        kh, kw = self.kernel
        if self.kind == LayerKind.CONV2D:
            return f'conv2d:{kh}x{kw}:{self.size}'
        if self.kind == LayerKind.POOL2D:
            return f'pool2d:{kh}x{kw}'
        return f'{self.kind}:{self.size}'


def conv2d_layer(n_filters: int, kernel=(2, 2)) -> BlockLayer:
    return BlockLayer(LayerKind.CONV2D, n_filters, kernel)


def pool2d_layer(size=(2, 2)) -> BlockLayer:
    return BlockLayer(LayerKind.POOL2D, 0, size)


def lstm_layer(hidden: int) -> BlockLayer:
    return BlockLayer(LayerKind.LSTM, hidden)


def dense_layer(units: int) -> BlockLayer:
    return BlockLayer(LayerKind.DENSE, units)


def parse_block_spec(tokens) -> tuple[BlockLayer, ...]:
    if isinstance(tokens, str):
        tokens = [t for t in re.split(r'[,\s]+', tokens) if t]
    return tuple(t if isinstance(t, BlockLayer) else BlockLayer.parse(t) for t in tokens)


def validate_block_sequence(block_spec) -> None:
    '''2-D layers only before any lstm/dense; lstm never after dense'''
    seen_lstm = seen_dense = False

    for ind, layer in enumerate(block_spec):
        if layer.kind in (LayerKind.CONV2D, LayerKind.POOL2D) and (seen_lstm or seen_dense):
            raise ConfigError(f'Block layer {ind} ({layer.token}) cannot follow an lstm or dense layer')
        if layer.kind == LayerKind.LSTM and seen_dense:
            raise ConfigError(f'Block layer {ind} ({layer.token}) cannot follow a dense layer')

        seen_lstm = seen_lstm or layer.kind == LayerKind.LSTM
        seen_dense = seen_dense or layer.kind == LayerKind.DENSE


def _scaled(size: int, divisor: int) -> int:
    return max(1, size // divisor)


def build_ablation_block(kind: str, width_divisor: int = 1) -> tuple[BlockLayer, ...]:
    '''
    Classification-block stack for each ablation variant. CNN units are
    conv2d(2x2) + pool2d(2x2) pairs; `width_divisor` shrinks every size for
    desk-scale runs.
    '''
    try:
        variant = BLOCK_VARIANT_MAP[normalize_str(kind)]
    except KeyError:
        allowed = ', '.join(v.value for v in BlockVariant)
        raise ConfigError(f'Unknown block variant {kind!r}; allowed: {allowed}') from None

    if width_divisor < 1:
        raise ConfigError(f'width_divisor must be >= 1, got {width_divisor}')

    def s(size):
        return _scaled(size, width_divisor)

    def cnn_unit(maps):
        return [conv2d_layer(s(maps)), pool2d_layer()]

    stacks = {
        BlockVariant.DNN: [dense_layer(s(1024)), dense_layer(s(512)), dense_layer(s(512))],
        BlockVariant.LSTM: [lstm_layer(s(256)), lstm_layer(s(256))],
        BlockVariant.CNN: cnn_unit(256) * 3,
        BlockVariant.LSTM_DNN: [lstm_layer(s(256)), lstm_layer(s(256)), dense_layer(s(1024))],
        BlockVariant.CNN_DNN: cnn_unit(256) * 2 + [dense_layer(s(1024))],
        BlockVariant.CNN_LSTM: cnn_unit(256) + [lstm_layer(s(256)), lstm_layer(s(256))],
        BlockVariant.CNN_LSTM_DNN: cnn_unit(32) + [lstm_layer(s(128)), dense_layer(s(1024))],
    }

    return tuple(stacks[variant])


def parallel_branch_sets(n: int) -> list[float]:
    '''Branch filter widths (ms) for an n-branch feature extractor'''
    if n not in PARALLEL_BRANCH_SETS:
        raise ValueError(f'Number of parallel layers must be in {sorted(PARALLEL_BRANCH_SETS)}, got {n}')

    return list(PARALLEL_BRANCH_SETS[n])


DEFAULT_BLOCK = build_ablation_block(BlockVariant.CNN_LSTM_DNN)


# === Config ===

@dataclass(frozen=True)
class ModelConfig:
    sample_rate: int = DEFAULT_SAMPLE_RATE
    input_seconds: float = FULL_INPUT_SECONDS
    branch_widths_ms: tuple[float, ...] = tuple(FULL_BRANCH_WIDTHS_MS)
    branch_stride_ms: float = FULL_BRANCH_STRIDE_MS
    filters_per_branch: int = FULL_FILTERS_PER_BRANCH
    pool_mode: str = PoolMode.MAX.value
    pooled_frames: int = FULL_POOLED_FRAMES
    block_spec: tuple[BlockLayer, ...] = DEFAULT_BLOCK
    n_classes: int = len(EMOTION_ORDER)
    dropout: float = FULL_DROPOUT

    def __post_init__(self):
        object.__setattr__(self, 'branch_widths_ms', tuple(float(w) for w in self.branch_widths_ms))
        object.__setattr__(self, 'block_spec', parse_block_spec(self.block_spec))

        try:
            object.__setattr__(self, 'pool_mode', POOL_MODE_MAP[normalize_str(self.pool_mode)].value)
        except KeyError:
            raise ConfigError(f'Unknown pool mode {self.pool_mode!r}; allowed: {PoolMode.values}') from None

        if self.sample_rate <= 0 or self.input_seconds <= 0:
            raise ConfigError('sample_rate and input_seconds must be positive')
        if not self.branch_widths_ms:
            raise ConfigError('At least one branch width is required')
        if any(w <= 0 or w >= self.input_seconds * 1000 for w in self.branch_widths_ms):
            raise ConfigError(
                f'Branch widths must be in (0, {self.input_seconds * 1000:g}) ms, got {list(self.branch_widths_ms)}'
            )
        if self.branch_stride_ms <= 0 or self.stride_samples < 1:
            raise ConfigError(f'Branch stride must be at least one sample, got {self.branch_stride_ms} ms')
        if self.filters_per_branch < 1 or self.pooled_frames < 1:
            raise ConfigError('filters_per_branch and pooled_frames must be >= 1')
        if self.n_classes < 2:
            raise ConfigError(f'n_classes must be >= 2, got {self.n_classes}')
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f'Dropout must be in [0, 1), got {self.dropout}')

        validate_block_sequence(self.block_spec)

    @classmethod
    def desk(cls, **overrides) -> ModelConfig:
        defaults = dict(
            input_seconds=DESK_INPUT_SECONDS,
            filters_per_branch=DESK_FILTERS_PER_BRANCH,
            pooled_frames=DESK_POOLED_FRAMES,
            block_spec=build_ablation_block(BlockVariant.CNN_LSTM_DNN, DESK_WIDTH_DIVISOR),
        )
        defaults.update(overrides)
        return cls(**defaults)

    def replace(self, **changes) -> ModelConfig:
        return replace(self, **changes)

    @property
    def input_samples(self) -> int:
        return int(round(self.input_seconds * self.sample_rate))

    @property
    def branch_widths_samples(self) -> list[int]:
        return [max(1, ms_to_samples(w, self.sample_rate)) for w in self.branch_widths_ms]

    @property
    def stride_samples(self) -> int:
        return ms_to_samples(self.branch_stride_ms, self.sample_rate)

    @property
    def n_channels(self) -> int:
        return len(self.branch_widths_ms) * self.filters_per_branch

    def to_dict(self) -> dict:
        data = asdict(self)
        data['branch_widths_ms'] = list(self.branch_widths_ms)
        data['block_spec'] = [layer.token for layer in self.block_spec]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        return cls(**data)


# === Model ===

@dataclass
class Branch:
    conv: Conv1DLayer
    bn: BatchNormLayer


@dataclass
class BlockUnit:
    spec: BlockLayer
    layer: Conv2DLayer | LstmLayer | DenseLayer | None = None
    bn: BatchNormLayer | None = None


@dataclass
class Model:
    config: ModelConfig
    branches: list[Branch]
    block: list[BlockUnit]
    output: DenseLayer
    seed: int = 0
    _registry: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def parameters(self) -> dict[str, Tensor]:
        if not self._registry:
            registry = {}
            for ind, branch in enumerate(self.branches):
                for name, p in branch.conv.parameters().items():
                    registry[f'branch{ind}.conv.{name}'] = p
                for name, p in branch.bn.parameters().items():
                    registry[f'branch{ind}.bn.{name}'] = p

            for ind, unit in enumerate(self.block):
                if unit.layer is not None:
                    for name, p in unit.layer.parameters().items():
                        registry[f'block{ind}.{unit.spec.kind}.{name}'] = p
                if unit.bn is not None:
                    for name, p in unit.bn.parameters().items():
                        registry[f'block{ind}.bn.{name}'] = p

            for name, p in self.output.parameters().items():
                registry[f'output.{name}'] = p

            self._registry = registry

        return self._registry

    def buffers(self) -> dict[str, np.ndarray]:
        '''Batch-norm running statistics (state, not trained)'''
        out = {}
        for ind, branch in enumerate(self.branches):
            for name, buf in branch.bn.buffers().items():
                out[f'branch{ind}.bn.{name}'] = buf
        for ind, unit in enumerate(self.block):
            if unit.bn is not None:
                for name, buf in unit.bn.buffers().items():
                    out[f'block{ind}.bn.{name}'] = buf
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        '''Copy of every parameter and buffer, for checkpoints'''
        arrays = {name: p.data.copy() for name, p in self.parameters().items()}
        arrays.update({f'buffer:{name}': buf.copy() for name, buf in self.buffers().items()})
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        buffers = self.buffers()
        expected = set(params) | {f'buffer:{name}' for name in buffers}

        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise ConfigError(f'Checkpoint does not match model config (missing {missing}, unexpected {extra})')

        for name, value in arrays.items():
            target = buffers[name[len('buffer:'):]] if name.startswith('buffer:') else params[name].data
            if target.shape != value.shape:
                raise ConfigError(f'Checkpoint shape mismatch for {name}: {value.shape} vs {target.shape}')
            target[...] = value


def branch_output_lengths(config: ModelConfig) -> list[int]:
    return [
        conv1d_output_length(config.input_samples, width, config.stride_samples)
        for width in config.branch_widths_samples
    ]


def infer_block_shapes(config: ModelConfig) -> list[tuple[int, ...]]:
    '''
    Per-sample output shape after each block layer, starting from the
    [1 x F x C] feature plane. Raises ConfigError when a layer cannot fit.
    '''
    for width, length in zip(config.branch_widths_samples, branch_output_lengths(config)):
        if length < config.pooled_frames:
            raise ConfigError(
                f'Branch of width {width} samples yields {length} frames, fewer than pooled_frames={config.pooled_frames}'
            )

    shape: tuple[int, ...] = (1, config.pooled_frames, config.n_channels)
    shapes = []

    for ind, layer in enumerate(config.block_spec):
        kh, kw = layer.kernel

        if layer.kind == LayerKind.CONV2D:
            channels, height, width = shape
            if height < kh or width < kw:
                raise ConfigError(f'Block layer {ind} ({layer.token}) does not fit a {height}x{width} map')
            shape = (layer.size, height - kh + 1, width - kw + 1)
        elif layer.kind == LayerKind.POOL2D:
            channels, height, width = shape
            if height < kh or width < kw:
                raise ConfigError(f'Block layer {ind} ({layer.token}) does not fit a {height}x{width} map')
            shape = (channels, height // kh, width // kw)
        elif layer.kind == LayerKind.LSTM:
            steps = shape[1] if len(shape) == 3 else shape[0]
            shape = (steps, layer.size)
        else:
            shape = (layer.size,)

        shapes.append(shape)

    return shapes


def _flat_size(shape: tuple[int, ...]) -> int:
    '''Input width seen by the next lstm (per step) or dense layer'''
    if len(shape) == 3:
        channels, _, width = shape
        return channels * width
    return shape[-1]


def build(config: ModelConfig, seed: int = 0) -> Model:
    '''He-initialized model; identical (config, seed) gives identical parameters'''
    shapes = infer_block_shapes(config)
    rng = np.random.default_rng(seed)

    branches = [
        Branch(
            conv=Conv1DLayer(config.filters_per_branch, width, config.stride_samples, rng=rng),
            bn=BatchNormLayer(config.filters_per_branch),
        )
        for width in config.branch_widths_samples
    ]

    block: list[BlockUnit] = []
    shape: tuple[int, ...] = (1, config.pooled_frames, config.n_channels)

    for layer, out_shape in zip(config.block_spec, shapes):
        if layer.kind == LayerKind.CONV2D:
            unit = BlockUnit(
                layer,
                Conv2DLayer(shape[0], layer.size, layer.kernel, rng=rng),
                BatchNormLayer(layer.size),
            )
        elif layer.kind == LayerKind.LSTM:
            unit = BlockUnit(layer, LstmLayer(_flat_size(shape), layer.size, rng=rng))
        elif layer.kind == LayerKind.DENSE:
            in_features = int(np.prod(shape)) if len(shape) == 3 else shape[-1]
            unit = BlockUnit(layer, DenseLayer(in_features, layer.size, rng=rng))
        else:
            unit = BlockUnit(layer)

        block.append(unit)
        shape = out_shape

    in_features = int(np.prod(shape)) if len(shape) == 3 else shape[-1]
    output = DenseLayer(in_features, config.n_classes, rng=rng)

    model = Model(config=config, branches=branches, block=block, output=output, seed=seed)
    logger.debug('Built model: %d parameters, block %s', model.parameter_count(), [l.token for l in config.block_spec])

    return model


# === Forward ===

def feature_map(model: Model, x: Tensor, mode: str) -> Tensor:
    '''Parallel branches, each conv1d -> BN -> ReLU -> adaptive pool, concatenated to [batch x F x C]'''
    config = model.config
    pooled = []

    for branch in model.branches:
        y = branch.conv(x)
        y = relu(branch.bn(y, mode))
        pooled.append(adaptive_pool1d(y, config.pool_mode, config.pooled_frames))

    return ag.concat(pooled, axis=1).transpose(0, 2, 1)


def _map_to_sequence(x: Tensor) -> Tensor:
    # [B, C, H, W] -> one step per row H, flattened across width x channels
    batch, channels, height, width = x.shape
    return x.transpose(0, 2, 3, 1).reshape(batch, height, width * channels)


def _to_vector(x: Tensor, mode: str, rate: float, rng) -> Tensor:
    '''Sequence -> last hidden state, map -> flattened; dropout applied here'''
    if x.ndim == 3:
        x = x[:, -1, :]
    elif x.ndim == 4:
        x = x.reshape(x.shape[0], -1)

    return dropout(x, rate, mode, rng)


def forward(model: Model, batch, mode: str = Mode.EVAL, rng: np.random.Generator | None = None) -> Tensor:
    '''Raw waveforms [batch x T] -> logits [batch x n_classes]'''
    config = model.config
    x = ag.as_tensor(batch)
    mode = Mode(mode)

    if x.ndim != 2 or x.shape[1] != config.input_samples:
        raise ShapeError(f'Expected [batch x {config.input_samples}] waveforms', x.shape)

    features = feature_map(model, x, mode)
    h = features.reshape(x.shape[0], 1, config.pooled_frames, config.n_channels)

    for unit in model.block:
        kind = unit.spec.kind

        if kind == LayerKind.CONV2D:
            h = relu(unit.bn(unit.layer(h), mode))
        elif kind == LayerKind.POOL2D:
            h = pool2d(h, unit.spec.kernel)
        elif kind == LayerKind.LSTM:
            if h.ndim == 4:
                h = _map_to_sequence(h)
            h = unit.layer(h)
        else:
            if h.ndim != 2:
                h = _to_vector(h, mode, config.dropout, rng)
            h = relu(unit.layer(h))

    if h.ndim != 2:
        h = _to_vector(h, mode, config.dropout, rng)

    return model.output(h)


def predict_proba(models, batch) -> np.ndarray:
    '''Eval-mode class probabilities, averaged over one or more models'''
    models = [models] if isinstance(models, Model) else list(models)
    if not models:
        raise ValueError('predict_proba needs at least one model')

    with no_grad():
        probs = [softmax(forward(model, batch, Mode.EVAL).data) for model in models]

    return np.mean(probs, axis=0)


# === Checkpoints ===

def save_model(model: Model, path: str | Path) -> Path:
    meta = {'format': MODEL_FORMAT, 'config': model.config.to_dict(), 'seed': model.seed}
    return save_arrays(path, model.state(), meta)


def load_model(path: str | Path) -> Model:
    arrays, meta = load_arrays(path)

    if meta.get('format') != MODEL_FORMAT or 'config' not in meta:
        raise ConfigError(f'{path} is not a model checkpoint')

    model = build(ModelConfig.from_dict(meta['config']), seed=int(meta.get('seed', 0)))
    model.load_state(arrays)

    return model
