'''
Finite-difference verification of every differentiable component, from
single primitives up to the end-to-end model.
'''
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from rawspeech_app import autograd as ag
from rawspeech_app import layers
from rawspeech_app.autograd import Tensor, grad_check_report
from rawspeech_app.constants import GRADCHECK_STEP, GRADCHECK_TOLERANCE, Mode
from rawspeech_app.model import ModelConfig, build, forward

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = tuple(range(10))
# Probed coordinates per seed for large inputs
MAX_COORDS = 24

# A case is (scalar function of x, x, coordinates to probe or None for all)
Case = tuple[Callable[[Tensor], Tensor], Tensor, list[int] | None]


@dataclass
class ComponentResult:
    name: str
    max_error: float
    checked: int
    skipped: int
    seeds: int
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_error < self.tolerance


def _weights(rng, shape) -> Tensor:
    # Random projection to a scalar so no coordinate gets a trivial gradient
    return Tensor(rng.normal(size=shape))


def _project(out: Tensor, weights: Tensor) -> Tensor:
    return (out * weights).sum()


def _coords(rng, size: int) -> list[int] | None:
    if size <= MAX_COORDS:
        return None
    return sorted(rng.choice(size, MAX_COORDS, replace=False).tolist())


# === Cases ===

def case_elementwise(rng) -> Case:
    x = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4,)))
    w = _weights(rng, (3, 4))

    def f(x):
        y = ag.sigmoid(x) * ag.tanh(x + b) - ag.exp(0.3 * x) / (ag.square(x) + 2.0)
        y = y + ag.log(ag.square(x) + 1.0) - ag.sqrt(ag.square(x) + 1.0) + (-x)
        return _project(y, w)

    return f, x, None


def case_matmul(rng) -> Case:
    x = Tensor(rng.normal(size=(3, 4)))
    m = Tensor(rng.normal(size=(4, 2)))
    w = _weights(rng, (3, 2))
    return (lambda x: _project(x @ m, w)), x, None


def case_shape_ops(rng) -> Case:
    x = Tensor(rng.normal(size=(2, 3, 4)))
    other = Tensor(rng.normal(size=(2, 3, 2)))
    w = _weights(rng, (3, 2, 6))

    def f(x):
        y = ag.concat([x, other], axis=2).transpose(1, 0, 2)
        y = ag.stack([y[:, :, :6], ag.broadcast_to(y[:, :1, :6], (3, 2, 6))], axis=0).sum(axis=0)
        return _project(y.reshape(3, 2, 6), w)

    return f, x, None


def case_reductions(rng) -> Case:
    x = Tensor(rng.normal(size=(3, 5)))
    w = _weights(rng, (3,))

    def f(x):
        return _project(x.max(axis=1) + x.mean(axis=1) * 2.0, w) + x.sum(axis=0).sum()

    return f, x, None


def case_conv1d(rng) -> Case:
    x = Tensor(rng.normal(size=(2, 20)))
    conv = layers.Conv1DLayer(3, 5, 3, rng=rng)
    w = _weights(rng, (2, 3, 6))
    return (lambda x: _project(conv(x), w)), x, None


def _case_pool(mode) -> Callable:
    def case(rng) -> Case:
        x = Tensor(rng.normal(size=(2, 3, 10)))
        w = _weights(rng, (2, 3, 3))
        return (lambda x: _project(layers.adaptive_pool1d(x, mode, 3), w)), x, None
    return case


def case_pool1d_strided(rng) -> Case:
    x = Tensor(rng.normal(size=(2, 2, 9)))
    w = _weights(rng, (2, 2, 4))
    return (lambda x: _project(layers.pool1d(x, 'max', 3, 2), w)), x, None


def case_batchnorm(rng) -> Case:
    x = Tensor(rng.normal(size=(4, 3, 5)))
    bn = layers.BatchNormLayer(3)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = rng.normal(size=3)
    w = _weights(rng, (4, 3, 5))
    return (lambda x: _project(bn(x, Mode.TRAIN), w)), x, None


def case_branch(rng) -> Case:
    '''conv1d -> BN -> ReLU -> adaptive max pool'''
    x = Tensor(rng.normal(size=(2, 40)))
    conv = layers.Conv1DLayer(3, 6, 2, rng=rng)
    bn = layers.BatchNormLayer(3)
    w = _weights(rng, (2, 3, 4))

    def f(x):
        y = layers.relu(bn(conv(x), Mode.TRAIN))
        return _project(layers.adaptive_pool1d(y, 'max', 4), w)

    return f, x, _coords(rng, x.size)


def case_conv2d(rng) -> Case:
    x = Tensor(rng.normal(size=(2, 2, 4, 5)))
    conv = layers.Conv2DLayer(2, 3, (2, 2), rng=rng)
    w = _weights(rng, (2, 3, 3, 4))
    return (lambda x: _project(conv(x), w)), x, None


def case_pool2d(rng) -> Case:
    x = Tensor(rng.normal(size=(2, 2, 5, 4)))
    w = _weights(rng, (2, 2, 2, 2))
    return (lambda x: _project(layers.pool2d(x, (2, 2)), w)), x, None


def case_lstm(rng) -> Case:
    x = Tensor(rng.normal(size=(2, 3, 2)))
    lstm = layers.LstmLayer(2, 2, rng=rng)
    w = _weights(rng, (2, 3, 2))
    return (lambda x: _project(lstm(x), w)), x, None


def case_dense_dropout(rng) -> Case:
    x = Tensor(rng.normal(size=(3, 5)))
    dense = layers.DenseLayer(5, 4, rng=rng)
    w = _weights(rng, (3, 4))
    mask_seed = int(rng.integers(2 ** 31))

    def f(x):
        y = layers.dropout(x, 0.3, Mode.TRAIN, np.random.default_rng(mask_seed))
        return _project(layers.relu(dense(y)), w)

    return f, x, None


def case_softmax_ce(rng) -> Case:
    x = Tensor(rng.normal(scale=2.0, size=(5, 4)))
    labels = rng.integers(0, 4, 5)
    return (lambda x: layers.softmax_cross_entropy(x, labels)), x, None


def case_block_chain(rng) -> Case:
    '''conv2d -> pool2d -> LSTM -> dense -> loss'''
    x = Tensor(rng.normal(size=(2, 1, 5, 6)))
    conv = layers.Conv2DLayer(1, 2, (2, 2), rng=rng)
    lstm = layers.LstmLayer(2 * 2, 3, rng=rng)
    dense = layers.DenseLayer(3, 4, rng=rng)
    labels = rng.integers(0, 4, 2)

    def f(x):
        h = layers.pool2d(conv(x), (2, 2))
        b, c, rows, cols = h.shape
        seq = lstm(h.transpose(0, 2, 3, 1).reshape(b, rows, cols * c))
        return layers.softmax_cross_entropy(dense(seq[:, -1, :]), labels)

    return f, x, None


def tiny_model_config() -> ModelConfig:
    '''2 branches x 2 filters, F=8, 0.25 s input'''
    return ModelConfig(
        input_seconds=0.25,
        branch_widths_ms=(25.0, 100.0),
        filters_per_branch=2,
        pooled_frames=8,
        block_spec=('conv2d:2x2:2', 'pool2d:2x2', 'lstm:3', 'dense:4'),
    )


def _tiny_model_case(rng, wrt_input: bool) -> Case:
    config = tiny_model_config()
    model = build(config, seed=int(rng.integers(2 ** 31)))
    batch = Tensor(rng.normal(scale=0.3, size=(2, config.input_samples)))
    labels = rng.integers(0, config.n_classes, 2)
    dropout_seed = int(rng.integers(2 ** 31))

    def loss(x_batch):
        logits = forward(model, x_batch, Mode.TRAIN, rng=np.random.default_rng(dropout_seed))
        return layers.softmax_cross_entropy(logits, labels)

    if wrt_input:
        return loss, batch, _coords(rng, batch.size)

    params = model.parameters()
    names = sorted(params)
    target = params[names[int(rng.integers(len(names)))]]

    return (lambda _: loss(batch)), target, _coords(rng, target.size)


def case_end_to_end(rng) -> Case:
    return _tiny_model_case(rng, wrt_input=True)


def case_end_to_end_params(rng) -> Case:
    return _tiny_model_case(rng, wrt_input=False)


COMPONENTS: dict[str, Callable[[np.random.Generator], Case]] = {
    'elementwise': case_elementwise,
    'matmul': case_matmul,
    'shape-ops': case_shape_ops,
    'reductions': case_reductions,
    'conv1d': case_conv1d,
    'pool1d-max': _case_pool('max'),
    'pool1d-l2': _case_pool('l2'),
    'pool1d-average': _case_pool('average'),
    'pool1d-strided': case_pool1d_strided,
    'batchnorm': case_batchnorm,
    'conv1d-bn-relu-pool': case_branch,
    'conv2d': case_conv2d,
    'pool2d': case_pool2d,
    'lstm': case_lstm,
    'dense-dropout': case_dense_dropout,
    'softmax-cross-entropy': case_softmax_ce,
    'conv2d-pool-lstm-dense-loss': case_block_chain,
    'end-to-end-input': case_end_to_end,
    'end-to-end-params': case_end_to_end_params,
}


def check_component(name: str, seeds=DEFAULT_SEEDS, step: float = GRADCHECK_STEP,
                    tolerance: float = GRADCHECK_TOLERANCE) -> ComponentResult:
    seeds = tuple(seeds)
    case = COMPONENTS[name]
    max_error, checked, skipped = 0.0, 0, 0

    for seed in seeds:
        f, x, coords = case(np.random.default_rng(seed))
        report = grad_check_report(f, x, step=step, coords=coords)

        max_error = max(max_error, report.max_error)
        checked += report.checked
        skipped += report.skipped

    result = ComponentResult(name, max_error, checked, skipped, len(seeds), tolerance)
    logger.debug('Gradient check %s: max error %.3e (%d checked, %d skipped)', name, max_error, checked, skipped)

    return result


def run_suite(components=None, seeds=DEFAULT_SEEDS, step: float = GRADCHECK_STEP,
              tolerance: float = GRADCHECK_TOLERANCE) -> list[ComponentResult]:
    names = list(COMPONENTS) if components is None else list(components)
    seeds = tuple(seeds)

    unknown = [name for name in names if name not in COMPONENTS]
    if unknown:
        raise ValueError(f'Unknown gradient-check components: {unknown}')

    return [check_component(name, seeds, step, tolerance) for name in names]
