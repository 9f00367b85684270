'''
Neural building blocks: strided 1-D convolution over raw samples, 2-D
convolution, temporal pooling (max / l2 / average, fixed or adaptive windows),
batch normalization, LSTM, dense, dropout and softmax cross-entropy.
'''
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from rawspeech_app import autograd as ag
from rawspeech_app.autograd import Tensor, make_op, record_kink
from rawspeech_app.constants import BN_EPS, BN_MOMENTUM, Mode, PoolMode
from rawspeech_app.exceptions import ShapeError

# Keeps d sqrt / d x finite on all-zero windows
L2_EPS = 1e-12


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def conv1d_output_length(length: int, width: int, stride: int) -> int:
    return (length - width) // stride + 1


# === Layers ===

class Conv1DLayer:
    '''n_w filters of width k_w (samples) sliding with stride dw over a raw waveform'''

    def __init__(self, n_filters: int, width: int, stride: int, rng: np.random.Generator | None = None):
        if n_filters < 1 or width < 1 or stride < 1:
            raise ValueError(f'Conv1D needs n_filters, width, stride >= 1, got {n_filters}, {width}, {stride}')

        self.n_filters = n_filters
        self.width = width
        self.stride = stride

        rng = rng or np.random.default_rng(0)
        self.weight = he_normal(rng, (n_filters, width), fan_in=width)
        self.bias = zeros_param((n_filters,))

    def parameters(self) -> dict[str, Tensor]:
        return {'weight': self.weight, 'bias': self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d_forward(self, x)


class Conv2DLayer:
    def __init__(self, in_channels: int, n_filters: int, kernel: tuple[int, int] = (2, 2), rng=None):
        self.in_channels = in_channels
        self.n_filters = n_filters
        self.kernel = tuple(kernel)

        rng = rng or np.random.default_rng(0)
        kh, kw = self.kernel
        self.weight = he_normal(rng, (n_filters, in_channels, kh, kw), fan_in=in_channels * kh * kw)
        self.bias = zeros_param((n_filters,))

    def parameters(self) -> dict[str, Tensor]:
        return {'weight': self.weight, 'bias': self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_forward(self, x)


class BatchNormLayer:
    '''
    Per-channel (axis 1) normalization. Train mode uses batch statistics and
    updates the running ones; eval mode uses running statistics only.
    '''

    def __init__(self, n_channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.n_channels = n_channels
        self.momentum = momentum
        self.eps = eps

        self.gamma = Tensor(np.ones(n_channels), requires_grad=True)
        self.beta = zeros_param((n_channels,))
        self.running_mean = np.zeros(n_channels)
        self.running_var = np.ones(n_channels)

    def parameters(self) -> dict[str, Tensor]:
        return {'gamma': self.gamma, 'beta': self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {'running_mean': self.running_mean, 'running_var': self.running_var}

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batchnorm(x, self, mode)


class LstmLayer:
    '''
    Single-direction LSTM. Gate blocks are packed as [input, forget, cell, output]
    along the last axis of the weight matrices.
    '''

    def __init__(self, input_size: int, hidden_size: int, rng=None):
        self.input_size = input_size
        self.hidden_size = hidden_size

        rng = rng or np.random.default_rng(0)
        gates = 4 * hidden_size
        self.w_x = he_normal(rng, (input_size, gates), fan_in=input_size)
        self.w_h = he_normal(rng, (hidden_size, gates), fan_in=hidden_size)

        bias = np.zeros(gates)
        bias[hidden_size:2 * hidden_size] = 1.0
        self.bias = Tensor(bias, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {'w_x': self.w_x, 'w_h': self.w_h, 'bias': self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return lstm_sequence(self, x)


class DenseLayer:
    def __init__(self, in_features: int, out_features: int, rng=None):
        self.in_features = in_features
        self.out_features = out_features

        rng = rng or np.random.default_rng(0)
        self.weight = he_normal(rng, (out_features, in_features), fan_in=in_features)
        self.bias = zeros_param((out_features,))

    def parameters(self) -> dict[str, Tensor]:
        return {'weight': self.weight, 'bias': self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self)


# === Convolutions ===

def conv1d_forward(layer: Conv1DLayer, x: Tensor) -> Tensor:
    '''
    Pre-activation y[b, i, t] = b_i + sum_k w_k^i * x[b, dw*t + k] (0-based t, k)
    '''
    return conv1d(x, layer.weight, layer.bias, layer.stride)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int) -> Tensor:
    if x.ndim != 2:
        raise ShapeError('conv1d expects [batch x T] input', x.shape)

    batch, length = x.shape
    n_filters, width = weight.shape

    if length < width:
        raise ShapeError(f'Input shorter than filter width {width}', x.shape, weight.shape)

    t_out = conv1d_output_length(length, width, stride)
    windows = sliding_window_view(x.data, width, axis=1)[:, ::stride][:, :t_out]

    out = (windows @ weight.data.T).transpose(0, 2, 1) + bias.data[None, :, None]

    def _backward(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2], [0, 1]))
        grad_b = g.sum(axis=(0, 2))

        # Scatter window gradients back: position t*s + q*s + r == (t + q)*s + r
        cols = g.transpose(0, 2, 1) @ weight.data
        n_blocks = -(-width // stride)
        acc = np.zeros((batch, t_out + n_blocks, stride))
        for q in range(n_blocks):
            block = cols[:, :, q * stride:(q + 1) * stride]
            acc[:, q:q + t_out, :block.shape[2]] += block

        grad_x = np.zeros((batch, length))
        flat = acc.reshape(batch, -1)
        n = min(length, flat.shape[1])
        grad_x[:, :n] = flat[:, :n]

        return grad_x, grad_w, grad_b

    return make_op(out, (x, weight, bias), _backward, 'conv1d')


def conv2d_forward(layer: Conv2DLayer, x: Tensor) -> Tensor:
    return conv2d(x, layer.weight, layer.bias)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    '''Valid (no padding) stride-1 cross-correlation over [batch x C x H x W]'''
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError('conv2d channel/rank mismatch', x.shape, weight.shape)

    _, _, height, width = x.shape
    kh, kw = weight.shape[2:]

    if height < kh or width < kw:
        raise ShapeError('conv2d input smaller than filter', x.shape, weight.shape)

    h_out, w_out = height - kh + 1, width - kw + 1
    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))

    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def _backward(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = g.sum(axis=(0, 2, 3))

        grad_x = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                grad_x[:, :, i:i + h_out, j:j + w_out] += np.tensordot(
                    g, weight.data[:, :, i, j], axes=([1], [0])
                ).transpose(0, 3, 1, 2)

        return grad_x, grad_w, grad_b

    return make_op(out, (x, weight, bias), _backward, 'conv2d')


# === Pooling ===

def window_pool(x: Tensor, starts: np.ndarray, stops: np.ndarray, mode: str) -> Tensor:
    '''
    Pool the last axis over [starts[j], stops[j]) windows.
    max -> maximum (lowest index on ties), average -> mean, l2 -> root mean square.
    '''
    mode = PoolMode(mode)
    lead = x.shape[:-1]
    n_frames = len(starts)
    rows = x.data.reshape(-1, x.shape[-1])
    out = np.empty((rows.shape[0], n_frames))

    if mode == PoolMode.MAX:
        arg = np.empty((rows.shape[0], n_frames), dtype=np.int64)
        for j, (start, stop) in enumerate(zip(starts, stops)):
            local = np.argmax(rows[:, start:stop], axis=1)
            arg[:, j] = start + local
            out[:, j] = rows[np.arange(rows.shape[0]), arg[:, j]]
        record_kink('pool-max', arg)
    elif mode == PoolMode.AVERAGE:
        for j, (start, stop) in enumerate(zip(starts, stops)):
            out[:, j] = rows[:, start:stop].mean(axis=1)
    else:
        for j, (start, stop) in enumerate(zip(starts, stops)):
            out[:, j] = np.sqrt(np.mean(rows[:, start:stop] ** 2, axis=1))

    if mode == PoolMode.L2:
        # all-zero windows get a zero gradient
        denom = np.maximum(out, L2_EPS)

    def _backward(g):
        g = g.reshape(-1, n_frames)
        grad = np.zeros_like(rows)
        index = np.arange(rows.shape[0])

        for j, (start, stop) in enumerate(zip(starts, stops)):
            if mode == PoolMode.MAX:
                grad[index, arg[:, j]] += g[:, j]
            elif mode == PoolMode.AVERAGE:
                grad[:, start:stop] += g[:, j:j + 1] / (stop - start)
            else:
                grad[:, start:stop] += g[:, j:j + 1] * rows[:, start:stop] / ((stop - start) * denom[:, j:j + 1])

        return (grad.reshape(x.shape),)

    return make_op(out.reshape(lead + (n_frames,)), (x,), _backward, f'pool1d-{mode.value}')


def pool1d(x: Tensor, mode: str, window: int, stride: int) -> Tensor:
    if window < 1 or stride < 1:
        raise ValueError(f'Pool window and stride must be >= 1, got {window}, {stride}')

    length = x.shape[-1]
    if length < window:
        raise ShapeError(f'Pool window {window} larger than input length', x.shape)

    starts = np.arange(conv1d_output_length(length, window, stride)) * stride
    return window_pool(x, starts, starts + window, mode)


def adaptive_ranges(length: int, out_frames: int) -> tuple[np.ndarray, np.ndarray]:
    '''Frame j covers [floor(j*T/F), floor((j+1)*T/F)); ranges tile [0, T)'''
    j = np.arange(out_frames)
    return (j * length) // out_frames, ((j + 1) * length) // out_frames


def adaptive_pool1d(x: Tensor, mode: str, out_frames: int) -> Tensor:
    length = x.shape[-1]

    if out_frames < 1 or out_frames > length:
        raise ShapeError(f'Cannot pool to {out_frames} frames', x.shape)

    starts, stops = adaptive_ranges(length, out_frames)
    return window_pool(x, starts, stops, mode)


def pool2d(x: Tensor, size: tuple[int, int] = (2, 2)) -> Tensor:
    '''Max pooling with stride equal to the pool size; trailing rows/cols are dropped'''
    ph, pw = size
    batch, channels, height, width = x.shape

    if height < ph or width < pw:
        raise ShapeError(f'pool2d input smaller than pool size {size}', x.shape)

    h_out, w_out = height // ph, width // pw
    cropped = x[:, :, :h_out * ph, :w_out * pw] if (h_out * ph, w_out * pw) != (height, width) else x

    tiles = cropped.reshape(batch, channels, h_out, ph, w_out, pw).transpose(0, 1, 2, 4, 3, 5)
    return tiles.reshape(batch, channels, h_out, w_out, ph * pw).max(axis=-1)


# === Normalization and activations ===

def batchnorm(x: Tensor, layer: BatchNormLayer, mode: str) -> Tensor:
    axes = tuple(ax for ax in range(x.ndim) if ax != 1)
    view = (1, layer.n_channels) + (1,) * (x.ndim - 2)

    if x.shape[1] != layer.n_channels:
        raise ShapeError('batchnorm channel mismatch', x.shape, (layer.n_channels,))

    if Mode(mode) == Mode.TRAIN:
        if x.shape[0] < 2:
            raise ValueError('Train-mode batch norm needs a batch of at least 2')

        mu = ag.mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = ag.mean(ag.square(centered), axis=axes, keepdims=True)
        normalized = centered / ag.sqrt(var + layer.eps)

        count = x.size // layer.n_channels
        m = layer.momentum
        layer.running_mean[:] = m * layer.running_mean + (1 - m) * mu.data.reshape(-1)
        layer.running_var[:] = m * layer.running_var + (1 - m) * var.data.reshape(-1) * count / max(count - 1, 1)
    else:
        shift = Tensor(layer.running_mean.reshape(view))
        scale = Tensor(1.0 / np.sqrt(layer.running_var.reshape(view) + layer.eps))
        normalized = (x - shift) * scale

    return normalized * layer.gamma.reshape(view) + layer.beta.reshape(view)


def relu(x: Tensor) -> Tensor:
    return ag.relu(x)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    '''Inverted dropout: train mode zeroes with probability p and rescales by 1/(1-p)'''
    if not 0.0 <= rate < 1.0:
        raise ValueError(f'Dropout rate must be in [0, 1), got {rate}')

    if Mode(mode) == Mode.EVAL or rate == 0.0:
        return x

    if rng is None:
        raise ValueError('Train-mode dropout needs a random generator')

    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


# === Recurrent and dense ===

def lstm_sequence(layer: LstmLayer, x: Tensor) -> Tensor:
    '''[batch x T x D] -> all hidden states [batch x T x H], zero initial states'''
    if x.ndim != 3 or x.shape[2] != layer.input_size:
        raise ShapeError(f'LSTM expects [batch x T x {layer.input_size}]', x.shape)

    batch, steps, _ = x.shape
    hidden = layer.hidden_size

    # Input projection for every step in one matmul
    projected = (x.reshape(batch * steps, layer.input_size) @ layer.w_x + layer.bias).reshape(batch, steps, 4 * hidden)

    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    outputs = []

    for t in range(steps):
        z = projected[:, t, :] + h @ layer.w_h

        input_gate = ag.sigmoid(z[:, :hidden])
        forget_gate = ag.sigmoid(z[:, hidden:2 * hidden])
        candidate = ag.tanh(z[:, 2 * hidden:3 * hidden])
        output_gate = ag.sigmoid(z[:, 3 * hidden:])

        c = forget_gate * c + input_gate * candidate
        h = output_gate * ag.tanh(c)
        outputs.append(h)

    return ag.stack(outputs, axis=1)


def dense(x: Tensor, layer: DenseLayer) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f'Dense expects [batch x {layer.in_features}]', x.shape)

    return x @ layer.weight.transpose() + layer.bias


# === Loss ===

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    '''Mean over the batch of -log softmax(logits)[label], max-shifted for stability'''
    labels = np.asarray(labels, dtype=np.int64)
    batch, n_classes = logits.shape

    if labels.shape != (batch,):
        raise ShapeError('Labels must be one per batch row', logits.shape, labels.shape)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f'Labels must be in 0..{n_classes - 1}, got {labels.tolist()}')

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch)
    loss = np.mean(log_norm - shifted[rows, labels])

    def _backward(g):
        grad = softmax(logits.data)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return make_op(np.asarray(loss), (logits,), _backward, 'softmax-ce')
