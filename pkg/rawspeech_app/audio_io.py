'''
Audio input/output and preprocessing.

Decode PCM WAV files into real-valued mono waveforms, trim leading/trailing
non-speech, apply speed perturbation and cut fixed-length model windows.
All functions are pure: they never mutate their input waveform.
'''
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import soundfile as sf

from rawspeech_app.constants import (
    DEFAULT_SAMPLE_RATE,
    TRIM_FRAME_MS,
    TRIM_THRESHOLD_DB,
    WINDOW_MODE_MAP,
    WindowMode,
    normalize_str,
)
from rawspeech_app.exceptions import (
    AudioFileNotFoundError,
    AudioRangeError,
    AudioWriteError,
    MalformedWavError,
    UnsupportedEncodingError,
)

logger = logging.getLogger(__name__)

# soundfile left-justifies every PCM width into int32
INT32_SCALE = float(2 ** 31)
INT16_SCALE = 32768.0
WAV_FORMATS = {'WAV', 'WAVEX'}


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    duration_s: float = field(init=False)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)

        if samples.ndim != 1:
            raise ValueError(f'Waveform samples must be 1-D, got shape {samples.shape}')
        if samples.size == 0:
            raise ValueError('Waveform samples cannot be empty')
        if not np.all(np.isfinite(samples)):
            raise ValueError('Waveform samples must be finite')
        if int(self.sample_rate) <= 0:
            raise ValueError(f'Sample rate must be positive, got {self.sample_rate}')

        # Freeze the buffer, waveforms are shared between workers and caches
        samples = samples.copy() if samples is self.samples else samples
        samples.setflags(write=False)

        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'sample_rate', int(self.sample_rate))
        object.__setattr__(self, 'duration_s', samples.size / self.sample_rate)

    def __len__(self) -> int:
        return int(self.samples.size)


def ms_to_samples(ms: float, sample_rate: int) -> int:
    return int(round(ms * sample_rate / 1000))


# === WAV container ===

def read_wav(path: str | Path) -> Waveform:
    '''
    Decode a PCM WAV file. Integer samples are divided by the type's max
    magnitude (16-bit: 32768), channels are averaged to mono.
    '''
    path = Path(path)

    if not path.is_file():
        raise AudioFileNotFoundError(f'Audio file not found: {path}')

    try:
        info = sf.info(str(path))
    except RuntimeError as exc:
        raise MalformedWavError(f'Malformed WAV header in {path}: {exc}') from exc

    if info.format not in WAV_FORMATS:
        raise UnsupportedEncodingError(f'{path} is a {info.format} container, only WAV is supported')

    if not info.subtype.startswith('PCM_'):
        raise UnsupportedEncodingError(f'{path} uses {info.subtype} encoding, only integer PCM is supported')

    try:
        data, sample_rate = sf.read(str(path), dtype='int32', always_2d=True)
    except RuntimeError as exc:
        raise MalformedWavError(f'Could not decode {path}: {exc}') from exc

    if data.shape[0] == 0:
        raise MalformedWavError(f'{path} contains no samples')

    samples = data.astype(np.float64) / INT32_SCALE

    # Multichannel input is averaged to mono
    if samples.shape[1] > 1:
        samples = samples.mean(axis=1)
    else:
        samples = samples[:, 0]

    return Waveform(samples=samples, sample_rate=int(sample_rate))


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    '''q = clamp(round(a * 32768), -32768, 32767)'''
    q = np.rint(np.asarray(samples, dtype=np.float64) * INT16_SCALE)
    return np.clip(q, -32768, 32767).astype(np.int16)


def write_wav(wav: Waveform, path: str | Path) -> None:
    '''
    Store as 16-bit PCM mono. Amplitudes must lie in [-1, 1].
    '''
    path = Path(path)
    peak = float(np.max(np.abs(wav.samples)))

    if peak > 1.0:
        raise AudioRangeError(f'Amplitude {peak:.6f} out of range [-1, 1] for {path}')

    if not path.parent.is_dir():
        raise AudioWriteError(f'Output directory does not exist: {path.parent}')

    try:
        sf.write(str(path), quantize_pcm16(wav.samples), wav.sample_rate, subtype='PCM_16', format='WAV')
    except (RuntimeError, OSError) as exc:
        raise AudioWriteError(f'Could not write {path}: {exc}') from exc


# === Preprocessing ===

def frame_rms(samples: np.ndarray, frame_len: int) -> np.ndarray:
    n_frames = -(-samples.size // frame_len)
    padded = np.zeros(n_frames * frame_len)
    padded[:samples.size] = samples

    return np.sqrt(np.mean(padded.reshape(n_frames, frame_len) ** 2, axis=1))


def trim_nonspeech(
    wav: Waveform,
    threshold_db: float = TRIM_THRESHOLD_DB,
    frame_ms: float = TRIM_FRAME_MS,
) -> Waveform:
    '''
    Energy gate: drop leading and trailing frames whose RMS is more than
    |threshold_db| below the loudest frame. Interior frames are kept.
    '''
    if frame_ms <= 0:
        raise ValueError(f'frame_ms must be positive, got {frame_ms}')
    if threshold_db >= 0:
        raise ValueError(f'threshold_db must be negative, got {threshold_db}')

    frame_len = max(1, ms_to_samples(frame_ms, wav.sample_rate))
    rms = frame_rms(wav.samples, frame_len)
    peak = float(rms.max())

    # All-silent input: nothing to measure against
    if peak == 0.0:
        return wav

    active = np.flatnonzero(rms >= peak * 10 ** (threshold_db / 20))
    start = int(active[0]) * frame_len
    stop = min((int(active[-1]) + 1) * frame_len, len(wav))

    if start == 0 and stop == len(wav):
        return wav

    return Waveform(samples=wav.samples[start:stop], sample_rate=wav.sample_rate)


def speed_perturb(wav: Waveform, factor: float) -> Waveform:
    '''
    Tempo+pitch change. Output sample k is the linear interpolation of the
    input at position k * factor; output length is round(len / factor).
    '''
    if factor <= 0:
        raise ValueError(f'Speed factor must be positive, got {factor}')

    if factor == 1.0:
        return wav

    n_in = len(wav)
    n_out = max(1, int(round(n_in / factor)))
    positions = np.arange(n_out) * factor

    samples = np.interp(positions, np.arange(n_in), wav.samples)

    return Waveform(samples=samples, sample_rate=wav.sample_rate)


def fixed_window(wav: Waveform, seconds: float, mode: str = WindowMode.CROP_CENTER) -> Waveform:
    '''
    Exactly round(seconds * sample_rate) samples. Shorter inputs are always
    zero-padded at the end. Longer ones are center-cropped in `crop-center`
    mode; `pad-zero` anchors the window at the onset and keeps the head.
    '''
    if seconds <= 0:
        raise ValueError(f'Window length must be positive, got {seconds}')

    window_mode = WINDOW_MODE_MAP.get(normalize_str(mode))
    if window_mode is None:
        raise ValueError(f'Unknown window mode {mode!r}; allowed: {WindowMode.values}')

    target = int(round(seconds * wav.sample_rate))
    n = len(wav)

    if n == target:
        return wav

    if n < target:
        samples = np.zeros(target)
        samples[:n] = wav.samples
    else:
        start = (n - target) // 2 if window_mode == WindowMode.CROP_CENTER else 0
        samples = wav.samples[start:start + target]

    return Waveform(samples=samples, sample_rate=wav.sample_rate)


def prepare_waveform(
    wav: Waveform,
    seconds: float,
    speed_factor: float | None = None,
    threshold_db: float = TRIM_THRESHOLD_DB,
    frame_ms: float = TRIM_FRAME_MS,
    window_mode: str = WindowMode.CROP_CENTER,
) -> np.ndarray:
    '''
    Model input pipeline: trim, then perturb (copies are made from the trimmed
    utterance), then cut the fixed window.
    '''
    wav = trim_nonspeech(wav, threshold_db=threshold_db, frame_ms=frame_ms)

    if speed_factor is not None:
        wav = speed_perturb(wav, speed_factor)

    return fixed_window(wav, seconds, window_mode).samples
