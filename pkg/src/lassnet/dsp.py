"""STFT analysis/synthesis, spectrogram masking and WAV I/O."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 32000
FRAME_SIZE = 1024
HOP_SIZE = 512


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be mono (1-D), got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    magnitude: np.ndarray  # F x T
    phase: np.ndarray  # F x T, radians
    frame_size: int = FRAME_SIZE
    hop_size: int = HOP_SIZE
    sample_count: int = 0
    sample_rate: int = SAMPLE_RATE

    @property
    def shape(self):
        return self.magnitude.shape

    def complex(self):
        return self.magnitude * np.exp(1j * self.phase)


def num_frames(sample_count, hop=HOP_SIZE):
    """Frame count under centred framing: ceil((n + 1) / hop)."""
    return -(-(sample_count + 1) // hop)


def hann(frame_size):
    """Periodic Hann window."""
    n = np.arange(frame_size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_size)


def stft(x, frame_size=FRAME_SIZE, hop_size=HOP_SIZE):
    """Centred, reflect-padded, Hann-windowed one-sided STFT."""
    wav = x if isinstance(x, Waveform) else Waveform(np.asarray(x))
    samples = wav.samples
    if len(samples) < 1:
        raise ValueError("cannot take the STFT of an empty signal")
    half = frame_size // 2
    padded = np.pad(samples, (half, half), mode="reflect") if len(samples) > 1 else np.pad(samples, (half, half), mode="edge")
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame_size)[::hop_size]
    spec = np.fft.rfft(frames * hann(frame_size), axis=1).T
    return ComplexSpectrogram(
        magnitude=np.abs(spec),
        phase=np.angle(spec),
        frame_size=frame_size,
        hop_size=hop_size,
        sample_count=len(samples),
        sample_rate=wav.sample_rate,
    )


def istft(spec):
    """Weighted overlap-add inverse of :func:`stft`, trimmed to ``sample_count``."""
    frame, hop, n = spec.frame_size, spec.hop_size, spec.sample_count
    n_bins, n_frames = spec.magnitude.shape
    if n_bins != frame // 2 + 1:
        raise ValueError(f"spectrogram has {n_bins} bins, frame size {frame} implies {frame // 2 + 1}")
    if spec.phase.shape != spec.magnitude.shape:
        raise ValueError("magnitude and phase shapes differ")
    if hop <= 0 or hop > frame:
        raise ValueError(f"invalid hop size {hop} for frame size {frame}")
    if n_frames != num_frames(n, hop):
        raise ValueError(f"{n_frames} frames is inconsistent with {n} samples at hop {hop}")
    window = hann(frame)
    frames = np.fft.irfft(spec.complex().T, n=frame, axis=1) * window
    total = frame + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = window * window
    for t in range(n_frames):
        out[t * hop : t * hop + frame] += frames[t]
        norm[t * hop : t * hop + frame] += wsq
    half = frame // 2
    out = out[half : half + n]
    norm = norm[half : half + n]
    nonzero = norm > 1e-10
    out[nonzero] /= norm[nonzero]
    return Waveform(out, spec.sample_rate)


def apply_mask(mask, spec):
    """Scale magnitudes by ``mask`` (Hadamard product) and keep the phase."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != spec.magnitude.shape:
        raise ValueError(f"mask shape {mask.shape} does not match spectrogram {spec.magnitude.shape}")
    if mask.size and (mask.min() < 0.0 or mask.max() > 1.0):
        raise ValueError("mask values must lie in [0, 1]")
    return ComplexSpectrogram(
        magnitude=mask * spec.magnitude,
        phase=spec.phase.copy(),
        frame_size=spec.frame_size,
        hop_size=spec.hop_size,
        sample_count=spec.sample_count,
        sample_rate=spec.sample_rate,
    )


# ---------------------------------------------------------------- WAV files

def read_wav(path, expected_rate=SAMPLE_RATE):
    rate, data = wavfile.read(path)
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (no resampling)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype} (need PCM16 or float32)")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples, rate)


def write_wav(path, wav, fmt="float32"):
    """Write mono audio as IEEE float32 (default) or PCM16."""
    if fmt == "float32":
        data = wav.samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    wavfile.write(path, wav.sample_rate, data)
