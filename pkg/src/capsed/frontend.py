"""Waveform loading, resampling, and 64-band log-mel extraction.

Everything here is a pure function of its inputs: no randomness, no state.
Feature geometry at 16 kHz: 25 ms (400-sample) periodic Hann windows, 20 ms
(320-sample) hop, 512-point FFT, 64 triangular HTK-mel filters spanning
0-8000 Hz, log(power + 1e-10). Framing is center-padded with zeros so a clip
of N samples yields exactly ceil(N / 320) frames (frame i is centered on
sample i*320).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 16000
N_MELS = 64
WIN_LENGTH = 400
HOP_LENGTH = 320
N_FFT = 512
FMIN = 0.0
FMAX = 8000.0
LOG_EPS = 1e-10
FRAME_HOP_SECONDS = HOP_LENGTH / SAMPLE_RATE


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be mono 1-d, got shape {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def load_wav(path) -> Waveform:
    """Read a mono PCM WAV (16-bit int or 32-bit float)."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV sample format {data.dtype}")
    return Waveform(samples, int(rate))


def save_wav(path, w: Waveform) -> None:
    clipped = np.clip(w.samples, -1.0, 1.0)
    wavfile.write(path, w.sample_rate, (clipped * 32767.0).astype(np.int16))


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling to `target_rate`.

    Output length is round(len * target / source); a same-rate input is
    returned unchanged.
    """
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if len(w.samples) == 0:
        raise ValueError("cannot resample an empty waveform")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    g = np.gcd(int(target_rate), int(w.sample_rate))
    up, down = target_rate // g, w.sample_rate // g
    out = resample_poly(w.samples, up, down, window=("kaiser", 8.0))
    n_out = int(round(len(w.samples) * target_rate / w.sample_rate))
    return Waveform(out[:n_out], target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE, fmin: float = FMIN,
                   fmax: float = FMAX) -> np.ndarray:
    """Triangular mel filters, peak 1.0, shape (n_mels, n_fft//2 + 1)."""
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    fft_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, len(fft_freqs)))
    for i in range(n_mels):
        left, center, right = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        up = (fft_freqs - left) / (center - left)
        down = (right - fft_freqs) / (right - center)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = FMIN,
                           fmax: float = FMAX) -> np.ndarray:
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(mel_points)[1:-1]


def n_frames(n_samples: int, hop: int = HOP_LENGTH) -> int:
    return int(np.ceil(n_samples / hop))


_hann_cache: dict[int, np.ndarray] = {}


def _periodic_hann(length: int) -> np.ndarray:
    if length not in _hann_cache:
        _hann_cache[length] = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)
    return _hann_cache[length]


def logmel(w: Waveform) -> np.ndarray:
    """Log-mel spectrogram, shape (ceil(N/320), 64), float32.

    Requires a 16 kHz input; resample first.
    """
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"logmel expects {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    n = len(w.samples)
    if n < HOP_LENGTH:
        raise ValueError(f"clip of {n} samples is shorter than one hop ({HOP_LENGTH})")
    frames = n_frames(n)
    half = WIN_LENGTH // 2
    pad_right = max(0, (frames - 1) * HOP_LENGTH + half - (n - 1))
    padded = np.pad(w.samples, (half, pad_right))
    idx = np.arange(frames)[:, None] * HOP_LENGTH + np.arange(WIN_LENGTH)[None, :]
    windowed = padded[idx] * _periodic_hann(WIN_LENGTH)[None, :]
    spec = np.fft.rfft(windowed, n=N_FFT, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    mel_power = power @ mel_filterbank().T
    return np.log(mel_power + LOG_EPS).astype(np.float32)
