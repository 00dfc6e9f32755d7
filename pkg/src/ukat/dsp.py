"""Audio front-end: WAV I/O, resampling and log-Mel features.

Features are computed from 16 kHz mono audio: 512-sample Hann frames
(32 ms) every 160 samples (10 ms), 64 HTK-mel bands over 0-8 kHz, natural
log of the mel power with a floor of ``ln(eps)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window, upfirdn

from .errors import ArgumentError, EmptyInputError, UkatError

KAISER_BETA = 8.6
TAPS_PER_PHASE = 32


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ArgumentError(f"waveform must be mono, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ArgumentError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ArgumentError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    n_fft: int = 512
    win_length: int = 512
    hop_length: int = 160
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float = 8000.0
    eps: float = 1e-10

    @property
    def log_floor(self) -> float:
        return math.log(self.eps)

    def num_frames(self, n_samples: int) -> int:
        return (max(n_samples, self.win_length) - self.win_length) // self.hop_length + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FrontendConfig":
        return cls(**d)


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    edges_hz: np.ndarray  # (n_mels + 2,) lower edge, centers..., upper edge

    @property
    def centers_hz(self) -> np.ndarray:
        return self.edges_hz[1:-1]


def read_wav(path) -> Waveform:
    """Load a PCM-16 or float-32 WAV file, averaging channels to mono."""
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except (ValueError, EOFError) as exc:
        raise UkatError(f"{path}: unreadable WAV file ({exc})") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise UkatError(f"{path}: unsupported WAV sample format {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples, int(rate))


def write_wav(path, w: Waveform, fmt: str = "int16") -> None:
    if fmt == "int16":
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    elif fmt == "float32":
        data = w.samples.astype("<f4")
    else:
        raise ArgumentError(f"unknown WAV format {fmt!r}")
    wavfile.write(str(path), w.sample_rate, data)


def _resampling_filter(up: int, down: int) -> np.ndarray:
    # Low-pass at the narrower of the two Nyquist bands, in the upsampled domain.
    length = TAPS_PER_PHASE * up + 1
    cutoff = 1.0 / max(up, down)
    n = np.arange(length) - (length - 1) / 2
    h = cutoff * np.sinc(cutoff * n) * np.kaiser(length, KAISER_BETA)
    return h * up


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase windowed-sinc resampling to ``target_rate``.

    Output length is ``round(len(w) * target_rate / w.sample_rate)``.
    """
    if len(w) == 0:
        raise EmptyInputError("cannot resample an empty waveform")
    if target_rate <= 0:
        raise ArgumentError(f"target rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)

    ratio = Fraction(int(target_rate), int(w.sample_rate))
    up, down = ratio.numerator, ratio.denominator
    n_out = int(round(len(w) * up / down))

    h = _resampling_filter(up, down)
    delay = (len(h) - 1) // 2
    # Left-pad the filter so the group delay lands on a multiple of `down`.
    pre_pad = (down - delay % down) % down
    h = np.concatenate([np.zeros(pre_pad), h])
    skip = (delay + pre_pad) // down

    y = upfirdn(h, w.samples, up, down)
    y = y[skip:skip + n_out]
    if y.shape[0] < n_out:
        y = np.concatenate([y, np.zeros(n_out - y.shape[0])])
    return Waveform(y, int(target_rate))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(n_fft: int, n_mels: int, sample_rate: int,
                         f_min: float = 0.0, f_max: float | None = None) -> MelFilterbank:
    if f_max is None:
        f_max = sample_rate / 2
    if n_mels < 1 or n_fft < 2:
        raise ArgumentError("n_mels must be >= 1 and n_fft >= 2")
    if not (0 <= f_min < f_max):
        raise ArgumentError(f"need 0 <= f_min < f_max, got {f_min}, {f_max}")
    if f_max > sample_rate / 2:
        raise ArgumentError(f"f_max {f_max} exceeds Nyquist {sample_rate / 2}")

    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise ArgumentError(
            f"mel bands {empty.tolist()} cover no FFT bin; use fewer bands or a larger n_fft")
    return MelFilterbank(weights, edges)


_FILTERBANKS: dict = {}


def _filterbank_for(cfg: FrontendConfig) -> MelFilterbank:
    key = (cfg.n_fft, cfg.n_mels, cfg.sample_rate, cfg.f_min, cfg.f_max)
    fb = _FILTERBANKS.get(key)
    if fb is None:
        fb = _FILTERBANKS[key] = build_mel_filterbank(*key)
    return fb


def frame_signal(samples: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    if samples.shape[0] < cfg.win_length:
        samples = np.pad(samples, (0, cfg.win_length - samples.shape[0]))
    return sliding_window_view(samples, cfg.win_length)[::cfg.hop_length]


def extract_log_mel(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Return the (frames, n_mels) float32 log-Mel spectrogram of ``w``."""
    if len(w) == 0:
        raise EmptyInputError("cannot extract features from an empty waveform")
    if w.sample_rate != cfg.sample_rate:
        raise ArgumentError(
            f"expected {cfg.sample_rate} Hz audio, got {w.sample_rate} Hz; resample first")
    frames = frame_signal(w.samples, cfg)
    window = get_window("hann", cfg.win_length)
    spec = np.fft.rfft(frames * window, n=cfg.n_fft, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    mel = power @ _filterbank_for(cfg).weights.T
    logmel = np.maximum(np.log(mel + cfg.eps), cfg.log_floor)
    return logmel.astype(np.float32)


def load_audio(path, cfg: FrontendConfig = FrontendConfig()) -> Waveform:
    w = read_wav(path)
    if w.sample_rate != cfg.sample_rate and len(w):
        w = resample(w, cfg.sample_rate)
    return w
