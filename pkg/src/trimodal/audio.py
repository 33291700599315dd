"""Audio front end: length normalization, the MFCC chain and PCM16 WAV I/O."""
import wave
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import FormatError, InvalidArgument


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidArgument("waveform samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise InvalidArgument(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def seconds(self):
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 22050
    preemphasis: float = 0.97
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 26
    n_mfcc: int = 13
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidArgument("sample_rate must be positive")
        if not 0 <= self.preemphasis < 1:
            raise InvalidArgument("preemphasis must lie in [0, 1)")
        if self.n_mfcc > self.n_mels or self.n_mfcc < 1:
            raise InvalidArgument("need 1 <= n_mfcc <= n_mels")
        if self.hop_length < 1 or self.frame_length < 1:
            raise InvalidArgument("frame and hop must span at least one sample")
        if self.log_floor <= 0:
            raise InvalidArgument("log_floor must be positive")

    @property
    def frame_length(self):
        return int(self.sample_rate * self.frame_ms / 1000.0)

    @property
    def hop_length(self):
        return int(self.sample_rate * self.hop_ms / 1000.0)

    @property
    def fft_size(self):
        n = 1
        while n < self.frame_length:
            n *= 2
        return n

    def n_frames(self, n_samples):
        if n_samples < self.frame_length:
            return 0
        return 1 + (n_samples - self.frame_length) // self.hop_length


def target_length(target_seconds, sample_rate):
    return int(round(target_seconds * sample_rate))


def normalize_length(w, target_seconds=3.6):
    """Zero-pad at the end, or trim the excess from both ends (front gets the floor)."""
    if len(w) == 0:
        raise InvalidArgument("cannot normalize an empty waveform")
    target = target_length(target_seconds, w.sample_rate)
    if target < 1:
        raise InvalidArgument(f"target length {target_seconds}s is shorter than one sample")
    x = w.samples
    if len(x) < target:
        x = np.concatenate([x, np.zeros(target - len(x))])
    elif len(x) > target:
        excess = len(x) - target
        front = excess // 2
        x = x[front:front + target]
    return Waveform(x.copy(), w.sample_rate)


def preemphasis(w, alpha=0.97):
    if not 0 <= alpha < 1:
        raise InvalidArgument("preemphasis coefficient must lie in [0, 1)")
    x = w.samples
    y = np.empty_like(x)
    if len(x):
        y[0] = x[0]
        y[1:] = x[1:] - alpha * x[:-1]
    return Waveform(y, w.sample_rate)


def hamming(n):
    if n == 1:
        return np.ones(1)
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2 * np.pi * k / (n - 1))


def frame_and_window(w, cfg):
    """``[F, frame_length]`` windowed frames with ``F = 1 + (len - frame) // hop``."""
    n, frame, hop = len(w), cfg.frame_length, cfg.hop_length
    if n < frame:
        raise InvalidArgument(f"waveform of {n} samples is shorter than one frame ({frame})")
    count = cfg.n_frames(n)
    starts = hop * np.arange(count)
    frames = w.samples[starts[:, None] + np.arange(frame)[None, :]]
    return frames * hamming(frame)[None, :]


def power_spectrum(frames, fft_size):
    """One-sided ``|DFT|^2 / fft_size`` for bins ``0 .. fft_size/2``."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if fft_size & (fft_size - 1) or fft_size < frames.shape[-1]:
        raise InvalidArgument(f"fft size {fft_size} must be a power of two >= frame length")
    spec = np.fft.rfft(frames, n=fft_size, axis=-1)
    return (spec.real ** 2 + spec.imag ** 2) / fft_size


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg):
    """Triangular filters ``[n_mels, fft_size/2 + 1]`` equally spaced in mel.

    Each filter peaks at exactly 1 on its center bin.
    """
    nfft, sr = cfg.fft_size, cfg.sample_rate
    mels = np.linspace(0.0, hz_to_mel(sr / 2.0), cfg.n_mels + 2)
    bins = np.floor((nfft + 1) * mel_to_hz(mels) / sr).astype(int)
    bins = np.minimum(bins, nfft // 2)
    if np.any(np.diff(bins) <= 0):
        raise InvalidArgument(
            f"{cfg.n_mels} mel bands collide at fft size {nfft}; lower n_mels or raise the resolution")
    fb = np.zeros((cfg.n_mels, nfft // 2 + 1))
    for m in range(1, cfg.n_mels + 1):
        left, center, right = bins[m - 1], bins[m], bins[m + 1]
        k = np.arange(left, center + 1)
        fb[m - 1, k] = (k - left) / (center - left)
        k = np.arange(center, right + 1)
        fb[m - 1, k] = (right - k) / (right - center)
    return fb


def log_mel_energies(w, cfg, filterbank=None):
    """``[F, n_mels]`` log filterbank energies (everything before the DCT)."""
    if w.sample_rate != cfg.sample_rate:
        raise InvalidArgument(f"waveform at {w.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    fb = mel_filterbank(cfg) if filterbank is None else filterbank
    frames = frame_and_window(preemphasis(w, cfg.preemphasis), cfg)
    energies = power_spectrum(frames, cfg.fft_size) @ fb.T
    return np.log(np.maximum(energies, cfg.log_floor))


def mfcc(w, cfg, filterbank=None):
    """``[n_mfcc, F]`` cepstral coefficients (orthonormal DCT-II of log-mel energies)."""
    logmel = log_mel_energies(w, cfg, filterbank)
    coeffs = dct(logmel, type=2, axis=-1, norm="ortho")[:, :cfg.n_mfcc]
    if not np.all(np.isfinite(coeffs)):
        raise InvalidArgument("MFCC computation produced non-finite values")
    return coeffs.T


def read_wav(path):
    """Canonical RIFF/WAVE PCM16 reader; multichannel input is averaged to mono."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getsampwidth() != 2 or fh.getcomptype() != "NONE":
                raise FormatError(f"{path}: only uncompressed 16-bit PCM is supported")
            channels, rate = fh.getnchannels(), fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: unreadable WAV ({exc})") from exc
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        data = data[:len(data) - len(data) % channels].reshape(-1, channels).mean(axis=1)
    if data.size == 0:
        raise FormatError(f"{path}: no audio samples")
    return Waveform(data, rate)


def write_wav(path, w):
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


class MfccExtractor(TransformerMixin, BaseEstimator):
    """Length-normalize raw waveforms and map them to MFCC matrices.

    Stateless; ``transform`` takes a sequence of 1-D sample arrays (or
    :class:`Waveform`) at ``sample_rate`` and returns ``[n, n_mfcc, frames]``.
    """

    def __init__(self, sample_rate=22050, target_seconds=3.6, preemphasis=0.97,
                 frame_ms=25.0, hop_ms=10.0, n_mels=26, n_mfcc=13, log_floor=1e-10):
        self.sample_rate = sample_rate
        self.target_seconds = target_seconds
        self.preemphasis = preemphasis
        self.frame_ms = frame_ms
        self.hop_ms = hop_ms
        self.n_mels = n_mels
        self.n_mfcc = n_mfcc
        self.log_floor = log_floor

    def config(self):
        return MfccConfig(self.sample_rate, self.preemphasis, self.frame_ms, self.hop_ms,
                          self.n_mels, self.n_mfcc, self.log_floor)

    def fit(self, X, y=None):
        cfg = self.config()
        self.filterbank_ = mel_filterbank(cfg)
        self.n_frames_ = cfg.n_frames(target_length(self.target_seconds, self.sample_rate))
        return self

    def transform(self, X):
        if not hasattr(self, "filterbank_"):
            self.fit(X)
        cfg = self.config()
        out = []
        for item in X:
            w = item if isinstance(item, Waveform) else Waveform(item, self.sample_rate)
            out.append(mfcc(normalize_length(w, self.target_seconds), cfg, self.filterbank_))
        return np.stack(out).astype(np.float32)
