"""Waveform <-> log-melspectrogram conversion.

Everything here works in the natural-log domain: ``entry = ln(max(power, floor))``
with an HTK mel scale and unnormalized triangular filters. Frames are taken
without centre padding, so an input of ``n`` samples gives
``(n - fft_size) // hop + 1`` frames.
"""
from __future__ import annotations

import hashlib
import struct
import wave
from dataclasses import astuple, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft

from .errors import (DomainError, FormatError, ShapeError, TooShortError,
                     UnsupportedFormatError, ValidationError)

MELS_MAGIC = b"MELS"
MELS_VERSION = 1


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 22050
    fft_size: int = 1024
    hop: int = 128
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    griffin_lim_iters: int = 60

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        if not 0 < self.hop <= self.fft_size:
            raise ValidationError("need 0 < hop <= fft_size")
        if self.mel_bins < 2:
            raise ValidationError("mel_bins must be >= 2")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValidationError("need 0 <= fmin < fmax <= sample_rate/2")
        if self.log_floor <= 0:
            raise ValidationError("log_floor must be positive")

    @property
    def hop_seconds(self) -> float:
        return self.hop / self.sample_rate

    @property
    def n_freqs(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def floor_value(self) -> float:
        return float(np.log(self.log_floor))

    @property
    def config_id(self) -> str:
        return hashlib.sha1(repr(astuple(self)).encode()).hexdigest()[:12]


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = 22050

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("audio contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    hop_seconds: float = 128 / 22050
    config_id: str = field(default="")

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ShapeError("mel frames must be a T x M matrix")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    def slice(self, start: int, stop: int) -> "MelSpectrogram":
        return MelSpectrogram(self.frames[start:stop], self.hop_seconds, self.config_id)


def mel_scale(f):
    """HTK mel value of ``f`` Hz (scalar or array)."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise DomainError("frequency must be non-negative")
    m = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(m) if m.ndim == 0 else m


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_centers(cfg: DspConfig) -> np.ndarray:
    """Centre frequency (Hz) of every mel filter."""
    pts = np.linspace(mel_scale(cfg.fmin), mel_scale(cfg.fmax), cfg.mel_bins + 2)
    return mel_to_hz(pts)[1:-1]


@lru_cache(maxsize=8)
def _filterbank(cfg: DspConfig) -> np.ndarray:
    pts = mel_to_hz(np.linspace(mel_scale(cfg.fmin), mel_scale(cfg.fmax), cfg.mel_bins + 2))
    freqs = np.arange(cfg.n_freqs) * cfg.sample_rate / cfg.fft_size
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    w = np.maximum(0.0, np.minimum(rising, falling))
    w.setflags(write=False)
    return w


def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """``mel_bins x (fft_size/2 + 1)`` triangular filter weights (peak 1)."""
    return _filterbank(cfg)


@lru_cache(maxsize=8)
def _window(n: int) -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return _window(n)


def n_frames(n_samples: int, cfg: DspConfig) -> int:
    if n_samples < cfg.fft_size:
        return 0
    return (n_samples - cfg.fft_size) // cfg.hop + 1


def stft(x: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Complex STFT, shape ``(T, fft_size/2 + 1)``."""
    x = np.asarray(x, dtype=np.float64)
    T = n_frames(len(x), cfg)
    if T == 0:
        raise TooShortError(f"need at least {cfg.fft_size} samples, got {len(x)}")
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(T)[:, None]
    return np.fft.rfft(x[idx] * hann_window(cfg.fft_size), axis=1)


def istft(spec: np.ndarray, cfg: DspConfig, rel_floor: float = 0.0) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (weighted overlap-add).

    ``rel_floor > 0`` clamps the window-energy normalizer at that fraction of
    its maximum, which stops the lightly covered edge samples from blowing up
    (at the cost of no longer being the exact least-squares inverse there).
    """
    T = spec.shape[0]
    n = cfg.fft_size + cfg.hop * (T - 1)
    w = hann_window(cfg.fft_size)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1) * w
    out = np.zeros(n)
    norm = np.zeros(n)
    for t in range(T):
        s = t * cfg.hop
        out[s:s + cfg.fft_size] += frames[t]
        norm[s:s + cfg.fft_size] += w * w
    if rel_floor > 0:
        norm = np.maximum(norm, rel_floor * norm.max())
    nz = norm > 1e-12
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return out


def melspectrogram(audio: AudioBuffer, cfg: DspConfig | None = None) -> MelSpectrogram:
    cfg = cfg or DspConfig()
    if audio.sample_rate != cfg.sample_rate:
        raise ValidationError(
            f"audio is {audio.sample_rate} Hz but config expects {cfg.sample_rate} Hz")
    if len(audio) < cfg.fft_size:
        raise TooShortError(f"audio shorter than one window ({len(audio)} < {cfg.fft_size})")
    power = np.abs(stft(audio.samples, cfg)) ** 2
    mel = power @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)), cfg.hop_seconds, cfg.config_id)


def mel_to_magnitude(mel: MelSpectrogram, cfg: DspConfig) -> np.ndarray:
    """Approximate linear magnitude spectrogram via the filterbank pseudo-inverse."""
    if mel.n_mels != cfg.mel_bins:
        raise ShapeError(f"mel has {mel.n_mels} bins, config expects {cfg.mel_bins}")
    inv = _pinv(cfg)
    power = np.exp(np.asarray(mel.frames, dtype=np.float64)) @ inv.T
    return np.sqrt(np.maximum(power, 0.0))


@lru_cache(maxsize=8)
def _pinv(cfg: DspConfig) -> np.ndarray:
    return np.linalg.pinv(mel_filterbank(cfg))


def _spectral_distance(a: np.ndarray, b: np.ndarray) -> float:
    # full-spectrum norm of a one-sided spectrum: interior bins count twice
    d = (a - b) ** 2
    weight = np.full(d.shape[1], 2.0)
    weight[0] = 1.0
    if d.shape[1] > 1:
        weight[-1] = 1.0
    return float(np.sqrt(np.sum(d * weight)))


def phase_reconstruct(magnitude: np.ndarray, cfg: DspConfig, n_iter: int | None = None,
                      seed: int = 0) -> tuple[np.ndarray, list[float]]:
    """Griffin-Lim phase recovery.

    Returns the waveform and, per iteration, the distance between the target
    magnitude and the magnitude of the current estimate's STFT.
    """
    n_iter = cfg.griffin_lim_iters if n_iter is None else n_iter
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    x = istft(magnitude * phase, cfg)
    errors = []
    for _ in range(n_iter):
        spec = stft(x, cfg)
        errors.append(_spectral_distance(np.abs(spec), magnitude))
        phase = np.exp(1j * np.angle(spec))
        x = istft(magnitude * phase, cfg)
    return istft(magnitude * phase, cfg, rel_floor=0.1), errors


def griffin_lim(mel: MelSpectrogram, cfg: DspConfig | None = None, *,
                normalize: bool = True, seed: int = 0) -> AudioBuffer:
    cfg = cfg or DspConfig()
    if mel.n_frames == 0:
        return AudioBuffer(np.zeros(0), cfg.sample_rate)
    x, _ = phase_reconstruct(mel_to_magnitude(mel, cfg), cfg, seed=seed)
    if normalize:
        peak = np.max(np.abs(x))
        if peak > 0:
            x = x * (0.95 / peak)
    return AudioBuffer(x, cfg.sample_rate)


def mel_cepstrum(mel: MelSpectrogram, n_coeffs: int = 13) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel frame, coefficients c1..c_n (c0 dropped)."""
    if not 0 < n_coeffs < mel.n_mels:
        raise ValidationError("n_coeffs must be in [1, mel_bins)")
    c = scipy.fft.dct(np.asarray(mel.frames, dtype=np.float64), type=2, norm="ortho", axis=1)
    return c[:, 1:n_coeffs + 1]


# ---------------------------------------------------------------- file I/O

def load_wav(path) -> AudioBuffer:
    """Read a mono 16-bit PCM RIFF/WAVE file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            if channels != 1:
                raise UnsupportedFormatError(f"{path}: {channels} channels, expected mono")
            if width != 2:
                raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, expected 16-bit")
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise FormatError(f"{path}: malformed WAV header ({exc})") from exc
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(data, rate)


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(audio.sample_rate))
        wf.writeframes(pcm.tobytes())


def write_mels(path, mel: MelSpectrogram) -> None:
    T, M = mel.frames.shape
    with open(path, "wb") as fh:
        fh.write(MELS_MAGIC)
        fh.write(struct.pack("<IIId", MELS_VERSION, T, M, mel.hop_seconds))
        fh.write(np.ascontiguousarray(mel.frames, dtype="<f4").tobytes())


def read_mels(path, config_id: str = "") -> MelSpectrogram:
    blob = Path(path).read_bytes()
    head = 4 + struct.calcsize("<IIId")
    if len(blob) < head or blob[:4] != MELS_MAGIC:
        raise FormatError(f"{path}: not a MELS file")
    version, T, M, hop_seconds = struct.unpack("<IIId", blob[4:head])
    if version != MELS_VERSION:
        raise FormatError(f"{path}: unsupported MELS version {version}")
    if len(blob) != head + 4 * T * M:
        raise FormatError(f"{path}: truncated MELS payload")
    frames = np.frombuffer(blob[head:], dtype="<f4").reshape(T, M).astype(np.float32)
    return MelSpectrogram(frames, hop_seconds, config_id)
