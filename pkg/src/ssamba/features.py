"""Waveform ingestion, log-Mel spectrograms and 16x16 patch sequences."""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 16000
N_MELS = 128
WIN_LENGTH = 400     # 25 ms
HOP_LENGTH = 160     # 10 ms
N_FFT = 512
PATCH = 16
LOG_FLOOR = 1e-10
FLOOR_VALUE = math.log(LOG_FLOOR)
FRAME_RATE = SAMPLE_RATE / HOP_LENGTH


class IngestionError(ValueError):
    """Audio could not be read or is too short to featurize."""


class UnsupportedFormatError(IngestionError):
    """The container holds an encoding this reader does not handle."""


class DegenerateInputError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    values: np.ndarray   # (F, T)

    @property
    def F(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]


@dataclass
class PatchSequence:
    flat: np.ndarray            # (M, 256)
    grid: tuple[int, int]       # (f_patches, t_patches)
    n_frames: int               # frames before padding

    @property
    def M(self) -> int:
        return self.flat.shape[0]

    @property
    def patches(self) -> np.ndarray:
        return self.flat.reshape(-1, PATCH, PATCH)


# --------------------------------------------------------------------------
# Ingestion

def load_audio(path) -> Waveform:
    """Read a RIFF/WAVE file as 16 kHz mono float in [-1, 1]."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(str(path))
    except (ValueError, EOFError, struct.error, OSError) as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "Unsupported" in msg:
            raise UnsupportedFormatError(f"{path}: {msg}") from exc
        raise IngestionError(f"{path}: {msg}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise UnsupportedFormatError(f"{path}: sample type {data.dtype} (need PCM16 or float32)")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise IngestionError(f"{path}: no samples")
    return Waveform(resample(x, rate, SAMPLE_RATE), SAMPLE_RATE)


def resample(x: np.ndarray, rate_in: int, rate_out: int = SAMPLE_RATE) -> np.ndarray:
    if rate_in == rate_out:
        return np.asarray(x, dtype=np.float32)
    ratio = Fraction(rate_out, rate_in)
    y = resample_poly(np.asarray(x, dtype=np.float64), ratio.numerator, ratio.denominator)
    return y.astype(np.float32)


def write_wav(path, samples: np.ndarray, rate: int = SAMPLE_RATE, pcm16: bool = True) -> None:
    samples = np.asarray(samples)
    if pcm16:
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    wavfile.write(str(path), rate, data)


def standardize_duration(w: Waveform, seconds: float) -> Waveform:
    if seconds <= 0:
        raise ValueError("target duration must be > 0")
    n = int(round(seconds * w.sample_rate))
    x = w.samples
    if x.size == n:
        return w
    if x.size > n:
        return Waveform(x[:n].copy(), w.sample_rate)
    return Waveform(np.concatenate([x, np.zeros(n - x.size, dtype=x.dtype)]), w.sample_rate)


# --------------------------------------------------------------------------
# Log-Mel

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1).

    Triangles are built on the mel axis, so every filter covers the
    FFT bins whose mel position falls between its neighbours' centres.
    """
    fmax = sr / 2 if fmax is None else fmax
    edges = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    bins = hz_to_mel(np.fft.rfftfreq(n_fft, 1.0 / sr))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins - lo) / (mid - lo)
    down = (hi - bins) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_centers_hz(n_mels: int = N_MELS, sr: int = SAMPLE_RATE) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2), n_mels + 2))[1:-1]


_FBANK = None
_HANN = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(WIN_LENGTH) / WIN_LENGTH)  # periodic


def _fbank():
    global _FBANK
    if _FBANK is None:
        _FBANK = mel_filterbank()
    return _FBANK


def frame_count(n_samples: int) -> int:
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def log_mel(w: Waveform) -> Spectrogram:
    if w.sample_rate != SAMPLE_RATE:
        raise IngestionError(f"expected {SAMPLE_RATE} Hz, got {w.sample_rate}")
    x = w.samples.astype(np.float64)
    if x.size < WIN_LENGTH:
        raise IngestionError(f"waveform has {x.size} samples, shorter than one {WIN_LENGTH}-sample window")
    T = frame_count(x.size)
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(T)[:, None]
    frames = x[idx] * _HANN
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    mel = power @ _fbank().T
    return Spectrogram(np.log(np.maximum(mel, LOG_FLOOR)).T.astype(np.float32))


# --------------------------------------------------------------------------
# Patches

def patchify(s: Spectrogram, pad_value: float = FLOOR_VALUE) -> PatchSequence:
    """Tile into 16x16 patches, time groups outer and frequency groups inner."""
    v = s.values
    if v.shape[0] != N_MELS:
        raise ValueError(f"expected {N_MELS} mel bins, got {v.shape[0]}")
    T = v.shape[1]
    tp = -(-T // PATCH)
    padded = np.full((N_MELS, tp * PATCH), pad_value, dtype=np.float32)
    padded[:, :T] = v
    fp = N_MELS // PATCH
    # (fp, 16, tp, 16) -> (tp, fp, 16, 16)
    blocks = padded.reshape(fp, PATCH, tp, PATCH).transpose(2, 0, 1, 3)
    return PatchSequence(blocks.reshape(tp * fp, PATCH * PATCH).copy(), (fp, tp), T)


def unpatchify(p: PatchSequence) -> np.ndarray:
    fp, tp = p.grid
    blocks = p.flat.reshape(tp, fp, PATCH, PATCH).transpose(1, 2, 0, 3)
    return blocks.reshape(fp * PATCH, tp * PATCH)


def patch_count(seconds: float) -> int:
    T = frame_count(int(round(seconds * SAMPLE_RATE)))
    return (N_MELS // PATCH) * -(-T // PATCH)


def normalize(s: Spectrogram, mean: float, std: float) -> Spectrogram:
    if std <= 0:
        raise DegenerateInputError("normalization std must be > 0")
    return Spectrogram(((s.values - mean) / (2.0 * std)).astype(np.float32))


def corpus_stats(spectrograms) -> tuple[float, float]:
    total = 0.0
    total_sq = 0.0
    count = 0
    for s in spectrograms:
        v = np.asarray(s.values if isinstance(s, Spectrogram) else s, dtype=np.float64)
        total += v.sum()
        total_sq += (v * v).sum()
        count += v.size
    if count == 0:
        raise DegenerateInputError("empty corpus")
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    return float(mean), float(math.sqrt(var))


def featurize(w: Waveform, seconds: float | None = None) -> Spectrogram:
    if seconds is not None:
        w = standardize_duration(w, seconds)
    return log_mel(w)


# --------------------------------------------------------------------------
# Feature cache: b"SMF1", u32 F, u32 T, F*T float32 LE row-major

CACHE_MAGIC = b"SMF1"


def write_feature_cache(path, s: Spectrogram) -> None:
    v = np.ascontiguousarray(s.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC + struct.pack("<II", *v.shape) + v.tobytes())


def read_feature_cache(path) -> Spectrogram:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise IngestionError(f"{path}: bad feature-cache magic")
    F, T = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * F * T
    if len(raw) != expected:
        raise IngestionError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return Spectrogram(np.frombuffer(raw, dtype="<f4", offset=12).reshape(F, T).astype(np.float32))
