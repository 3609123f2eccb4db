"""Synthetic audio: tones, chirps and noise bursts at 16 kHz.

Used for desk-scale pretraining/fine-tuning experiments and for tests.
"""

from __future__ import annotations

import numpy as np

from .features import SAMPLE_RATE

CLASSES = ("tone", "chirp", "noise")


def tone(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    t = np.arange(n) / sr
    f0 = rng.uniform(200.0, 2500.0)
    x = np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    for k in (2, 3):
        x += rng.uniform(0.0, 0.5) / k * np.sin(2 * np.pi * k * f0 * t)
    return x


def chirp(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    t = np.arange(n) / sr
    dur = n / sr
    f0, f1 = rng.uniform(200.0, 3500.0, size=2)
    while abs(f1 - f0) < 600.0:
        f0, f1 = rng.uniform(200.0, 3500.0, size=2)
    phase = 2 * np.pi * (f0 * t + (f1 - f0) * t * t / (2 * dur))
    return np.sin(phase + rng.uniform(0, 2 * np.pi))


def noise_bursts(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    x = np.zeros(n)
    for _ in range(rng.integers(2, 6)):
        length = int(rng.uniform(0.05, 0.3) * sr)
        start = int(rng.integers(0, max(1, n - length)))
        env = np.hanning(length)
        x[start:start + length] += rng.standard_normal(length) * env * rng.uniform(0.5, 1.5)
    return x


_MAKERS = {"tone": tone, "chirp": chirp, "noise": noise_bursts}


def make_clip(kind: str, seconds: float, rng: np.random.Generator, snr_db: float | None = None,
              sr: int = SAMPLE_RATE) -> np.ndarray:
    """One clip scaled to a random peak in [0.2, 0.8], with optional white background noise."""
    n = int(round(seconds * sr))
    x = _MAKERS[kind](n, rng, sr)
    if snr_db is not None:
        p = np.mean(x * x) + 1e-12
        x = x + rng.standard_normal(n) * np.sqrt(p / 10 ** (snr_db / 10))
    x = x / (np.max(np.abs(x)) + 1e-12) * rng.uniform(0.2, 0.8)
    return x.astype(np.float32)


def three_class_dataset(n_clips: int, seconds: float = 2.0, seed: int = 0,
                        snr_range: tuple[float, float] = (0.0, 20.0)):
    """Balanced tone/chirp/noise clips; returns (waveforms, labels)."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n_clips) % len(CLASSES)
    rng.shuffle(labels)
    clips = [make_clip(CLASSES[y], seconds, rng, rng.uniform(*snr_range)) for y in labels]
    return clips, labels.astype(np.int64)


def scene_sequence(seconds: int, seed: int = 0, min_len: int = 1, max_len: int = 4):
    """Concatenated class events; returns (waveform, per-second labels)."""
    rng = np.random.default_rng(seed)
    parts, labels = [], []
    while len(labels) < seconds:
        k = int(rng.integers(len(CLASSES)))
        span = int(min(rng.integers(min_len, max_len + 1), seconds - len(labels)))
        parts.append(make_clip(CLASSES[k], span, rng, snr_db=20.0))
        labels.extend([k] * span)
    return np.concatenate(parts), np.array(labels, dtype=np.int64)
