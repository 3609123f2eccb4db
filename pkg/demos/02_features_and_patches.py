"""
From waveform to patch sequence
===============================

A synthetic chirp goes through the audio front end: 128-bin log-mel
spectrogram, normalization, then 16x16 patches ordered time-group outer,
frequency-group inner.  The cached form is written to a temp directory.

Run with ``python3 demos/02_features_and_patches.py``.
"""

import tempfile
from pathlib import Path

import numpy as np

from ssamba import features as ft
from ssamba import synthetic as syn

rng = np.random.default_rng(1)
clip = syn.make_clip("chirp", 2.0, rng, snr_db=20.0)
print("samples:", clip.size, "peak:", float(np.abs(clip).max()))

spec = ft.log_mel(ft.Waveform(clip))
print("spectrogram (F, T):", spec.values.shape)

# Where does the energy sit over time?  A chirp should sweep.
peak_bins = spec.values.argmax(axis=0)
print("loudest mel bin every 25 frames:", peak_bins[::25])

# %%
# Normalization uses corpus statistics; a one-clip corpus here.
mean, std = ft.corpus_stats([spec])
normed = ft.normalize(spec, mean, std)
print(f"corpus mean {mean:.3f}, std {std:.3f}; normalized std {normed.values.std():.3f}")

patches = ft.patchify(normed)
print("patch grid (freq groups, time groups):", patches.grid, "-> M =", patches.M)
print("10 s of audio gives", ft.patch_count(10.0), "patches")

# Round trip: patches back to the (padded) spectrogram
back = ft.unpatchify(patches)
print("round trip exact:", np.array_equal(back[:, :normed.T], normed.values))

# %%
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "chirp.smf1"
    ft.write_feature_cache(path, spec)
    print("cache bytes:", path.stat().st_size, "(12-byte header + float32 data)")
    again = ft.read_feature_cache(path)
    print("cache round trip exact:", np.array_equal(again.values, spec.values))
