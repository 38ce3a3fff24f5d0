"""
Pitch tracking and log-F0 normalization
=======================================

Track F0 on a pure tone and on a synthetic utterance, then normalize the
voiced frames the way the pitch extractor sees them.
"""

import tempfile

import numpy as np

from progre.audio import SAMPLE_RATE, Waveform
from progre.corpus import CorpusSpec, gen_synthetic_corpus
from progre.pitch import estimate_f0, f0_pearson, log_normalize

# A 220 Hz sinusoid: every interior frame should sit on 220 Hz.
t = np.arange(2 * SAMPLE_RATE) / SAMPLE_RATE
tone = estimate_f0(Waveform(0.5 * np.sin(2 * np.pi * 220.0 * t)))
print(f"tone: {len(tone)} frames, median F0 {np.median(tone.f0[tone.voicing]):.2f} Hz")

# Synthetic speech: each speaker has its own F0 and timbre.
with tempfile.TemporaryDirectory() as tmp:
    manifest = gen_synthetic_corpus(CorpusSpec(n_speakers=2, n_utts=2, duration_s=1.0, intonation=0.0), tmp)
    for entry in manifest:
        contour = estimate_f0(manifest.load(entry))
        voiced = contour.f0[contour.voicing]
        print(f"{entry.utterance_id}: voiced {contour.voicing.mean():.0%}, median F0 {np.median(voiced):.1f} Hz")

# Normalized log-F0 has zero mean and unit std over voiced frames,
# and does not change when the whole contour is scaled.
z = log_normalize(contour)
z2 = log_normalize(type(contour).from_f0(2.0 * contour.f0))
v = z.values[z.voicing]
print(f"normalized: mean {v.mean():.1e}, std {v.std():.6f}, max drift under 2x F0 {np.abs(z.values - z2.values).max():.1e}")
print(f"self-correlation r = {f0_pearson(contour, contour).r}")
