"""F0 tracking, per-utterance log-F0 normalization and the F0 correlation metric."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import signal

from progre.audio import Waveform

PITCH_WIN = 400  # integration window, 25 ms
PREFILTER_HZ = 1000.0  # low-pass applied before the difference function
DIP_SLACK = 0.1  # a sub-multiple lag replaces the deepest dip if within this of it
STD_FLOOR = 1e-8


@dataclass
class PitchContour:
    f0: np.ndarray
    voicing: np.ndarray
    hop_ms: float = 20.0

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        self.voicing = np.asarray(self.voicing, dtype=bool)
        if self.f0.shape != self.voicing.shape:
            raise ValueError("f0 and voicing must have the same length")
        if np.any((self.f0 != 0) != self.voicing):
            raise ValueError("f0 must be nonzero exactly on voiced frames")

    @classmethod
    def from_f0(cls, f0, hop_ms: float = 20.0) -> "PitchContour":
        f0 = np.asarray(f0, dtype=np.float64)
        return cls(f0, f0 > 0, hop_ms)

    def __len__(self):
        return self.f0.shape[0]


@dataclass
class NormalizedPitch:
    values: np.ndarray
    voicing: np.ndarray

    def __len__(self):
        return self.values.shape[0]


def _difference_function(segments: np.ndarray, win: int, max_lag: int) -> np.ndarray:
    """d(tau) = sum_{j<win} (x_j - x_{j+tau})^2 for tau = 0..max_lag, per row."""
    n = 1 << int(np.ceil(np.log2(2 * segments.shape[1])))
    spec_full = np.fft.rfft(segments, n=n, axis=1)
    spec_head = np.fft.rfft(segments[:, :win], n=n, axis=1)
    corr = np.fft.irfft(np.conj(spec_head) * spec_full, n=n, axis=1)[:, : max_lag + 1]
    sq = np.concatenate([np.zeros((segments.shape[0], 1)), np.cumsum(segments**2, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    energy_lag = sq[:, lags + win] - sq[:, lags]
    d = energy_lag[:, :1] + energy_lag - 2.0 * corr
    return np.maximum(d, 0.0)


def _vertex(row: np.ndarray, tau: int) -> tuple[float, float]:
    """Parabolic refinement around integer lag ``tau``: (fractional shift, interpolated depth)."""
    a, b, c = row[tau - 1], row[tau], row[tau + 1]
    denom = a - 2.0 * b + c
    if denom <= 0:
        return 0.0, float(b)
    shift = 0.5 * (a - c) / denom
    return float(shift), float(b - 0.25 * (a - c) * shift)


def _period_lag(row: np.ndarray, tau: int, tau_min: int, accept: float) -> int:
    """Smallest lag tau/k (k >= 2, searched +-3%) with a local dip below ``accept``, else tau."""
    for k in range(tau // tau_min, 1, -1):
        centre = tau / k
        lo = max(tau_min, int(np.floor(centre * 0.97)))
        hi = int(np.ceil(centre * 1.03))
        if hi < lo:
            continue
        cand = lo + int(np.argmin(row[lo : hi + 1]))
        is_dip = row[cand] <= row[cand - 1] and row[cand] <= row[cand + 1]
        if is_dip and _vertex(row, cand)[1] < accept:
            return cand
    return tau


def estimate_f0(
    wave: Waveform,
    hop_ms: float = 20.0,
    fmin: float = 50.0,
    fmax: float = 500.0,
    threshold: float = 0.3,
    prefilter_hz: float | None = PREFILTER_HZ,
) -> PitchContour:
    """YIN-style F0 tracker.

    Frame ``t`` analyses samples starting at ``t * hop`` with a 25 ms
    integration window; the frame count ``1 + (N - 400) // hop`` matches the
    conv frontend at the default 20 ms hop. A frame is voiced when the
    cumulative-mean-normalized difference dips below ``threshold`` inside
    the lag band. The period is the deepest dip, moved to the smallest
    integer sub-multiple lag whose dip is nearly as deep (so multiples of
    the period are not reported), and refined by parabolic interpolation.

    The signal is first low-passed at ``prefilter_hz`` (zero phase). Strong
    high harmonics otherwise make the dip at a non-integer period shallow.
    """
    if fmin >= fmax:
        raise ValueError(f"degenerate F0 band: fmin={fmin} >= fmax={fmax}")
    sr = wave.sample_rate
    if fmax >= sr / 4:
        raise ValueError(f"fmax={fmax} must be below a quarter of the sample rate")
    if fmin <= 0:
        raise ValueError("fmin must be positive")
    hop = int(round(hop_ms * sr / 1000.0))
    x = wave.samples.astype(np.float64)
    if prefilter_hz is not None:
        sos = signal.butter(4, prefilter_hz, btype="low", fs=sr, output="sos")
        x = signal.sosfiltfilt(sos, x)
    n_frames = 1 + (len(x) - PITCH_WIN) // hop
    tau_min = max(2, int(np.floor(sr / fmax)))
    tau_max = int(np.ceil(sr / fmin))
    span = PITCH_WIN + tau_max + 1
    padded = np.concatenate([x, np.zeros(span)])
    idx = np.arange(span)[None, :] + hop * np.arange(n_frames)[:, None]
    segments = padded[idx]

    d = _difference_function(segments, PITCH_WIN, tau_max + 1)
    cum = np.cumsum(d[:, 1:], axis=1)
    lags = np.arange(1, d.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        cmnd = np.where(cum > 0, d[:, 1:] * lags / cum, 1.0)
    cmnd = np.concatenate([np.ones((n_frames, 1)), cmnd], axis=1)

    energy = np.sum(segments[:, :PITCH_WIN] ** 2, axis=1)
    f0 = np.zeros(n_frames)
    for t in range(n_frames):
        if energy[t] < 1e-10:
            continue
        row = cmnd[t]
        band = row[tau_min : tau_max + 1]
        best = int(np.argmin(band))
        if band[best] >= threshold:
            continue
        tau = tau_min + best
        tau = _period_lag(row, tau, tau_min, _vertex(row, tau)[1] + DIP_SLACK)
        shift, _ = _vertex(row, tau)
        freq = sr / (tau + shift)
        if fmin <= freq <= fmax:
            f0[t] = freq
    return PitchContour(f0, f0 > 0, hop_ms)


def log_normalize(contour: PitchContour) -> NormalizedPitch:
    """Z-score log F0 over voiced frames; unvoiced frames become 0.

    Uses the population std floored at 1e-8, so a constant contour maps to zeros.
    """
    voiced = contour.voicing
    values = np.zeros(len(contour))
    if voiced.any():
        logf = np.log(contour.f0[voiced])
        std = max(float(np.std(logf)), STD_FLOOR)
        values[voiced] = (logf - logf.mean()) / std
    return NormalizedPitch(values, voiced.copy())


def reconcile_length(pitch: NormalizedPitch, num_frames: int) -> NormalizedPitch:
    """Truncate to ``num_frames``; a short contour is extended with unvoiced zeros."""
    n = len(pitch)
    if n >= num_frames:
        return NormalizedPitch(pitch.values[:num_frames].copy(), pitch.voicing[:num_frames].copy())
    pad = num_frames - n
    return NormalizedPitch(
        np.concatenate([pitch.values, np.zeros(pad)]),
        np.concatenate([pitch.voicing, np.zeros(pad, dtype=bool)]),
    )


class PearsonResult(NamedTuple):
    r: float
    degenerate: bool


def f0_pearson(a: PitchContour, b: PitchContour) -> PearsonResult:
    """Pearson correlation of F0 over frames voiced in both contours."""
    if len(a) != len(b):
        raise ValueError(f"contour length mismatch: {len(a)} vs {len(b)}")
    both = a.voicing & b.voicing
    if both.sum() < 2:
        return PearsonResult(0.0, True)
    x = a.f0[both] - a.f0[both].mean()
    y = b.f0[both] - b.f0[both].mean()
    denom = np.sqrt(np.dot(x, x) * np.dot(y, y))
    if denom == 0:
        return PearsonResult(0.0, True)
    return PearsonResult(float(np.clip(np.dot(x, y) / denom, -1.0, 1.0)), False)
