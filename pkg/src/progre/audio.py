"""Waveform ingestion, the convolutional frame frontend and MFCC features."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.fft import dct
from scipy.io import wavfile
from torch import nn

SAMPLE_RATE = 16000
MIN_SAMPLES = 400

# MFCC constants: 25 ms window, 20 ms hop to line up with the frontend stride.
MFCC_WIN = 400
MFCC_HOP = 320
MFCC_NFFT = 512
MFCC_NMELS = 26
MFCC_NCEPS = 13
LOG_FLOOR = 1e-10
DELTA_WIDTH = 2


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise AudioError(f"unsupported channel count: expected mono 1-D samples, got shape {samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"unsupported sample rate {self.sample_rate} Hz (resample to {SAMPLE_RATE} upstream)")
        if samples.shape[0] < MIN_SAMPLES:
            raise AudioError(f"waveform has {samples.shape[0]} samples, need at least {MIN_SAMPLES}")
        if not np.all(np.isfinite(samples)):
            raise AudioError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def load_waveform(path: str | os.PathLike) -> Waveform:
    """Read a mono 16 kHz PCM16 or float32 WAV file.

    PCM16 is scaled by 1/32768. No resampling or downmixing is done.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"audio file not found: {path}")
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise AudioError(f"unsupported channel count: {data.shape[1]} (mono required)")
    if rate != SAMPLE_RATE:
        raise AudioError(f"unsupported sample rate {rate} Hz in {path} (resample to {SAMPLE_RATE} upstream)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported sample format {data.dtype} (PCM16 or float32 only)")
    return Waveform(samples, rate)


def wav_bytes(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> bytes:
    """Encode samples in [-1, 1] as PCM16 WAV bytes."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    wavfile.write(buf, sample_rate, pcm)
    return buf.getvalue()


# ---------------------------------------------------------------- frontend


@dataclass(frozen=True)
class FrontendParams:
    channels: tuple[int, ...] = (512,) * 7
    kernels: tuple[int, ...] = (10, 3, 3, 3, 3, 2, 2)
    strides: tuple[int, ...] = (5, 2, 2, 2, 2, 2, 2)
    conv_bias: bool = False
    norm_eps: float = 1e-5

    def __post_init__(self):
        if not (len(self.channels) == len(self.kernels) == len(self.strides)):
            raise ValueError("channels, kernels and strides must have the same length")

    @property
    def hop(self) -> int:
        return int(np.prod(self.strides))

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in zip(self.kernels, self.strides):
            rf += (k - 1) * jump
            jump *= s
        return rf


def conv_output_length(n_samples: int, params: FrontendParams = FrontendParams()) -> int:
    """Frame count after the valid-convolution stack (0 if the input is too short)."""
    length = n_samples
    for k, s in zip(params.kernels, params.strides):
        if length < k:
            return 0
        length = (length - k) // s + 1
    return length


@dataclass
class FrameFeatures:
    values: np.ndarray  # T x D
    frame_stride_ms: float = 20.0

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


class ConvFrontend(nn.Module):
    """Seven valid 1-D convolutions with GELU, then a projection to the model width.

    The first layer is followed by a per-frame layer norm over channels. The
    output of the final conv layer is layer-normalized and projected to
    ``out_dim``; that projected matrix is the frame feature sequence.
    """

    def __init__(self, params: FrontendParams, out_dim: int):
        super().__init__()
        self.params = params
        convs = []
        in_ch = 1
        for ch, k, s in zip(params.channels, params.kernels, params.strides):
            convs.append(nn.Conv1d(in_ch, ch, k, stride=s, bias=params.conv_bias))
            in_ch = ch
        self.convs = nn.ModuleList(convs)
        self.first_norm = nn.LayerNorm(params.channels[0], eps=params.norm_eps)
        self.out_norm = nn.LayerNorm(in_ch, eps=params.norm_eps)
        self.proj = nn.Linear(in_ch, out_dim)
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight)

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        """(B, N) samples -> (B, T, out_dim)."""
        if wav.shape[-1] < self.params.receptive_field:
            raise AudioError(
                f"input of {wav.shape[-1]} samples is shorter than the frontend receptive field "
                f"({self.params.receptive_field}); pad or reject upstream"
            )
        h = wav.unsqueeze(1)
        for idx, conv in enumerate(self.convs):
            h = conv(h)
            if idx == 0:
                h = self.first_norm(h.transpose(1, 2)).transpose(1, 2)
            h = nn.functional.gelu(h)
        h = self.out_norm(h.transpose(1, 2))
        return self.proj(h)


def conv_frontend(wave: Waveform, frontend: ConvFrontend) -> FrameFeatures:
    """Run ``frontend`` on one waveform without gradient tracking."""
    dtype = next(frontend.parameters()).dtype
    with torch.no_grad():
        x = torch.as_tensor(wave.samples, dtype=dtype).unsqueeze(0)
        out = frontend(x)[0]
    return FrameFeatures(out.numpy(), 1000.0 * frontend.params.hop / wave.sample_rate)


# -------------------------------------------------------------------- MFCC


@dataclass
class MfccFeatures:
    values: np.ndarray  # T_m x 39
    hop_ms: float = field(default=1000.0 * MFCC_HOP / SAMPLE_RATE)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = MFCC_NMELS, n_fft: int = MFCC_NFFT, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sr / 2 if fmax is None else fmax
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def deltas(feats: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression deltas over +-``width`` frames with edge frames replicated."""
    padded = np.pad(feats, ((width, width), (0, 0)), mode="edge")
    T = feats.shape[0]
    num = np.zeros_like(feats, dtype=np.float64)
    for n in range(1, width + 1):
        num += n * (padded[width + n : width + n + T] - padded[width - n : width - n + T])
    return num / (2.0 * sum(n * n for n in range(1, width + 1)))


def compute_mfcc(wave: Waveform) -> MfccFeatures:
    """13 cepstra (c0 included) plus delta and delta-delta: T_m x 39."""
    frames = frame_signal(wave.samples.astype(np.float64), MFCC_WIN, MFCC_HOP)
    frames = frames * np.hamming(MFCC_WIN)[None, :]
    power = np.abs(np.fft.rfft(frames, n=MFCC_NFFT, axis=1)) ** 2
    mel = power @ mel_filterbank().T
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    ceps = dct(logmel, type=2, axis=1, norm="ortho")[:, :MFCC_NCEPS]
    d1 = deltas(ceps)
    d2 = deltas(d1)
    return MfccFeatures(np.concatenate([ceps, d1, d2], axis=1))
