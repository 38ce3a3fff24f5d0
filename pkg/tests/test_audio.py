import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from progre.audio import (
    AudioError,
    ConvFrontend,
    FrontendParams,
    Waveform,
    compute_mfcc,
    conv_frontend,
    conv_output_length,
    deltas,
    load_waveform,
)


def _recurrence(n, kernels=(10, 3, 3, 3, 3, 2, 2), strides=(5, 2, 2, 2, 2, 2, 2)):
    for k, s in zip(kernels, strides):
        n = math.floor((n - k) / s) + 1
    return n


# ------------------------------------------------------------------ loading


def test_silence_wav_loads_as_zeros(tmp_path):
    wavfile.write(tmp_path / "s.wav", 16000, np.zeros(16000, dtype=np.int16))
    w = load_waveform(tmp_path / "s.wav")
    assert len(w) == 16000 and w.sample_rate == 16000
    assert np.all(w.samples == 0)


def test_stereo_rejected(tmp_path):
    wavfile.write(tmp_path / "st.wav", 16000, np.zeros((16000, 2), dtype=np.int16))
    with pytest.raises(AudioError, match="unsupported channel count"):
        load_waveform(tmp_path / "st.wav")


def test_wrong_rate_rejected(tmp_path):
    wavfile.write(tmp_path / "r.wav", 22050, np.zeros(22050, dtype=np.int16))
    with pytest.raises(AudioError, match="sample rate"):
        load_waveform(tmp_path / "r.wav")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_waveform(tmp_path / "nope.wav")


def test_pcm16_square_wave_decodes_bit_exact(tmp_path):
    period = 80
    pcm = np.where((np.arange(1600) % period) < period // 2, 32767, -32768).astype(np.int16)
    wavfile.write(tmp_path / "sq.wav", 16000, pcm)
    w = load_waveform(tmp_path / "sq.wav")
    high = (np.arange(1600) % period) < period // 2
    assert np.all(w.samples[high] == 32767 / 32768)
    assert np.all(w.samples[~high] == -1.0)


def test_float32_wav(tmp_path):
    x = np.linspace(-1, 1, 800, dtype=np.float32)
    wavfile.write(tmp_path / "f.wav", 16000, x)
    np.testing.assert_array_equal(load_waveform(tmp_path / "f.wav").samples, x.astype(np.float64))


def test_waveform_invariants():
    with pytest.raises(AudioError):
        Waveform(np.zeros(399))
    with pytest.raises(AudioError):
        Waveform(np.full(400, np.nan))


# ----------------------------------------------------------------- frontend


def test_one_second_gives_49_frames():
    assert conv_output_length(16000) == 49
    lengths = [16000]
    for k, s in zip(FrontendParams().kernels, FrontendParams().strides):
        lengths.append((lengths[-1] - k) // s + 1)
    assert lengths[1:] == [3199, 1599, 799, 399, 199, 99, 49]


def test_downsampling_is_20ms():
    p = FrontendParams()
    assert p.hop == 320
    assert 1000 * p.hop / 16000 == 20.0
    assert p.receptive_field == 400


def test_frame_count_formula_exhaustive():
    frontend = ConvFrontend(FrontendParams(channels=(2,) * 7), out_dim=2).double()
    lengths = np.arange(400, 4001)
    with torch.no_grad():
        for n in lengths:
            T = frontend(torch.zeros(1, int(n), dtype=torch.float64)).shape[1]
            assert T == _recurrence(int(n)) == conv_output_length(int(n)), n


def test_too_short_input_rejected():
    frontend = ConvFrontend(FrontendParams(channels=(2,) * 7), out_dim=2)
    with pytest.raises(AudioError):
        frontend(torch.zeros(1, 399))


def test_zero_input_gives_zero_output():
    frontend = ConvFrontend(FrontendParams(channels=(8,) * 7), out_dim=6).double()
    torch.nn.init.zeros_(frontend.proj.bias)
    out = conv_frontend(Waveform(np.zeros(16000)), frontend)
    assert out.values.shape == (49, 6)
    assert out.frame_stride_ms == 20.0
    assert np.all(out.values == 0)


def test_time_shift_by_one_hop_shifts_one_frame(rng):
    torch.manual_seed(0)
    frontend = ConvFrontend(FrontendParams(channels=(8,) * 7), out_dim=6).double()
    x = rng.standard_normal(16000 + 320) * 0.3
    a = conv_frontend(Waveform(x[320:]), frontend).values
    b = conv_frontend(Waveform(x), frontend).values
    np.testing.assert_allclose(a, b[1 : 1 + a.shape[0]], atol=1e-6)


# --------------------------------------------------------------------- MFCC


def _mfcc_oracle(x):
    """Independent MFCC: explicit DFT, per-filter loops, cosine-sum DCT, loop deltas."""
    win, hop, nfft, nmels, nceps, sr = 400, 320, 512, 26, 13, 16000
    n_frames = 1 + (len(x) - win) // hop
    hamming = np.array([0.54 - 0.46 * math.cos(2 * math.pi * i / (win - 1)) for i in range(win)])
    k = np.arange(nfft // 2 + 1)[:, None]
    basis = np.exp(-2j * math.pi * k * np.arange(win)[None, :] / nfft)
    mel = lambda f: 2595 * math.log10(1 + f / 700)
    imel = lambda m: 700 * (10 ** (m / 2595) - 1)
    edges = [imel(mel(8000) * i / (nmels + 1)) for i in range(nmels + 2)]
    freqs = np.arange(nfft // 2 + 1) * sr / nfft
    ceps = np.zeros((n_frames, nceps))
    for t in range(n_frames):
        frame = x[t * hop : t * hop + win] * hamming
        power = np.abs(basis @ frame) ** 2
        logmel = []
        for m in range(nmels):
            lo, c, hi = edges[m : m + 3]
            w = np.array([max(0.0, min((f - lo) / (c - lo), (hi - f) / (hi - c))) for f in freqs])
            logmel.append(math.log(max(float(w @ power), 1e-10)))
        for q in range(nceps):
            scale = math.sqrt(1 / nmels) if q == 0 else math.sqrt(2 / nmels)
            ceps[t, q] = scale * sum(logmel[m] * math.cos(math.pi * q * (2 * m + 1) / (2 * nmels)) for m in range(nmels))

    def delta(c):
        out = np.zeros_like(c)
        T = len(c)
        for t in range(T):
            acc = 0.0
            for n in (1, 2):
                acc = acc + n * (c[min(t + n, T - 1)] - c[max(t - n, 0)])
            out[t] = acc / 10.0
        return out

    d1 = delta(ceps)
    return np.hstack([ceps, d1, delta(d1)])


def _tone(freq, n=8000):
    return 0.5 * np.sin(2 * np.pi * freq * np.arange(n) / 16000)


def test_mfcc_matches_independent_oracle():
    x = _tone(1000) + 0.1 * np.random.default_rng(3).standard_normal(8000)
    ours = compute_mfcc(Waveform(x)).values
    np.testing.assert_allclose(ours, _mfcc_oracle(x), rtol=1e-7, atol=1e-7)


def test_mfcc_has_39_columns_and_distinguishes_tones():
    a = compute_mfcc(Waveform(_tone(1000))).values
    b = compute_mfcc(Waveform(_tone(4000))).values
    assert a.shape[1] == 39 == b.shape[1]
    assert np.linalg.norm(a[:, :13] - b[:, :13]) > 0
    assert np.linalg.norm(_mfcc_oracle(_tone(1000))[:, :13] - _mfcc_oracle(_tone(4000))[:, :13]) > 0


def test_mfcc_of_silence_has_zero_deltas():
    m = compute_mfcc(Waveform(np.zeros(16000))).values
    assert m.shape == (49, 39)
    assert np.all(m[:, 13:] == 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.lists(st.floats(-50, 50), min_size=1, max_size=13))
def test_delta_of_constant_sequence_is_zero(T, row):
    feats = np.tile(np.array(row), (T, 1))
    assert np.all(deltas(feats) == 0.0)
