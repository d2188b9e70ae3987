import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sblm import dsp
from sblm.dsp import AudioBuffer, DspConfig, MelSpectrogram
from sblm.errors import (DomainError, FormatError, ShapeError, TooShortError,
                         UnsupportedFormatError, ValidationError)

CFG = DspConfig()
SR = CFG.sample_rate


def sine(freq=440.0, seconds=1.0, amp=1.0):
    t = np.arange(int(SR * seconds)) / SR
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), SR)


def write_pcm(path, data, width=2, channels=1, rate=SR):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(data)


# ---------------------------------------------------------------- config / types

def test_config_rejects_bad_values():
    with pytest.raises(ValidationError):
        DspConfig(hop=2048)
    with pytest.raises(ValidationError):
        DspConfig(fmax=12000.0)
    with pytest.raises(ValidationError):
        DspConfig(mel_bins=1)


def test_audio_buffer_rejects_nan():
    with pytest.raises(ValidationError):
        AudioBuffer(np.array([0.0, np.nan]))


def test_config_id_tracks_parameters():
    assert DspConfig().config_id == DspConfig().config_id
    assert DspConfig(hop=256).config_id != DspConfig().config_id


# ---------------------------------------------------------------- load_wav

def test_load_wav_scaling(tmp_path):
    p = tmp_path / "a.wav"
    write_pcm(p, np.array([0, 16384, -32768], dtype="<i2").tobytes())
    a = dsp.load_wav(p)
    assert a.sample_rate == SR
    np.testing.assert_array_equal(a.samples, [0.0, 0.5, -1.0])


def test_load_wav_empty_is_valid(tmp_path):
    p = tmp_path / "e.wav"
    write_pcm(p, b"")
    assert len(dsp.load_wav(p)) == 0


def test_load_wav_8bit_unsupported(tmp_path):
    p = tmp_path / "b.wav"
    write_pcm(p, b"", width=1)
    assert p.stat().st_size == 44
    with pytest.raises(UnsupportedFormatError):
        dsp.load_wav(p)


def test_load_wav_stereo_unsupported(tmp_path):
    p = tmp_path / "s.wav"
    write_pcm(p, np.zeros(4, dtype="<i2").tobytes(), channels=2)
    with pytest.raises(UnsupportedFormatError):
        dsp.load_wav(p)


def test_load_wav_garbage(tmp_path):
    p = tmp_path / "g.wav"
    p.write_bytes(b"not a riff file at all")
    with pytest.raises(FormatError):
        dsp.load_wav(p)


def test_wav_round_trip(tmp_path):
    a = sine(seconds=0.1, amp=0.5)
    dsp.write_wav(tmp_path / "r.wav", a)
    b = dsp.load_wav(tmp_path / "r.wav")
    assert np.max(np.abs(a.samples - b.samples)) <= 1 / 32768


# ---------------------------------------------------------------- mel scale

def test_mel_scale_values():
    assert dsp.mel_scale(0) == 0.0
    assert dsp.mel_scale(700) == pytest.approx(2595 * math.log10(2), abs=1e-9)
    assert dsp.mel_scale(700) == pytest.approx(781.17, abs=0.01)
    # frozen from an independent evaluation: 2595 * log10(1 + 8000/700)
    assert dsp.mel_scale(8000) == pytest.approx(2840.0230, abs=1e-3)


def test_mel_scale_negative():
    with pytest.raises(DomainError):
        dsp.mel_scale(-1.0)


@given(st.floats(0, 11025), st.floats(0, 11025))
def test_mel_scale_monotone(a, b):
    if a < b:
        assert dsp.mel_scale(a) <= dsp.mel_scale(b)
    if b - a > 1e-6:
        assert dsp.mel_scale(a) < dsp.mel_scale(b)


def test_mel_hz_inverse():
    f = np.linspace(0, 8000, 50)
    np.testing.assert_allclose(dsp.mel_to_hz(dsp.mel_scale(f)), f, atol=1e-9)


def test_filterbank_shape_and_support():
    fb = dsp.mel_filterbank(CFG)
    assert fb.shape == (80, 513)
    assert np.all(fb >= 0)
    supports = []
    for row in fb:
        nz = np.flatnonzero(row > 0)
        assert len(nz) >= 1
        assert np.all(np.diff(nz) == 1)  # contiguous
        peak = int(np.argmax(row))
        assert np.all(np.diff(row[nz[0]:peak + 1]) >= 0)
        assert np.all(np.diff(row[peak:nz[-1] + 1]) <= 0)
        supports.append((nz[0], nz[-1]))
    for (a0, a1), (b0, b1) in zip(supports, supports[1:]):
        assert b0 <= a1  # neighbours overlap


# ---------------------------------------------------------------- melspectrogram

def test_silence_hits_floor():
    mel = dsp.melspectrogram(AudioBuffer(np.zeros(SR)), CFG)
    assert mel.frames.shape == (165, 80)
    np.testing.assert_allclose(mel.frames, math.log(1e-5))
    assert mel.frames[0, 0] == pytest.approx(-11.5129, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1024, 6000), st.sampled_from([(256, 64), (512, 128), (1024, 128), (1024, 1024)]))
def test_frame_count_formula(n, shape):
    fft, hop = shape
    cfg = DspConfig(fft_size=fft, hop=hop)
    mel = dsp.melspectrogram(AudioBuffer(np.zeros(n)), cfg)
    assert mel.n_frames == (n - fft) // hop + 1


def test_too_short():
    with pytest.raises(TooShortError):
        dsp.melspectrogram(AudioBuffer(np.zeros(1023)), CFG)


def test_sample_rate_mismatch():
    with pytest.raises(ValidationError):
        dsp.melspectrogram(AudioBuffer(np.zeros(4096), 16000), CFG)


def test_sinusoid_argmax_matches_direct_dft():
    mel = dsp.melspectrogram(sine(), CFG)
    arg = np.argmax(mel.frames, axis=1)
    assert np.all(arg == arg[0])
    # oracle: direct O(N^2) DFT of one Hann-windowed frame, then the filterbank
    x = sine().samples[:1024]
    n = np.arange(1024)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / 1024)
    k = np.arange(513)[:, None]
    X = np.sum(x * w * np.exp(-2j * np.pi * k * n / 1024), axis=1)
    oracle = np.log(np.maximum(dsp.mel_filterbank(CFG) @ np.abs(X) ** 2, 1e-5))
    np.testing.assert_allclose(mel.frames[0], oracle, atol=1e-8)
    assert arg[0] == int(np.argmax(oracle))
    centres = dsp.mel_scale(dsp.mel_centers(CFG))
    assert arg[0] == int(np.argmin(np.abs(centres - dsp.mel_scale(440.0))))


def test_amplitude_covariance():
    a = dsp.melspectrogram(sine(amp=0.25), CFG).frames
    b = dsp.melspectrogram(sine(amp=0.5), CFG).frames
    floor = math.log(1e-5)
    above = (a > floor + 1e-9) & (b > floor + 1e-9)
    assert above.sum() > 1000
    np.testing.assert_allclose(b[above] - a[above], 2 * math.log(2), atol=1e-9)


def test_every_entry_at_least_floor(rng):
    mel = dsp.melspectrogram(AudioBuffer(rng.normal(0, 0.1, 4000)), CFG)
    assert np.all(mel.frames >= math.log(1e-5))


# ---------------------------------------------------------------- stft / griffin-lim

def test_istft_inverts_stft(rng):
    x = rng.normal(size=4096)
    y = dsp.istft(dsp.stft(x, CFG), CFG)
    # samples covered by at least two windows are reconstructed exactly
    np.testing.assert_allclose(y[128:-128], x[128:len(y) - 128], atol=1e-10)


def test_griffin_lim_error_non_increasing():
    mag = np.abs(dsp.stft(sine(seconds=0.5).samples, CFG))
    _, errors = dsp.phase_reconstruct(mag, CFG, n_iter=60)
    assert len(errors) == 60
    assert all(b <= a + 1e-9 * a for a, b in zip(errors, errors[1:]))


def test_griffin_lim_peak_frequency():
    mel = dsp.melspectrogram(sine(), CFG)
    audio = dsp.griffin_lim(mel, CFG)
    assert np.max(np.abs(audio.samples)) == pytest.approx(0.95)
    spec = np.abs(np.fft.rfft(audio.samples))
    freqs = np.fft.rfftfreq(len(audio.samples), 1 / SR)
    assert abs(freqs[np.argmax(spec)] - 440.0) <= SR / CFG.fft_size


def test_griffin_lim_silence_is_quiet():
    mel = MelSpectrogram(np.full((20, 80), math.log(1e-5)))
    audio = dsp.griffin_lim(mel, CFG, normalize=False)
    assert np.sqrt(np.mean(audio.samples ** 2)) < 1e-3


def test_griffin_lim_one_frame_length():
    mel = MelSpectrogram(np.zeros((1, 80)))
    assert len(dsp.griffin_lim(mel, CFG)) == 1024


def test_griffin_lim_shape_mismatch():
    with pytest.raises(ShapeError):
        dsp.griffin_lim(MelSpectrogram(np.zeros((3, 40))), CFG)


# ---------------------------------------------------------------- cepstrum

def naive_dct(x):
    M = len(x)
    m = np.arange(M)
    out = np.array([np.sum(x * np.cos(np.pi * (m + 0.5) * k / M)) for k in range(M)])
    scale = np.full(M, math.sqrt(2 / M))
    scale[0] = math.sqrt(1 / M)
    return out * scale


def test_cepstrum_constant_frame():
    c = dsp.mel_cepstrum(MelSpectrogram(np.full((2, 80), -3.0)))
    assert c.shape == (2, 13)
    np.testing.assert_allclose(c, 0.0, atol=1e-12)


def test_cepstrum_single_cosine():
    m = np.arange(80)
    c = dsp.mel_cepstrum(MelSpectrogram(np.cos(np.pi * (m + 0.5) / 80)[None, :]))
    assert abs(c[0, 0]) > 1
    np.testing.assert_allclose(c[0, 1:], 0.0, atol=1e-12)


def test_cepstrum_matches_naive_dct(rng):
    frame = rng.normal(size=80)
    full = naive_dct(frame)
    np.testing.assert_allclose(dsp.mel_cepstrum(MelSpectrogram(frame[None, :]))[0], full[1:14], atol=1e-9)
    # Parseval: the orthonormal transform keeps the energy
    assert np.sum(full ** 2) == pytest.approx(np.sum(frame ** 2), abs=1e-9)


def test_cepstrum_bad_order():
    with pytest.raises(ValidationError):
        dsp.mel_cepstrum(MelSpectrogram(np.zeros((1, 80))), n_coeffs=80)


# ---------------------------------------------------------------- mels files

def test_mels_round_trip(tmp_path, rng):
    mel = MelSpectrogram(rng.normal(size=(7, 80)).astype(np.float32), 0.01)
    dsp.write_mels(tmp_path / "x.mels", mel)
    raw = (tmp_path / "x.mels").read_bytes()
    assert raw[:4] == b"MELS" and len(raw) == 4 + 20 + 7 * 80 * 4
    back = dsp.read_mels(tmp_path / "x.mels")
    np.testing.assert_array_equal(back.frames, mel.frames)
    assert back.hop_seconds == 0.01


def test_mels_truncated(tmp_path):
    dsp.write_mels(tmp_path / "x.mels", MelSpectrogram(np.zeros((3, 80))))
    raw = (tmp_path / "x.mels").read_bytes()
    (tmp_path / "x.mels").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        dsp.read_mels(tmp_path / "x.mels")
    (tmp_path / "y.mels").write_bytes(b"JUNK" + raw[4:])
    with pytest.raises(FormatError):
        dsp.read_mels(tmp_path / "y.mels")
