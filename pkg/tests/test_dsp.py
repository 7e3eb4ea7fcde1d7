import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbpfusion.dsp import (
    SpectrogramConfig, encode_wav, hamming_window, parse_wav, read_wav, spectrogram, write_wav,
    dump_spectrogram_csv,
)
from fbpfusion.errors import DimensionError, FormatError, InputError

CFG = SpectrogramConfig()


def direct_dft_magnitude(frame, bins):
    n = len(frame)
    out = np.zeros(bins)
    for f in range(bins):
        re = im = 0.0
        for i in range(n):
            ang = 2 * np.pi * f * i / n
            re += frame[i] * np.cos(ang)
            im -= frame[i] * np.sin(ang)
        out[f] = np.hypot(re, im)
    return out


def test_hamming_examples():
    np.testing.assert_allclose(hamming_window(3), [0.08, 1.0, 0.08], atol=1e-15)
    w = hamming_window(640)
    assert w[0] == pytest.approx(0.08) and w[-1] == pytest.approx(0.08)
    assert abs(w.sum() - 345.6) < 0.5
    with pytest.raises(DimensionError):
        hamming_window(1)


@given(st.integers(2, 2000))
def test_hamming_symmetric(n):
    w = hamming_window(n)
    np.testing.assert_allclose(w, w[::-1], atol=1e-12)


def test_config_validation():
    assert CFG.window_len == 640 and CFG.shift_len == 160
    with pytest.raises(ValueError):
        SpectrogramConfig(window_ms=5, shift_ms=10)
    with pytest.raises(ValueError):
        SpectrogramConfig(low_bins=321)


def test_one_second_frame_count():
    spec = spectrogram(np.zeros(16000))
    assert spec.bins.shape == (200, 97)
    assert np.all(spec.bins == 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(640, 6000))
def test_frame_count_formula(n):
    assert spectrogram(np.ones(n)).bins.shape[1] == (n - 640) // 160 + 1


def test_short_wave_rejected():
    with pytest.raises(InputError):
        spectrogram(np.zeros(639))


def test_sine_peaks_at_bin_40():
    t = np.arange(16000) / 16000
    spec = spectrogram(np.sin(2 * np.pi * 1000 * t)).bins
    assert np.all(spec.argmax(axis=0) == 40)


def test_matches_direct_dft_oracle():
    rng = np.random.default_rng(0)
    wave = rng.standard_normal(640 + 160)
    spec = spectrogram(wave).bins
    w = hamming_window(640)
    for j in range(2):
        frame = wave[j * 160 : j * 160 + 640] * w
        np.testing.assert_allclose(spec[:, j], direct_dft_magnitude(frame, 200), atol=1e-9)


def test_peak_energy_concentration():
    t = np.arange(8000) / 16000
    spec = spectrogram(np.sin(2 * np.pi * 1500 * t)).bins  # bin 60 exactly
    energy = spec**2
    near = energy[59:62].sum(axis=0)
    assert np.all(near / energy.sum(axis=0) >= 0.9)


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 1000))
def test_linearity_in_scale(c, seed):
    x = np.random.default_rng(seed).standard_normal(1200)
    np.testing.assert_allclose(spectrogram(c * x).bins, abs(c) * spectrogram(x).bins, atol=1e-10, rtol=1e-12)


# ---------------------------------------------------------------- WAV


def test_read_minimal_wav(tmp_path):
    payload = struct.pack("<4h", 0, 16384, -16384, 32767)
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 16000, 32000, 2, 16)
    path = tmp_path / "a.wav"
    path.write_bytes(header + fmt + b"data" + struct.pack("<I", len(payload)) + payload)
    wave, rate = read_wav(path)
    assert rate == 16000
    np.testing.assert_allclose(wave, [0, 0.5, -0.5, 32767 / 32768])


def _wav_with(channels=1, fmt_code=1, bits=16, payload=b"\x00\x00" * 4):
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, fmt_code, channels, 16000, 32000 * channels, 2 * channels, bits)
    return header + fmt + b"data" + struct.pack("<I", len(payload)) + payload


@pytest.mark.parametrize("kwargs, field", [
    ({"channels": 2}, "channels"),
    ({"fmt_code": 3}, "audio_format"),
    ({"bits": 8}, "bits_per_sample"),
])
def test_bad_wav_fields(kwargs, field):
    with pytest.raises(FormatError, match=field):
        parse_wav(_wav_with(**kwargs))


def test_truncated_wav():
    buf = _wav_with()
    with pytest.raises(FormatError, match="truncated"):
        parse_wav(buf[:-3])
    with pytest.raises(FormatError):
        parse_wav(b"RIFX" + buf[4:])


def test_wav_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(1)
    pcm = rng.integers(-32768, 32768, 500).astype("<i2")
    path = tmp_path / "x.wav"
    write_wav(path, pcm / 32768.0, 16000)
    wave, rate = read_wav(path)
    again = tmp_path / "y.wav"
    write_wav(again, wave, rate)
    assert path.read_bytes() == again.read_bytes()
    assert encode_wav(wave, rate)[44:] == pcm.tobytes()


def test_spectrogram_csv_dump(tmp_path):
    spec = spectrogram(np.random.default_rng(2).standard_normal(1000))
    dump_spectrogram_csv(spec, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 201
    assert len(lines[1].split(",")) == 1 + spec.bins.shape[1]
