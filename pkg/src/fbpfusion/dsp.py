"""Waveform to low-frequency magnitude spectrogram, plus 16-bit PCM WAV I/O."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Tuple

import numpy as np

from fbpfusion.errors import DimensionError, FormatError, InputError


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = 16000
    window_ms: float = 40.0
    shift_ms: float = 10.0
    low_bins: int = 200

    def __post_init__(self):
        if not self.window_ms >= self.shift_ms > 0:
            raise ValueError(f"need window_ms >= shift_ms > 0, got {self.window_ms}/{self.shift_ms}")
        if self.low_bins < 1 or self.low_bins > self.window_ms * self.sample_rate / 2000:
            raise ValueError(
                f"low_bins={self.low_bins} exceeds the {self.window_ms * self.sample_rate / 2000:g} bins below Nyquist"
            )

    @property
    def window_len(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def shift_len(self) -> int:
        return int(round(self.sample_rate * self.shift_ms / 1000))

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.window_len:
            return 0
        return (num_samples - self.window_len) // self.shift_len + 1


@dataclass
class Spectrogram:
    bins: np.ndarray  # F x T magnitudes
    frame_times: np.ndarray  # T frame start times, seconds

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bins.shape


def hamming_window(n: int) -> np.ndarray:
    """Symmetric Hamming window ``0.54 - 0.46 cos(2 pi i / (n - 1))``."""
    if n < 2:
        raise DimensionError(f"hamming window needs n >= 2, got {n}")
    i = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * i / (n - 1))


@lru_cache(maxsize=8)
def _dft_basis(n: int, bins: int) -> Tuple[np.ndarray, np.ndarray]:
    # direct DFT sum as a matrix: X[f] = sum_i x[i] exp(-2 pi j f i / n)
    phase = 2.0 * np.pi * np.outer(np.arange(n), np.arange(bins)) / n
    return np.cos(phase), -np.sin(phase)


def frame_signal(wave: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    """T x window_len matrix of overlapping frames."""
    n_frames = cfg.num_frames(len(wave))
    idx = np.arange(cfg.window_len)[None, :] + cfg.shift_len * np.arange(n_frames)[:, None]
    return wave[idx]


def spectrogram(wave, cfg: SpectrogramConfig = SpectrogramConfig()) -> Spectrogram:
    wave = np.asarray(wave, dtype=np.float64).ravel()
    if len(wave) < cfg.window_len:
        raise InputError(f"waveform has {len(wave)} samples, shorter than one {cfg.window_len}-sample window")
    frames = frame_signal(wave, cfg) * hamming_window(cfg.window_len)
    cos_b, sin_b = _dft_basis(cfg.window_len, cfg.low_bins)
    mag = np.hypot(frames @ cos_b, frames @ sin_b)
    times = np.arange(frames.shape[0]) * cfg.shift_len / cfg.sample_rate
    return Spectrogram(bins=mag.T, frame_times=times)


def dump_spectrogram_csv(spec: Spectrogram, path) -> None:
    """One row per frequency bin, one column per frame."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin"] + [f"{t:.3f}" for t in spec.frame_times])
        for f, row in enumerate(spec.bins):
            w.writerow([f] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------- WAV


def _chunks(buf: bytes):
    pos = 12
    while pos + 8 <= len(buf):
        cid = buf[pos : pos + 4]
        (size,) = struct.unpack("<I", buf[pos + 4 : pos + 8])
        yield cid, pos + 8, size
        pos += 8 + size + (size & 1)


def parse_wav(buf: bytes) -> Tuple[np.ndarray, int]:
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE file (bad header magic)")
    fmt = data = None
    for cid, start, size in _chunks(buf):
        if cid == b"fmt ":
            if start + size > len(buf) or size < 16:
                raise FormatError("fmt chunk truncated")
            fmt = struct.unpack("<HHIIHH", buf[start : start + 16])
        elif cid == b"data":
            if start + size > len(buf):
                raise FormatError(f"data chunk truncated: header says {size} bytes, {len(buf) - start} present")
            data = buf[start : start + size]
    if fmt is None:
        raise FormatError("missing fmt chunk")
    if data is None:
        raise FormatError("missing data chunk")
    audio_format, channels, rate, _, block_align, bits = fmt
    if audio_format != 1:
        raise FormatError(f"audio_format={audio_format}: only PCM (1) is supported")
    if channels != 1:
        raise FormatError(f"channels={channels}: only mono is supported")
    if bits != 16:
        raise FormatError(f"bits_per_sample={bits}: only 16-bit is supported")
    if len(data) % 2:
        raise FormatError("data chunk has an odd byte count for 16-bit samples")
    pcm = np.frombuffer(data, dtype="<i2")
    return pcm.astype(np.float64) / 32768.0, rate


def read_wav(path) -> Tuple[np.ndarray, int]:
    """Mono 16-bit PCM WAV to samples in [-1, 1) and the sample rate."""
    return parse_wav(Path(path).read_bytes())


def pcm16(wave) -> np.ndarray:
    return np.clip(np.round(np.asarray(wave, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")


def encode_wav(wave, sample_rate: int) -> bytes:
    payload = pcm16(wave).tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16)
    return header + fmt + b"data" + struct.pack("<I", len(payload)) + payload


def write_wav(path, wave, sample_rate: int) -> None:
    Path(path).write_bytes(encode_wav(wave, sample_rate))


def load_spectrogram(path, cfg: SpectrogramConfig = SpectrogramConfig()) -> Spectrogram:
    wave, rate = read_wav(path)
    if rate != cfg.sample_rate:
        raise InputError(f"{path}: sample rate {rate} Hz, expected {cfg.sample_rate} Hz (no resampling)")
    return spectrogram(wave, cfg)
