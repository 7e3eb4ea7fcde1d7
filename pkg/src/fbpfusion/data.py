"""Dataset files (manifest CSV, FSEQ feature sequences, WAV) and the synthetic generator."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from fbpfusion import EMOTIONS
from fbpfusion.dsp import SpectrogramConfig, load_spectrogram, write_wav
from fbpfusion.errors import FormatError, InputError, LoadError

FSEQ_MAGIC = b"FSEQ"
FSEQ_VERSION = 1
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["sample_id", "wav_path", "feature_path", "label"]

LABEL_INDEX = {name: i for i, name in enumerate(EMOTIONS)}


# ---------------------------------------------------------------- FSEQ


def encode_fseq(frames) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise FormatError(f"feature sequence must be L x C with L >= 1, got shape {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise FormatError("feature sequence contains non-finite values")
    head = FSEQ_MAGIC + struct.pack("<III", FSEQ_VERSION, *frames.shape)
    return head + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def decode_fseq(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise FormatError(f"FSEQ header truncated ({len(buf)} bytes)")
    if buf[:4] != FSEQ_MAGIC:
        raise FormatError(f"bad FSEQ magic {buf[:4]!r}")
    version, n_frames, dim = struct.unpack("<III", buf[4:16])
    if version != FSEQ_VERSION:
        raise FormatError(f"unsupported FSEQ version {version}")
    if n_frames < 1 or dim < 1:
        raise FormatError(f"FSEQ header declares empty shape L={n_frames} C={dim}")
    expected = 4 * n_frames * dim
    if len(buf) - 16 != expected:
        raise FormatError(f"FSEQ payload is {len(buf) - 16} bytes, header L={n_frames} C={dim} needs {expected}")
    frames = np.frombuffer(buf, dtype="<f4", offset=16).reshape(n_frames, dim).astype(np.float64)
    if not np.all(np.isfinite(frames)):
        raise FormatError("FSEQ payload contains non-finite values")
    return frames


def write_feature_file(path, frames) -> None:
    Path(path).write_bytes(encode_fseq(frames))


def read_feature_file(path) -> np.ndarray:
    """L x C float64 matrix from an FSEQ file."""
    return decode_fseq(Path(path).read_bytes())


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    wav_path: Path
    feature_path: Path
    label: str

    @property
    def label_index(self) -> int:
        return LABEL_INDEX[self.label]


@dataclass
class Manifest:
    entries: List[ManifestEntry]
    split: str = "test"
    path: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> List[str]:
        return [e.sample_id for e in self.entries]

    def find(self, sample_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.sample_id == sample_id:
                return e
        raise InputError(f"sample {sample_id!r} not in manifest {self.path}")


def load_manifest(path, split: Optional[str] = None, check_files: bool = True) -> Manifest:
    """Parse and validate a manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"manifest {path} does not exist")
    if split is None:
        split = path.stem if path.stem in SPLITS else "test"
    if split not in SPLITS:
        raise LoadError(f"unknown split {split!r}")
    base = path.parent
    entries: List[ManifestEntry] = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise LoadError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise LoadError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            sid, wav, feat, label = (s.strip() for s in row)
            if label not in LABEL_INDEX:
                raise LoadError(f"{path}:{lineno}: unknown label {label!r}")
            if sid in seen:
                raise LoadError(f"{path}:{lineno}: duplicate sample_id {sid!r}")
            seen.add(sid)
            wav_p, feat_p = base / wav, base / feat
            if check_files:
                for p in (wav_p, feat_p):
                    if not p.exists():
                        raise LoadError(f"{path}:{lineno}: missing file {p}")
            entries.append(ManifestEntry(sid, wav_p, feat_p, label))
    return Manifest(entries, split, path)


def write_manifest(path, rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)


# ---------------------------------------------------------------- in-memory samples


@dataclass
class Sample:
    sample_id: str
    spectrogram: np.ndarray  # F x T
    frames: np.ndarray  # L x C
    label: int


def load_samples(manifest: Manifest, cfg: SpectrogramConfig = SpectrogramConfig()) -> List[Sample]:
    out = []
    dim = None
    for e in manifest.entries:
        frames = read_feature_file(e.feature_path)
        if dim is None:
            dim = frames.shape[1]
        elif frames.shape[1] != dim:
            raise LoadError(f"{e.feature_path}: feature dim {frames.shape[1]}, dataset uses {dim}")
        spec = load_spectrogram(e.wav_path, cfg)
        out.append(Sample(e.sample_id, spec.bins, frames, e.label_index))
    return out


# ---------------------------------------------------------------- synthetic generator


@dataclass
class SyntheticSpec:
    train_samples: int = 70
    val_samples: int = 70
    test_samples: int = 70
    feature_dim: int = 64
    frames_min: int = 8
    frames_max: int = 24
    duration_min: float = 1.0
    duration_max: float = 3.0
    sample_rate: int = 16000
    noise: float = 1.0
    emotion_fraction: float = 0.4
    video_strength: float = 0.4
    audio_strength: float = 1.0
    # per-sample video reliability r is drawn from [min_reliability, 1] (video
    # noise scales by 1/r); audio amplitude gets the mirrored 1 + min - r
    min_reliability: float = 0.25
    video_signal: bool = True
    audio_signal: bool = True
    num_classes: int = len(EMOTIONS)
    seed: int = 0

    def __post_init__(self):
        for split in SPLITS:
            if self.count(split) < 1:
                raise ValueError(f"{split}_samples must be >= 1 (empty datasets are rejected)")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ValueError(f"need 1 <= frames_min <= frames_max, got {self.frames_min}, {self.frames_max}")
        if not 0 < self.duration_min <= self.duration_max:
            raise ValueError("need 0 < duration_min <= duration_max")
        if not 0 < self.emotion_fraction <= 1:
            raise ValueError(f"emotion_fraction must be in (0, 1], got {self.emotion_fraction}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not 0 < self.min_reliability <= 1:
            raise ValueError(f"min_reliability must be in (0, 1], got {self.min_reliability}")
        if not 2 <= self.num_classes <= len(EMOTIONS):
            raise ValueError(f"num_classes must be in [2, {len(EMOTIONS)}]")
        if self.feature_dim < self.num_classes + 2:
            raise ValueError(f"feature_dim must be at least num_classes + 2 = {self.num_classes + 2}")

    def count(self, split: str) -> int:
        return getattr(self, f"{split}_samples")


# spectral layout of the class-specific harmonic complexes (bin = 25 Hz)
_BIN_HZ = 25.0
_BASE_SPACING = 3
_MAX_HARMONIC_HZ = 4500.0
_TONE_AMP = 0.02
_AUDIO_NOISE = 0.004
_MARKER_SCALE = 1.0


@dataclass
class SyntheticSample:
    sample_id: str
    label: int
    wave: np.ndarray
    frames: np.ndarray
    video_segment: tuple  # [start, stop) frame indices carrying class evidence
    audio_segment: tuple  # [start, stop) seconds
    video_reliability: float
    audio_reliability: float


def _class_prototypes(spec: SyntheticSpec) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 9999]))
    q, _ = np.linalg.qr(rng.standard_normal((spec.feature_dim, spec.num_classes + 2)))
    basis = q.T * np.sqrt(spec.feature_dim)  # orthogonal, per-dimension scale ~1
    return {"class": basis[: spec.num_classes], "marker": basis[spec.num_classes], "neutral": basis[-1]}


def harmonic_frequencies(label: int) -> np.ndarray:
    """Class ``label`` uses harmonics of (3 + label) * 25 Hz below 4.5 kHz."""
    f0 = (_BASE_SPACING + label) * _BIN_HZ
    return np.arange(f0, _MAX_HARMONIC_HZ + 1e-9, f0)


def _labels_for_split(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    return labels


def synthesize_split(spec: SyntheticSpec, split: str) -> List[SyntheticSample]:
    """In-memory samples for one split; deterministic in (spec, split)."""
    protos = _class_prototypes(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, SPLITS.index(split)]))
    n = spec.count(split)
    labels = _labels_for_split(n, spec.num_classes, rng)
    out = []
    for i, label in enumerate(labels):
        label = int(label)
        r = rng.uniform(spec.min_reliability, 1.0)
        rel_v, rel_a = r, 1.0 + spec.min_reliability - r

        # video: L frames, a contiguous emotion segment carries class + marker directions
        n_frames = int(rng.integers(spec.frames_min, spec.frames_max + 1))
        seg_len = max(1, int(round(spec.emotion_fraction * n_frames)))
        v0 = int(rng.integers(0, n_frames - seg_len + 1))
        # an unreliable video sample is a noisier one; class amplitude stays fixed
        frames = (spec.noise / rel_v) * rng.standard_normal((n_frames, spec.feature_dim))
        frames += 0.5 * protos["neutral"]
        # marker is +1 on emotion frames and balanced elsewhere so the frame
        # mean carries no segment-length dependent offset
        marker = np.full(n_frames, -seg_len / (n_frames - seg_len) if n_frames > seg_len else 0.0)
        marker[v0 : v0 + seg_len] = 1.0
        frames += _MARKER_SCALE * marker[:, None] * protos["marker"]
        if spec.video_signal:
            frames[v0 : v0 + seg_len] += spec.video_strength * protos["class"][label]

        # audio: harmonic complex inside the emotion segment, broadband noise throughout
        duration = rng.uniform(spec.duration_min, spec.duration_max)
        n_samp = int(round(duration * spec.sample_rate))
        t = np.arange(n_samp) / spec.sample_rate
        wave = _AUDIO_NOISE * max(spec.noise, 1e-3) * rng.standard_normal(n_samp)
        seg_dur = spec.emotion_fraction * duration
        a0 = rng.uniform(0.0, duration - seg_dur)
        freqs = harmonic_frequencies(label)
        phases = rng.uniform(0.0, 2 * np.pi, len(freqs))
        if spec.audio_signal:
            active = (t >= a0) & (t < a0 + seg_dur)
            tones = np.sin(2 * np.pi * freqs[:, None] * t[None, active] + phases[:, None]).sum(axis=0)
            wave[active] += spec.audio_strength * rel_a * _TONE_AMP * tones / np.sqrt(len(freqs))
        wave = np.clip(wave, -1.0, 32767 / 32768)

        out.append(SyntheticSample(
            sample_id=f"{split}_{i:04d}", label=label, wave=wave, frames=frames,
            video_segment=(v0, v0 + seg_len), audio_segment=(a0, a0 + seg_dur),
            video_reliability=float(rel_v), audio_reliability=float(rel_a),
        ))
    return out


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Dict[str, Path]:
    """Write WAV + FSEQ files and one manifest per split under ``out_dir``.

    Returns the manifest paths by split.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests: Dict[str, Path] = {}
    segments = {}
    for split in SPLITS:
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        rows = []
        for s in synthesize_split(spec, split):
            wav_rel = f"{split}/{s.sample_id}.wav"
            feat_rel = f"{split}/{s.sample_id}.fseq"
            write_wav(out_dir / wav_rel, s.wave, spec.sample_rate)
            write_feature_file(out_dir / feat_rel, s.frames)
            rows.append([s.sample_id, wav_rel, feat_rel, EMOTIONS[s.label]])
            segments[s.sample_id] = {
                "video_segment": list(s.video_segment),
                "audio_segment": [round(x, 6) for x in s.audio_segment],
            }
        manifests[split] = out_dir / f"{split}.csv"
        write_manifest(manifests[split], rows)
    (out_dir / "segments.json").write_text(json.dumps(segments, indent=1, sort_keys=True) + "\n")
    (out_dir / "synth.json").write_text(json.dumps(asdict(spec), indent=1, sort_keys=True) + "\n")
    return manifests


def nearest_mean_accuracy(train_x: np.ndarray, train_y, test_x: np.ndarray, test_y) -> float:
    """Nearest-class-centroid classifier; an oracle for generator separability."""
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    classes = np.unique(train_y)
    cents = np.stack([train_x[train_y == c].mean(axis=0) for c in classes])
    d = ((test_x[:, None, :] - cents[None]) ** 2).sum(axis=-1)
    return float((classes[d.argmin(axis=1)] == test_y).mean())
