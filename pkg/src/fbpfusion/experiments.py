"""Desk-scale experiment helpers shared by scripts/ and the acceptance tests.

Samples are built in memory but pass through the same 16-bit PCM and float32
quantisation as the on-disk dataset, so results match a ``synth`` + ``train``
run on the same spec.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Sequence

import numpy as np

from fbpfusion.data import Sample, SyntheticSpec, synthesize_split
from fbpfusion.dsp import SpectrogramConfig, pcm16, spectrogram
from fbpfusion.model import EvalReport, ModelConfig, TrainConfig, TrainResult, evaluate, train

# settings used for every desk-scale comparison (tiny encoder, faster lr)
DESK_TRAIN = TrainConfig(epochs=30, batch_size=8, lr=3e-3)
DESK_ENCODER = "tiny"

# Table II style systems: name -> ModelConfig overrides
SYSTEMS: Dict[str, dict] = {
    "video": {"fusion": "video"},
    "concat": {"fusion": "concat"},
    "fbp": {"fusion": "fbp"},
    "fbp_mean_video": {"fusion": "fbp", "lambda_video": 0.0},
}


def synthetic_samples(spec: SyntheticSpec, split: str, cfg: SpectrogramConfig = SpectrogramConfig()) -> List[Sample]:
    out = []
    for s in synthesize_split(spec, split):
        wave = pcm16(s.wave).astype(np.float64) / 32768.0
        frames = s.frames.astype(np.float32).astype(np.float64)
        out.append(Sample(s.sample_id, spectrogram(wave, cfg).bins, frames, s.label))
    return out


def desk_config(seed: int = 0, **overrides) -> ModelConfig:
    return ModelConfig(encoder=DESK_ENCODER, seed=seed, **overrides)


@dataclass
class Run:
    system: str
    seed: int
    result: TrainResult
    report: EvalReport

    @property
    def accuracy(self) -> float:
        return self.report.accuracy


def train_and_evaluate(train_set: Sequence[Sample], test_set: Sequence[Sample], cfg: ModelConfig,
                       train_cfg: TrainConfig = DESK_TRAIN, system: str = "") -> Run:
    result = train(train_set, cfg, train_cfg)
    return Run(system or cfg.fusion, cfg.seed, result, evaluate(test_set, result.model))


def run_systems(train_set, test_set, systems: Sequence[str], seeds: Sequence[int],
                train_cfg: TrainConfig = DESK_TRAIN, progress=None) -> Dict[str, List[Run]]:
    """Train every named system once per seed and evaluate it on ``test_set``."""
    runs: Dict[str, List[Run]] = {}
    for name in systems:
        for seed in seeds:
            run = train_and_evaluate(train_set, test_set, desk_config(seed, **SYSTEMS[name]), train_cfg, name)
            runs.setdefault(name, []).append(run)
            if progress:
                progress(run)
    return runs


def mean_accuracy(runs: Sequence[Run]) -> float:
    return float(np.mean([r.accuracy for r in runs]))


def with_epochs(train_cfg: TrainConfig, epochs: int) -> TrainConfig:
    return replace(train_cfg, epochs=epochs)
