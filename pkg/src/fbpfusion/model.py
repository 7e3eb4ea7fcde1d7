"""The audio-video network: conv audio encoder, two attention streams, fusion, classifier.

Also holds training (Adam, per-sample gradient accumulation), evaluation with
confusion matrices, probability-averaging ensembles and checkpoint I/O.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fbpfusion import EMOTIONS, checkpoint, ops
from fbpfusion.attention import AttentionParams, attention_pool, flatten_grid
from fbpfusion.errors import ContractError, InputError
from fbpfusion.fbp import FBPParams, fbp_forward
from fbpfusion.optim import Adam
from fbpfusion.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

FUSIONS = ("fbp", "concat", "video")


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class ConvLayer:
    kernel: int
    stride: int
    channels: int
    padding: int = 0
    lrn: bool = False
    pool: Optional[Tuple[int, int]] = None  # (window, stride)


ENCODER_LAYERS = {
    # AlexNet convolutional trunk, fully connected layers removed
    "full": (
        ConvLayer(11, 4, 96, 0, lrn=True, pool=(3, 2)),
        ConvLayer(5, 1, 256, 2, lrn=True, pool=(3, 2)),
        ConvLayer(3, 1, 384, 1),
        ConvLayer(3, 1, 384, 1),
        ConvLayer(3, 1, 256, 1, pool=(3, 2)),
    ),
    "tiny": (
        ConvLayer(5, 2, 8),
        ConvLayer(3, 2, 16),
    ),
}


@dataclass(frozen=True)
class AudioEncoderConfig:
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in ENCODER_LAYERS:
            raise ValueError(f"unknown encoder variant {self.variant!r}; choose from {sorted(ENCODER_LAYERS)}")

    @property
    def layers(self) -> Tuple[ConvLayer, ...]:
        return ENCODER_LAYERS[self.variant]

    @property
    def out_channels(self) -> int:
        return self.layers[-1].channels

    def output_size(self, n: int) -> int:
        """Spatial size after the whole stack for an input side of ``n`` (0 if it collapses)."""
        for layer in self.layers:
            if n + 2 * layer.padding < layer.kernel:
                return 0
            n = (n + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if layer.pool:
                k, s = layer.pool
                if n < k:
                    return 0
                n = (n - k) // s + 1
        return n

    def min_input_size(self) -> int:
        n = 1
        while self.output_size(n) < 1:
            n += 1
        return n


@dataclass
class ModelConfig:
    lambda_audio: float = 0.0
    lambda_video: float = 1.0
    reduced_video_dim: int = 256
    fbp_o: int = 128
    fbp_k: int = 4
    dropout_p: float = 0.3
    num_classes: int = len(EMOTIONS)
    encoder: str = "full"
    fusion: str = "fbp"
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_audio", "lambda_video"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if min(self.reduced_video_dim, self.fbp_o, self.fbp_k) < 1:
            raise ValueError("reduced_video_dim, fbp_o and fbp_k must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 2 <= self.num_classes <= len(EMOTIONS):
            raise ValueError(f"num_classes must be in [2, {len(EMOTIONS)}]")
        AudioEncoderConfig(self.encoder)

    @property
    def encoder_config(self) -> AudioEncoderConfig:
        return AudioEncoderConfig(self.encoder)


# ---------------------------------------------------------------- network


@dataclass
class ForwardResult:
    logits: Tensor
    audio_weights: Optional[np.ndarray]
    video_weights: np.ndarray
    grid_shape: Optional[Tuple[int, int]]


def audio_encode(spec: np.ndarray | Tensor, cfg: AudioEncoderConfig, params: Sequence[Tuple[Tensor, Tensor]]) -> Tensor:
    """Run the conv stack on an F x T spectrogram; returns a C_a x F' x T' grid."""
    x = spec if isinstance(spec, Tensor) else Tensor(spec)
    f, t = x.shape[-2:]
    need = cfg.min_input_size()
    if min(f, t) < need or cfg.output_size(f) < 1 or cfg.output_size(t) < 1:
        raise InputError(f"spectrogram {f}x{t} too small for the {cfg.variant} encoder; minimum side is {need}")
    if x.data.ndim == 2:
        x = ops.reshape(x, (1, f, t))
    for layer, (kernel, bias) in zip(cfg.layers, params):
        x = ops.add_channelwise(ops.conv2d(x, kernel, layer.stride, layer.padding), bias)
        x = ops.relu(x)
        if layer.lrn:
            x = ops.local_response_norm(x)
        if layer.pool:
            x = ops.maxpool2d(x, *layer.pool)
    return x


class EmotionModel:
    """All learnable tensors of the network plus video normalisation statistics."""

    def __init__(self, cfg: ModelConfig, video_dim: int, dtype=np.float64):
        self.cfg = cfg
        self.video_dim = video_dim
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        self.params: Dict[str, Tensor] = {}
        enc = cfg.encoder_config
        c_in = 1
        self.encoder_params: List[Tuple[Tensor, Tensor]] = []
        if cfg.fusion != "video":
            for i, layer in enumerate(enc.layers):
                fan_in = c_in * layer.kernel * layer.kernel
                bound = np.sqrt(6.0 / fan_in)
                k = self._param(f"enc.{i}.kernel", rng.uniform(-bound, bound, (layer.channels, c_in, layer.kernel, layer.kernel)))
                b = self._param(f"enc.{i}.bias", np.zeros(layer.channels))
                self.encoder_params.append((k, b))
                c_in = layer.channels
            c_a = enc.out_channels
            self.att_audio = self._attention("att_audio", c_a, c_a, cfg.lambda_audio, False, rng)
        else:
            c_a = 0
            self.att_audio = None
        d_v = cfg.reduced_video_dim
        self.att_video = self._attention("att_video", video_dim, d_v, cfg.lambda_video, True, rng)
        self.fbp: Optional[FBPParams] = None
        if cfg.fusion == "fbp":
            fb = FBPParams.init(c_a, d_v, cfg.fbp_k, cfg.fbp_o, rng, cfg.dropout_p, self.dtype)
            self.params["fbp.U"], self.params["fbp.V"] = fb.U, fb.V
            self.fbp = fb
            head_in = cfg.fbp_o
        elif cfg.fusion == "concat":
            head_in = c_a + d_v
        else:
            head_in = d_v
        bound = 1.0 / np.sqrt(head_in)
        self.cls_W = self._param("cls.W", rng.uniform(-bound, bound, (head_in, cfg.num_classes)))
        self.cls_b = self._param("cls.b", np.zeros(cfg.num_classes))
        self.video_mean = np.zeros(video_dim)
        self.video_std = np.ones(video_dim)
        self._dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))

    def _param(self, name: str, value) -> Tensor:
        t = Tensor(value, requires_grad=True, dtype=self.dtype, name=name)
        self.params[name] = t
        return t

    def _attention(self, prefix, in_dim, hidden, lam, pool_transformed, rng) -> AttentionParams:
        att = AttentionParams.init(in_dim, hidden, rng, lam, pool_transformed, self.dtype, prefix)
        for t in att.tensors():
            self.params[t.name] = t
        return att

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def fit_video_normalization(self, frame_sets: Sequence[np.ndarray]) -> None:
        allf = np.concatenate([np.asarray(f, dtype=np.float64) for f in frame_sets])
        # stored as float32 in checkpoints; round now so a reload is exact
        self.video_mean = allf.mean(axis=0).astype(np.float32).astype(np.float64)
        self.video_std = np.maximum(allf.std(axis=0), 1e-6).astype(np.float32).astype(np.float64)

    def forward(self, spec: Optional[np.ndarray], frames: np.ndarray, training: bool = False,
                rng: Optional[np.random.Generator] = None, zero_video: bool = False) -> ForwardResult:
        """Logits plus both attention weight vectors.

        ``zero_video`` is an ablation that replaces the pooled video vector by zeros.
        """
        frames = np.asarray(frames)
        if frames.ndim != 2 or frames.shape[1] != self.video_dim:
            raise InputError(f"video features {frames.shape} do not match model dim {self.video_dim}")
        v_in = Tensor(((frames - self.video_mean) / self.video_std).astype(self.dtype), dtype=self.dtype)
        vid = attention_pool(v_in, self.att_video)
        v_vec = Tensor(np.zeros(vid.pooled.shape, dtype=self.dtype)) if zero_video else vid.pooled
        audio_w = grid_shape = None
        if self.cfg.fusion == "video":
            fused = v_vec
        else:
            if spec is None:
                raise InputError("this model needs a spectrogram")
            grid = audio_encode(Tensor(np.asarray(spec, dtype=self.dtype), dtype=self.dtype),
                                self.cfg.encoder_config, self.encoder_params)
            grid_shape = grid.shape[1:]
            aud = attention_pool(flatten_grid(grid), self.att_audio)
            audio_w = aud.weights.data
            if self.cfg.fusion == "fbp":
                rng = rng if rng is not None else self._dropout_rng
                fused = fbp_forward(aud.pooled, v_vec, self.fbp, training, rng)
            else:
                fused = ops.concat([aud.pooled, v_vec])
        logits = ops.add(ops.vecmat(fused, self.cls_W), self.cls_b)
        return ForwardResult(logits, audio_w, vid.weights.data, grid_shape)

    def loss(self, spec, frames, label: int, training: bool = False, rng=None) -> Tensor:
        return ops.cross_entropy(self.forward(spec, frames, training, rng).logits, [label])

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.params.items()}
        state["norm.video_mean"] = self.video_mean
        state["norm.video_std"] = self.video_std
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set(self.params) | {"norm.video_mean", "norm.video_std"}
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ContractError(f"checkpoint does not match config: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ContractError(f"checkpoint tensor {name} has shape {state[name].shape}, model expects {t.shape}")
            t.data = np.array(state[name], dtype=self.dtype)
        self.video_mean = np.asarray(state["norm.video_mean"], dtype=np.float64)
        self.video_std = np.asarray(state["norm.video_std"], dtype=np.float64)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    precision: int = 32

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class TrainResult:
    model: EmotionModel
    losses: List[float]  # mean training loss per epoch (train mode)
    final_train_loss: float  # eval-mode mean loss on the training set after the last epoch


def train(samples, cfg: ModelConfig, train_cfg: TrainConfig = TrainConfig(), progress=None) -> TrainResult:
    """Minimise mean cross-entropy with Adam; one sample at a time, gradients accumulated per batch."""
    samples = list(samples)
    if not samples:
        raise InputError("cannot train on an empty dataset")
    video_dim = samples[0].frames.shape[1]
    model = EmotionModel(cfg, video_dim, train_cfg.dtype)
    model.fit_video_normalization([s.frames for s in samples])
    opt = Adam(model.parameters(), train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    losses = []
    for epoch in range(train_cfg.epochs):
        order = order_rng.permutation(len(samples))
        epoch_loss = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            opt.zero_grad()
            for idx in batch:
                s = samples[idx]
                loss = model.loss(s.spectrogram, s.frames, s.label, training=True)
                backward(loss)
                epoch_loss += loss.item()
            opt.step(grad_scale=1.0 / len(batch))
        losses.append(epoch_loss / len(samples))
        logger.debug("epoch %d loss %.6f", epoch, losses[-1])
        if progress:
            progress(epoch, losses[-1])
    final = evaluate(samples, model).loss
    return TrainResult(model, losses, final)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray  # rows true, columns predicted
    per_sample: List[Tuple[str, int, int, List[float]]] = field(default_factory=list)
    loss: float = float("nan")

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "classes": list(EMOTIONS[: self.confusion.shape[0]]),
            "confusion": self.confusion.tolist(),
            "per_sample": [
                {"sample_id": sid, "true": EMOTIONS[t], "predicted": EMOTIONS[p], "probabilities": probs}
                for sid, t, p, probs in self.per_sample
            ],
        }

    def write(self, out_dir, stem: str = "report") -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out_dir / f"{stem}.json", out_dir / f"{stem}_confusion.csv"
        jpath.write_text(json.dumps(self.to_json(), indent=1) + "\n")
        names = EMOTIONS[: self.confusion.shape[0]]
        lines = [",".join(names)] + [",".join(str(int(c)) for c in row) for row in self.confusion]
        cpath.write_text("\n".join(lines) + "\n")
        return jpath, cpath


def report_from_probabilities(ids, labels, probs, losses=None) -> EvalReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[1]
    preds = probs.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    acc = float((preds == labels).mean()) if len(labels) else float("nan")
    per = [(sid, int(t), int(p), [float(x) for x in row]) for sid, t, p, row in zip(ids, labels, preds, probs)]
    loss = float(np.mean(losses)) if losses is not None and len(losses) else float("nan")
    return EvalReport(acc, confusion, per, loss)


def predict_proba(samples, model: EmotionModel) -> Tuple[np.ndarray, np.ndarray]:
    """Class probabilities and per-sample cross-entropy, eval mode, no graph."""
    probs, losses = [], []
    with no_grad():
        for s in samples:
            logits = model.forward(s.spectrogram, s.frames, training=False).logits.data.astype(np.float64)
            logp = ops.log_softmax_np(logits)
            probs.append(np.exp(logp))
            losses.append(-logp[s.label])
    return np.array(probs), np.array(losses)


def evaluate(samples, model: EmotionModel) -> EvalReport:
    samples = list(samples)
    probs, losses = predict_proba(samples, model)
    if not samples:
        k = model.cfg.num_classes
        return EvalReport(float("nan"), np.zeros((k, k), dtype=np.int64))
    return report_from_probabilities([s.sample_id for s in samples], [s.label for s in samples], probs, losses)


def ensemble_mean(reports: Sequence[EvalReport]) -> EvalReport:
    """Average per-sample class probabilities across models; argmax (lowest index on ties) decides."""
    if len(reports) < 2:
        raise InputError(f"an ensemble needs at least 2 models, got {len(reports)}")
    base = reports[0].per_sample
    ids = [r[0] for r in base]
    truth = {r[0]: r[1] for r in base}
    total = np.zeros((len(ids), len(base[0][3]) if base else 0))
    for rep in reports:
        rows = {r[0]: r for r in rep.per_sample}
        if set(rows) != set(ids) or len(rows) != len(ids):
            raise InputError("ensemble members were evaluated on different sample sets")
        for i, sid in enumerate(ids):
            if rows[sid][1] != truth[sid]:
                raise InputError(f"ensemble members disagree on the label of {sid}")
            total[i] += rows[sid][3]
    return report_from_probabilities(ids, [truth[s] for s in ids], total / len(reports))


# ---------------------------------------------------------------- checkpoints


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_model(model: EmotionModel, path, extra: Optional[dict] = None) -> None:
    path = Path(path)
    checkpoint.save(path, model.state_dict())
    meta = {
        "model_config": asdict(model.cfg),
        "video_dim": model.video_dim,
        "normalization": {"video_mean": model.video_mean.tolist(), "video_std": model.video_std.tolist()},
    }
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_model(path, dtype=np.float32) -> Tuple[EmotionModel, dict]:
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise ContractError(f"checkpoint sidecar {side} missing")
    meta = json.loads(side.read_text())
    try:
        cfg = ModelConfig(**meta["model_config"])
    except (TypeError, ValueError) as exc:
        raise ContractError(f"checkpoint config invalid: {exc}") from exc
    model = EmotionModel(cfg, int(meta["video_dim"]), dtype)
    model.load_state_dict(checkpoint.load(path))
    return model, meta
