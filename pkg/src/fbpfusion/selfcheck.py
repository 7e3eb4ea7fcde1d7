"""Built-in invariant suites: FBP oracle, gradient checks, attention and spectrogram properties.

Each suite returns a :class:`CheckResult`; :func:`run_selfcheck` runs them
all.  The acceptance tests call the same suites with larger instance counts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fbpfusion import ops
from fbpfusion.attention import AttentionParams, attention_pool
from fbpfusion.dsp import SpectrogramConfig, spectrogram
from fbpfusion.fbp import FBPParams, bilinear_pool_naive, fbp_forward, reconstruct_W
from fbpfusion.gradcheck import gradcheck, leaves
from fbpfusion.model import EmotionModel, ModelConfig
from fbpfusion.tensor import Tensor, no_grad

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name: str, body: Callable[[], Tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail = body()
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


# ---------------------------------------------------------------- FBP oracle


def check_fbp_oracle(n: int = 200, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    """Factorised FBP (pre-normalisation, eval mode) equals a z_i = a^T W_i v triple loop."""

    def body():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n):
            m, nv, k, o = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 5), rng.integers(1, 7)
            U, V = leaves(rng.standard_normal((m, k * o)), rng.standard_normal((nv, k * o)))
            p = FBPParams(U, V, int(k), int(o), dropout_p=0.3)
            a, v = rng.standard_normal(m), rng.standard_normal(nv)
            with no_grad():
                z = fbp_forward(Tensor(a), Tensor(v), p, training=False, normalize=False).data
            worst = max(worst, float(np.max(np.abs(z - bilinear_pool_naive(a, v, reconstruct_W(p))))))
        return worst <= tol, f"{n} instances, max abs error {worst:.2e} (tol {tol:g})"

    return _timed("fbp_oracle", body)


# ---------------------------------------------------------------- gradients

# name -> (function of the inputs, input shapes)
GRAD_CASES: Dict[str, Tuple[Callable[..., Tensor], List[tuple]]] = {
    "add": (lambda a, b: ops.add(a, b), [(10, 12), (10, 12)]),
    "sub": (lambda a, b: ops.sub(a, b), [(60,), (60,)]),
    "mul": (lambda a, b: ops.mul(a, b), [(60,), (60,)]),
    "scale": (lambda a: ops.scale(a, -1.7), [(10, 12)]),
    "matmul": (lambda a, b: ops.matmul(a, b), [(8, 9), (9, 6)]),
    "vecmat": (lambda a, b: ops.vecmat(a, b), [(10,), (10, 12)]),
    "tanh": (lambda a: ops.tanh(a), [(120,)]),
    "relu": (lambda a: ops.relu(a), [(120,)]),
    "add_rowwise": (lambda a, b: ops.add_rowwise(a, b), [(20, 6), (6,)]),
    "add_channelwise": (lambda a, b: ops.add_channelwise(a, b), [(3, 6, 6), (3,)]),
    "transpose_reshape": (lambda a: ops.reshape(ops.transpose(a), (120,)), [(10, 12)]),
    "concat": (lambda a, b: ops.concat([a, b]), [(50,), (60,)]),
    "total": (lambda a: ops.total(a), [(2, 6, 10)]),
    "conv2d": (lambda x, k: ops.conv2d(x, k, stride=2, padding=1), [(2, 7, 6), (3, 2, 3, 3)]),
    "maxpool2d": (lambda x: ops.maxpool2d(x, 3, 2), [(2, 9, 9)]),
    "lrn": (lambda x: ops.local_response_norm(x, 3, 2.0, 0.5, 0.75), [(5, 5, 6)]),
    "scaled_softmax": (lambda e: ops.scaled_softmax(e, 0.7), [(120,)]),
    "sum_pool_segments": (lambda x: ops.sum_pool_segments(x, 3), [(120,)]),
    "l2_normalize": (lambda z: ops.l2_normalize(z), [(120,)]),
    "dropout": (lambda x: ops.dropout(x, 0.3, True, 5), [(120,)]),
    "cross_entropy": (lambda l: ops.cross_entropy(l, np.arange(16) % 7), [(16, 7)]),
}


def _case_inputs(name: str, shapes: Sequence[tuple]) -> List[Tensor]:
    seed = sum(map(ord, name))
    rng = np.random.default_rng(seed)
    return leaves(*[rng.standard_normal(s) for s in shapes])


def tiny_model_case(seed: int = 0) -> Tuple[EmotionModel, np.ndarray, np.ndarray]:
    """Float64 model at gradient-check size: tiny encoder, L_v = 3, C = 8, o = 4, k = 2."""
    cfg = ModelConfig(lambda_audio=1.0, lambda_video=1.0, reduced_video_dim=6, fbp_o=4, fbp_k=2,
                      dropout_p=0.3, encoder="tiny", seed=seed)
    model = EmotionModel(cfg, video_dim=8, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    spec = np.abs(rng.standard_normal((20, 20)))
    frames = rng.standard_normal((3, 8))
    return model, spec, frames


def check_model_gradients(n_coords: int = 100, seed: int = 0, tol: float = GRAD_TOL) -> CheckResult:
    """Every parameter tensor of the tiny end-to-end model, ``n_coords`` coordinates each."""

    def body():
        model, spec, frames = tiny_model_case(seed)
        params = model.parameters()
        # a fresh generator per call keeps the dropout mask fixed across evaluations
        fn = lambda *_: model.forward(spec, frames, training=True, rng=np.random.default_rng(7)).logits
        res = gradcheck(fn, params, n_coords=n_coords, seed=seed, per_input=True)
        need = sum(min(n_coords, p.size) for p in params)
        worst = params[res.worst[0]].name if res.worst[0] >= 0 else "-"
        ok = res.passed(tol) and res.n_coords >= need
        return ok, (f"{len(params)} tensors, {res.n_coords} coords, max rel error {res.max_rel_error:.2e} "
                    f"(worst {worst}), {res.skipped} kink crossings skipped")

    return _timed("grad_model", body)


def check_op_gradients(cases: Optional[Dict[str, tuple]] = None, n_coords: int = 100,
                       tol: float = GRAD_TOL) -> List[CheckResult]:
    out = []
    for name, (fn, shapes) in sorted((cases or GRAD_CASES).items()):
        def body(fn=fn, shapes=shapes, name=name):
            res = gradcheck(fn, _case_inputs(name, shapes), n_coords=n_coords)
            ok = res.passed(tol) and res.n_coords >= n_coords
            return ok, f"{res.n_coords} coords, max rel error {res.max_rel_error:.2e}"
        out.append(_timed(f"grad_{name}", body))
    return out


# ---------------------------------------------------------------- attention / softmax invariants


def check_attention_invariants(n: int = 200, seed: int = 0) -> CheckResult:
    """Weights sum to 1, lambda = 0 is exact mean pooling, weights permute with the elements,
    and scaled softmax ignores a constant shift of the scores."""

    def body():
        rng = np.random.default_rng(seed)
        failures = []
        for i in range(n):
            L, C, d = rng.integers(1, 20), rng.integers(1, 10), rng.integers(1, 10)
            lam = float(rng.choice([0.0, 1.0, rng.uniform(0, 1)]))
            x = rng.standard_normal((L, C)) * rng.uniform(0.1, 5)
            params = AttentionParams.init(int(C), int(d), rng, lam, bool(rng.integers(2)))
            with no_grad():
                out = attention_pool(Tensor(x), params)
                w = out.weights.data
                if abs(w.sum() - 1.0) > 1e-10 or np.any(w < 0):
                    failures.append(f"#{i} weights sum {w.sum()!r}")
                # same parameters at lambda = 0 must give exact mean pooling
                mean_p = AttentionParams(params.W, params.b, params.u, 0.0, params.pool_transformed)
                out0 = attention_pool(Tensor(x), mean_p)
                src = x @ params.W.data.T + params.b.data if params.pool_transformed else x
                mean_err = np.max(np.abs(out0.pooled.data - src.mean(axis=0)))
                if not np.all(out0.weights.data == 1.0 / L) or mean_err > 1e-12:
                    failures.append(f"#{i} lambda=0 is not mean pooling")
                perm = rng.permutation(L)
                out_p = attention_pool(Tensor(x[perm]), params)
                if np.max(np.abs(out_p.weights.data - w[perm])) > 1e-12:
                    failures.append(f"#{i} weights not permutation equivariant")
                if np.max(np.abs(out_p.pooled.data - out.pooled.data)) > 1e-10:
                    failures.append(f"#{i} pooled vector changed under permutation")
                e = rng.standard_normal(int(L)) * rng.uniform(0.1, 100)
                shift = rng.uniform(-1000, 1000)
                a1 = ops.scaled_softmax(Tensor(e), lam).data
                a2 = ops.scaled_softmax(Tensor(e + shift), lam).data
                if np.max(np.abs(a1 - a2)) > 1e-10:
                    failures.append(f"#{i} softmax not shift invariant")
        detail = f"{n} instances" + (f", {len(failures)} failures: {failures[:3]}" if failures else "")
        return not failures, detail

    return _timed("attention_invariants", body)


# ---------------------------------------------------------------- spectrogram


def check_spectrogram(n: int = 100, seed: int = 0) -> CheckResult:
    """Frame count formula, a 1 kHz tone peaking at bin 40, and zero in -> zero out."""

    def body():
        cfg = SpectrogramConfig()
        rng = np.random.default_rng(seed)
        problems = []
        for length in rng.integers(cfg.window_len, 5 * cfg.sample_rate, n):
            expected = 1 + (int(length) - cfg.window_len) // cfg.shift_len
            got = spectrogram(np.zeros(int(length)), cfg).bins.shape[1]
            if got != expected:
                problems.append(f"length {length}: {got} frames, expected {expected}")
        t = np.arange(cfg.sample_rate) / cfg.sample_rate
        peaks = spectrogram(np.sin(2 * np.pi * 1000 * t), cfg).bins.argmax(axis=0)
        if not np.all(peaks == 40):
            problems.append(f"1 kHz peaks at bins {sorted(set(peaks.tolist()))}")
        if np.any(spectrogram(np.zeros(cfg.sample_rate), cfg).bins != 0):
            problems.append("zero input gave non-zero output")
        return not problems, f"{n} lengths" + (f"; {problems[:3]}" if problems else "")

    return _timed("spectrogram", body)


# ---------------------------------------------------------------- driver


def run_selfcheck(n_oracle: int = 200, n_invariants: int = 200, n_coords: int = 100,
                  grad_cases: Optional[Dict[str, tuple]] = None,
                  report: Optional[Callable[[CheckResult], None]] = None) -> List[CheckResult]:
    results: List[CheckResult] = []

    def add(r: CheckResult):
        results.append(r)
        if report:
            report(r)

    add(check_fbp_oracle(n_oracle))
    for r in check_op_gradients(grad_cases, n_coords):
        add(r)
    add(check_model_gradients(n_coords))
    add(check_attention_invariants(n_invariants))
    add(check_spectrogram())
    return results
