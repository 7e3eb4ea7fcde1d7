"""Train one FBP model and dump audio and video attention curves for a few test clips,
alongside each clip's true emotion segment, as plot-ready CSV.

    python scripts/attention_curves.py --clips 2 --out results/attention
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from fbpfusion.attention import weights_per_time
from fbpfusion.data import SyntheticSpec, synthesize_split
from fbpfusion.experiments import desk_config, synthetic_samples, train_and_evaluate
from fbpfusion.tensor import no_grad


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--clips", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lambda-audio", type=float, default=0.0)
    ap.add_argument("--out", default="results/attention")
    args = ap.parse_args()

    spec = SyntheticSpec()
    run = train_and_evaluate(synthetic_samples(spec, "train"), synthetic_samples(spec, "test"),
                             desk_config(args.seed, lambda_audio=args.lambda_audio))
    print(f"test accuracy {run.accuracy:.3f}")
    raw = {s.sample_id: s for s in synthesize_split(spec, "test")}
    test = synthetic_samples(spec, "test")
    picks = np.random.default_rng(args.seed).choice(len(test), args.clips, replace=False)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "attention_curves.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "stream", "index", "time_s", "weight", "in_segment"])
        for i in picks:
            s = test[i]
            with no_grad():
                res = run.result.model.forward(s.spectrogram, s.frames)
            v0, v1 = raw[s.sample_id].video_segment
            n = len(res.video_weights)
            for j, wt in enumerate(res.video_weights):
                w.writerow([s.sample_id, "video", j, "", float(wt), int(v0 <= j < v1)])
            a0, a1 = raw[s.sample_id].audio_segment
            per_t = weights_per_time(res.audio_weights, res.grid_shape)
            duration = s.spectrogram.shape[1] * 0.01
            for j, wt in enumerate(per_t):
                t = (j + 0.5) * duration / len(per_t)
                w.writerow([s.sample_id, "audio", j, round(t, 4), float(wt), int(a0 <= t < a1)])
            inside = res.video_weights[v0:v1].mean()
            outside = np.delete(res.video_weights, np.arange(v0, v1)).mean() if v1 - v0 < n else float("nan")
            print(f"{s.sample_id}: video weight inside segment {inside:.3f}, outside {outside:.3f}")
    print(f"written {path}")


if __name__ == "__main__":
    main()
