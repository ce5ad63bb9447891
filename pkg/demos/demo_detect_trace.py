"""Detection on one image with a per-stage candidate trace.

Trains a small detector on a single synthetic scene, detects on it, and
renders four overlay panels: stage-1 fields of view, stage-2 orientations,
stage-3 refined rectangles with classifier scores, and the winner.  Every
PNG has a ``.overlay.json`` sidecar with the exact rectangles drawn.

    python demos/demo_detect_trace.py --out /tmp/trace_demo
"""

import argparse
import json
from pathlib import Path

from demo_training import small_config
from stngrasp.fixtures import make_sample
from stngrasp.geometry import is_success
from stngrasp.pipeline import GraspDetector
from stngrasp.render import render_trace
from stngrasp.trainer import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="trace_demo")
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    scene = make_sample(args.seed, n_positive=3)
    cfg = small_config()
    model = GraspDetector(cfg.model, seed=0)
    train(model, [scene], cfg)

    rect, trace = model.detect(scene.image.channels)
    print(json.dumps(trace.to_dict()["candidates"][trace.winner], indent=1))
    print(f"winner {trace.winner} of {len(trace.candidates)}; success: {is_success(rect, scene.positives)[0]}")
    for p in render_trace(scene.image.channels, trace, Path(args.out)):
        print("wrote", p)


if __name__ == "__main__":
    main()
