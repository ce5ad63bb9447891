"""Stage-wise pretraining, back-to-front fine-tuning and evaluation.

Trains a deliberately small detector on a handful of synthetic scenes so
the whole recipe finishes in well under a minute, then prints the results
table on the training scenes.  Use ``configs/overfit.json`` with
``--config`` for the full-size architecture (several minutes).

    python demos/demo_training.py
    python demos/demo_training.py --config configs/overfit.json -n 8
"""

import argparse
import time

from threadpoolctl import threadpool_limits

from stngrasp.fixtures import make_sample
from stngrasp.pipeline import GraspDetector, ModelConfig, NetConfig
from stngrasp.trainer import PhaseConfig, TrainConfig, evaluate, format_table, success_rate, train


def small_config() -> TrainConfig:
    net = NetConfig(widths=(8, 16), pool=2, hidden=16)
    model = ModelConfig(stage1=NetConfig(widths=(8, 16), downsample=4, pool=2, hidden=16),
                        stage2=net, stage3=net, classifier=NetConfig(widths=(8,), pool=2, hidden=16),
                        baseline=NetConfig(widths=(8, 16), downsample=4, pool=2, hidden=16),
                        stage_patch=48, classifier_patch=32, dtype="float32")
    phase = PhaseConfig(epochs=60, lr=3e-3, batch_size=4)
    return TrainConfig(seed=0, model=model,
                       pretrain={n: phase for n in ("stage1", "stage2", "stage3", "classifier", "baseline")},
                       finetune=PhaseConfig(epochs=2, lr=1e-4, batch_size=2), background_patches=4)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON training config (default: a small built-in one)")
    ap.add_argument("-n", type=int, default=4, help="number of synthetic scenes")
    args = ap.parse_args()

    cfg = TrainConfig.from_file(args.config) if args.config else small_config()
    samples = [make_sample(100 + i) for i in range(args.n)]
    model = GraspDetector(cfg.model, seed=cfg.seed)

    def log(rec):
        if rec["step"] % 25 == 0:
            print(f"  {rec['phase']:22s} step {rec['step']:4d}  loss {rec['loss']:.4f}")

    pre = {}

    def hook(event, name):
        if event == "start" and not pre:
            pre["success"] = success_rate(model, samples)

    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        train(model, samples, cfg, log_fn=log, phase_hook=hook)
        print(f"\ntrained in {time.perf_counter() - t0:.1f} s; "
              f"success after pretraining {pre.get('success', float('nan')):.0f}%")
        reports = [evaluate(model, samples)]
        if model.baseline is not None:
            reports.append(evaluate(model, samples, lambda m, img: m.regress_baseline(img), "Direct regression"))
    print(format_table(reports))


if __name__ == "__main__":
    main()
