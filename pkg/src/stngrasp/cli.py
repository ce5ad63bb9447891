"""Command-line entry point: ``stngrasp {validate-data,train,eval,detect,trace}``.

Exit codes: 0 success, 2 input error, 3 numeric failure, 4 artifact mismatch.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

from PIL import UnidentifiedImageError
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import CACHE_VERSION, dataset_hash, load_dataset, load_raw_item, preprocess, save_cache, split_imagewise
from .errors import CheckpointError, ConfigError, ContractError, NumericError, ShapeError
from .pipeline import GraspDetector
from .render import render_overlay, render_trace
from .trainer import TrainConfig, evaluate, format_table, train

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4
MANIFEST_VERSION = 1
GRASP_VERSION = 1
REPORT_VERSION = 1

log = logging.getLogger("stngrasp")


class InputError(Exception):
    """Bad command-line input (missing files, empty data, ...)."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def artifact_version() -> str:
    """Package version plus a short hash of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}-g{h.hexdigest()[:12]}"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class RunManifest:
    """One per command invocation, written to ``<out>/manifest.json``."""

    def __init__(self, command: str, out_dir: Path, seed: int | None = None):
        self.data = {
            "version": MANIFEST_VERSION,
            "command": command,
            "config_hash": None,
            "dataset_hash": None,
            "seed": seed,
            "artifact_version": artifact_version(),
            "outputs": {},
            "started": _now(),
            "finished": None,
            "status": "running",
        }
        self.path = Path(out_dir) / "manifest.json"

    def output(self, key: str, path) -> None:
        self.data["outputs"][key] = str(path)

    def finish(self, status: str) -> None:
        self.data["finished"] = _now()
        self.data["status"] = status
        _write_json(self.path, self.data)


def _load_samples(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"data path {path} does not exist")
    if path.is_dir() and not any(path.iterdir()):
        raise InputError(f"data directory {path} is empty")
    samples, report = load_dataset(path)
    if not samples:
        raise InputError(f"no valid samples under {path}")
    return samples, report


def _subset(samples, which: str, seed: int):
    if which == "all":
        return list(samples)
    split = split_imagewise(samples, seed=seed)
    keep = set(split.train if which == "train" else split.test)
    chosen = [s for s in samples if s.sample_id in keep]
    if not chosen:
        raise InputError(f"the {which} side of split {seed} is empty ({len(samples)} samples)")
    return chosen


def _load_image_pair(image_path, depth_path):
    for p in (image_path, depth_path):
        if not Path(p).is_file():
            raise InputError(f"{p} does not exist")
    rgb, depth = load_raw_item(image_path, depth_path)
    return rgb, depth


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_validate_data(args) -> int:
    out = Path(args.out)
    manifest = RunManifest("validate-data", out)
    root = Path(args.data)
    if not root.is_dir():
        raise InputError(f"{root} is not a readable directory")
    samples, report = _load_samples(root)
    manifest.data["dataset_hash"] = dataset_hash(samples)
    counts = report.to_dict()
    for key in ("images", "positives", "negatives", "skipped_rectangles", "skipped_samples"):
        print(f"{key:>20}: {counts[key]}")
    for w in report.warnings[: args.max_warnings]:
        print(f"warning: {w}")
    _write_json(out / "data_report.json", {**counts, "warning_messages": report.warnings})
    manifest.output("report", out / "data_report.json")
    if args.cache:
        save_cache(samples, args.cache)
        manifest.output("cache", args.cache)
        print(f"cache (v{CACHE_VERSION}) written to {args.cache}")
    manifest.finish("ok")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        config = TrainConfig.from_file(args.config)
    except FileNotFoundError as exc:
        raise InputError(f"config {args.config} does not exist") from exc
    except (json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"config {args.config} is malformed: {exc}") from exc
    manifest = RunManifest("train", out, seed=config.seed)
    manifest.data["config_hash"] = config.hash()
    samples, _ = _load_samples(args.data)
    samples = _subset(samples, args.subset, args.split)
    manifest.data["dataset_hash"] = dataset_hash(samples)
    phases = None
    if args.phases is not None:
        phases = [p.strip() for p in args.phases.split(",") if p.strip()]
        TrainConfig(**{**config.to_dict(), "finetune_phases": phases})  # validates names

    config.save(out / "config.json")
    ckpt = out / "model.ckpt"
    log_path = out / "train_log.jsonl"
    for p in (ckpt, Path(str(ckpt) + ".aborted")):
        p.unlink(missing_ok=True)
    model = GraspDetector(config.model, seed=config.seed)
    manifest.output("checkpoint", ckpt)
    manifest.output("log", log_path)
    manifest.output("config", out / "config.json")
    with open(log_path, "w") as fh:
        def log_fn(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        try:
            train(model, samples, config, phases=phases, log_fn=log_fn)
        except NumericError as exc:
            save_checkpoint(ckpt, model, {"train_config_hash": config.hash(), "aborted": True})
            _write_json(Path(str(ckpt) + ".aborted"), {"error": str(exc)})
            manifest.output("aborted_marker", str(ckpt) + ".aborted")
            manifest.finish("aborted")
            raise
    save_checkpoint(ckpt, model, {"train_config_hash": config.hash(), "aborted": False})
    manifest.finish("ok")
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _load_model(path, config_path=None) -> GraspDetector:
    if not Path(path).is_file():
        raise InputError(f"checkpoint {path} does not exist")
    expected = None
    if config_path is not None:
        try:
            expected = TrainConfig.from_file(config_path).model
        except FileNotFoundError as exc:
            raise InputError(f"config {config_path} does not exist") from exc
    model, _ = load_checkpoint(path, expected)
    return model


def cmd_eval(args) -> int:
    out = Path(args.out)
    manifest = RunManifest("eval", out, seed=args.split)
    model = _load_model(args.checkpoint, args.config)
    manifest.data["config_hash"] = model.config.hash()
    samples, _ = _load_samples(args.data)
    test = _subset(samples, args.subset, args.split)
    manifest.data["dataset_hash"] = dataset_hash(test)
    reports = [evaluate(model, test)]
    if args.baseline:
        if model.baseline is None:
            raise CheckpointError("checkpoint has no regression baseline head")
        reports.append(evaluate(model, test, detect_fn=lambda m, img: m.regress_baseline(img),
                                method="Direct regression"))
    table = format_table(reports)
    print(table)
    payload = {"version": REPORT_VERSION, "split_seed": args.split, "subset": args.subset,
               "n_samples": len(test), "reports": [r.to_dict() for r in reports]}
    _write_json(out / "report.json", payload)
    (out / "report.txt").write_text(table + "\n")
    manifest.output("report_json", out / "report.json")
    manifest.output("report_txt", out / "report.txt")
    manifest.finish("ok")
    return EXIT_OK


def _detect_common(args, command):
    out = Path(args.out)
    manifest = RunManifest(command, out)
    model = _load_model(args.checkpoint)
    manifest.data["config_hash"] = model.config.hash()
    rgb, depth = _load_image_pair(args.image, args.depth)
    sample = preprocess(rgb, depth, source_id=Path(args.image).name)
    rect, trace = model.detect(sample.image.channels)
    return out, manifest, rgb, sample, rect, trace


def cmd_detect(args) -> int:
    out, manifest, rgb, sample, rect, trace = _detect_common(args, "detect")
    ox, oy = sample.image.crop_offset
    full = rect.translated(ox, oy)
    grasp = {**full.to_dict(), "score": trace.candidates[trace.winner].score,
             "crop_offset": [ox, oy], "version": GRASP_VERSION}
    _write_json(out / "grasp.json", grasp)
    render_overlay(rgb, [full], out / "grasp.png", meta={"score": grasp["score"]})
    manifest.output("grasp", out / "grasp.json")
    manifest.output("overlay", out / "grasp.png")
    manifest.finish("ok")
    print(json.dumps(grasp, sort_keys=True))
    return EXIT_OK


def cmd_trace(args) -> int:
    out, manifest, rgb, sample, rect, trace = _detect_common(args, "trace")
    payload = {**trace.to_dict(), "crop_offset": list(sample.image.crop_offset),
               "coordinates": "crop"}
    _write_json(out / "trace.json", payload)
    panels = render_trace(sample.image.channels, trace, out)
    manifest.output("trace", out / "trace.json")
    for i, p in enumerate(panels):
        manifest.output(f"panel{i + 1}", p)
    manifest.finish("ok")
    print(f"winner {trace.winner}: {json.dumps(rect.to_dict(), sort_keys=True)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stngrasp", description="Multi-stage spatial-transformer grasp detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-data", help="load a Cornell-layout directory and report counts")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs/validate-data", help="directory for the report and manifest")
    p.add_argument("--cache", help="also write a preprocessed sample cache to this file")
    p.add_argument("--max-warnings", type=int, default=20)
    p.set_defaults(func=cmd_validate_data)

    p = sub.add_parser("train", help="pretrain every block, then fine-tune back to front")
    p.add_argument("--data", required=True, help="Cornell directory or sample cache")
    p.add_argument("--config", required=True, help="JSON training config")
    p.add_argument("--out", required=True)
    p.add_argument("--phases", help='comma-separated fine-tune phases; "" disables fine-tuning')
    p.add_argument("--split", type=int, default=0, help="seed of the image-wise split")
    p.add_argument("--subset", choices=("train", "all"), default="train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and timing on the held-out side of the split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", type=int, default=0)
    p.add_argument("--subset", choices=("test", "train", "all"), default="test")
    p.add_argument("--config", help="fail (exit 4) unless the checkpoint matches this config's model")
    p.add_argument("--baseline", action="store_true", help="also evaluate the direct regression head")
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("detect", cmd_detect, "best grasp for one RGB + depth pair"),
                                 ("trace", cmd_trace, "per-stage candidate overlays")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--image", required=True)
        p.add_argument("--depth", required=True, help="depth image (png/tiff) or pcd*.txt point cloud")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except CheckpointError as exc:
        print(f"error: artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ContractError, ConfigError, ShapeError, FileNotFoundError,
            UnidentifiedImageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
