"""Model checkpoints: parameters plus the model configuration that built them."""

from __future__ import annotations

from pathlib import Path

from .archive import read_archive, write_archive
from .errors import CheckpointError, ConfigError, ShapeError
from .pipeline import GraspDetector, ModelConfig

FORMAT = "stngrasp-checkpoint"
VERSION = 1


def save_checkpoint(path, model: GraspDetector, extra: dict | None = None) -> None:
    """Write ``model`` to ``path``.  Identical parameters give identical bytes."""
    state = model.state_dict()
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": model.config.dtype,
        "model_config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "parameters": {name: list(arr.shape) for name, arr in state.items()},
    }
    if extra:
        manifest.update(extra)
    write_archive(path, state, manifest)


def read_manifest(path) -> dict:
    return _read(path)[1]


def _read(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    try:
        arrays, manifest = read_archive(path)
    except Exception as exc:  # zipfile / json / npy errors all mean the same thing here
        raise CheckpointError(f"{path} is not a readable checkpoint: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')!r} "
                              f"version {manifest.get('version')!r}")
    return arrays, manifest


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[GraspDetector, dict]:
    """Rebuild the model stored at ``path``.

    Raises CheckpointError when the stored configuration disagrees with its
    hash, with ``expected_config``, or with the stored parameter shapes.
    """
    arrays, manifest = _read(path)
    try:
        config = ModelConfig.from_dict(manifest["model_config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}") from exc
    if config.hash() != manifest.get("config_hash"):
        raise CheckpointError(f"{path}: model config does not match its recorded hash")
    if expected_config is not None and expected_config.hash() != config.hash():
        raise CheckpointError(f"{path}: checkpoint was built for a different model config")
    model = GraspDetector(config, seed=0)
    try:
        model.load_state_dict(arrays)
    except (KeyError, ShapeError) as exc:
        raise CheckpointError(f"{path}: parameters do not fit the model: {exc}") from exc
    return model, manifest
