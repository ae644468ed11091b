"""Model checkpoints: parameter blob, JSON index and the model config echo."""

from __future__ import annotations

import json
from pathlib import Path

from ..numerics.serialize import BlobError, load_arrays, save_arrays
from .config import ConfigError, ModelConfig
from .network import MnMDetector

PARAMS_BLOB = "params.bin"
PARAMS_INDEX = "params.json"
MODEL_CONFIG = "model_config.json"


class CheckpointError(RuntimeError):
    pass


def save_model(model: MnMDetector, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_arrays(model.state_dict(), directory / PARAMS_BLOB, directory / PARAMS_INDEX)
    (directory / MODEL_CONFIG).write_text(json.dumps(model.cfg.to_dict(), indent=1))
    return directory


def load_model(directory, expected: ModelConfig | None = None, strict: bool = True) -> MnMDetector:
    directory = Path(directory)
    try:
        cfg = ModelConfig.from_dict(json.loads((directory / MODEL_CONFIG).read_text()))
    except (OSError, json.JSONDecodeError, ConfigError, TypeError) as exc:
        raise CheckpointError(f"cannot read model config in {directory}: {exc}") from exc
    if expected is not None and expected != cfg:
        raise CheckpointError(f"checkpoint model config {cfg} does not match {expected}")
    model = MnMDetector(cfg, 0, strict=strict)
    try:
        model.load_state_dict(load_arrays(directory / PARAMS_BLOB, directory / PARAMS_INDEX))
    except (BlobError, KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"checkpoint {directory} does not fit the model: {exc}") from exc
    return model
