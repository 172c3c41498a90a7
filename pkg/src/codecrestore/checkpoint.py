"""Versioned checkpoint container: parameters, config, stage tag, seed metadata."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .config import ModelConfig
from .errors import BadCheckpoint

CKPT_FORMAT = "codecrestore-ckpt"
CKPT_VERSION = 1

STAGE_ORDER = {"vae": 0, "stage1": 1, "stage2": 2}


@dataclass
class Checkpoint:
    stage: str
    model_config: ModelConfig
    state: dict
    seed: int
    config_hash: str
    extra: dict = field(default_factory=dict)
    path: str | None = None

    def stage_index(self) -> int:
        return STAGE_ORDER[self.stage]


def save_checkpoint(
    path: str | Path,
    *,
    stage: str,
    state: dict,
    model_config: ModelConfig,
    seed: int,
    config_hash: str,
    extra: dict | None = None,
) -> Path:
    if stage not in STAGE_ORDER:
        raise ValueError(f"unknown stage tag {stage!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "stage": stage,
        "model_config": asdict(model_config),
        "state": state,
        "seed": seed,
        "config_hash": config_hash,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise BadCheckpoint(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise BadCheckpoint(f"cannot load checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise BadCheckpoint(f"{path} is not a {CKPT_FORMAT} file")
    if payload.get("version") != CKPT_VERSION:
        raise BadCheckpoint(f"unsupported checkpoint version {payload.get('version')}")
    stage = payload.get("stage")
    if stage not in STAGE_ORDER:
        raise BadCheckpoint(f"unknown stage tag {stage!r} in {path}")
    try:
        model_config = ModelConfig(**payload["model_config"])
        return Checkpoint(
            stage=stage,
            model_config=model_config,
            state=payload["state"],
            seed=payload["seed"],
            config_hash=payload["config_hash"],
            extra=payload.get("extra", {}),
            path=str(path),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise BadCheckpoint(f"malformed checkpoint {path}: {e}") from e
