"""Configuration: model/training dataclasses and the versioned YAML config file.

One config file describes a whole experiment; each CLI subcommand reads its
section and command-line flags override file values. Defaults follow the
reference training recipe (Adam betas 0.9/0.999, stage-1 lr 5e-5, stage-2
lr 1e-4) scaled down to desk-size iteration counts and images.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

CONFIG_VERSION = 1

STAGE_DEFAULT_LR = {1: 5e-5, 2: 1e-4}
STAGE_DEFAULT_ITERATIONS = {1: 2000, 2: 500}


@dataclass
class ModelConfig:
    """Hyperparameters of every pipeline module."""

    image_size: int = 64
    latent_channels: int = 4
    vae_base: int = 32
    num_timesteps: int = 200
    schedule_kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    n_prompts: int = 7
    top_k: int = 3
    d_dp: int = 64
    d_route: int = 64
    attn_dim: int = 32
    dp_tokens: int = 4
    pyramid_channels: tuple[int, int, int] = (32, 48, 64)
    aggregation: str = "unweighted_sum"
    router_kind: str = "noisy_topk"
    renormalize: bool = False
    balance_weight: float = 0.0
    prompt_init_std: float = 0.02
    unet_base: int = 32
    unet_mults: tuple[int, int, int] = (1, 2, 3)
    time_dim: int = 64
    n_tok: int = 4
    d_text: int = 64
    d_vis: int = 128
    patch: int = 8
    enhancer_dim: int = 48
    enhancer_depth: int = 2
    vit_dim: int = 64
    vit_depth: int = 4
    v2t_enabled: bool = True
    dp_frozen: bool = False
    dp_warmup_iters: int = 0

    def __post_init__(self):
        self.pyramid_channels = tuple(self.pyramid_channels)
        self.unet_mults = tuple(self.unet_mults)
        if self.image_size % 4:
            raise ValueError(f"image_size {self.image_size} must be divisible by 4")
        if not 1 <= self.top_k <= self.n_prompts:
            raise ValueError(f"need 1 <= K <= N, got K={self.top_k}, N={self.n_prompts}")


@dataclass
class TrainConfig:
    """One training stage: optimizer settings, budget, seeding, augmentation."""

    stage: int = 1
    lr: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    iterations: int | None = None
    batch_size: int = 4
    image_size: int | None = None
    seed: int = 0
    flip: bool = True
    rotate: bool = True
    kl_weight: float = 1e-6
    stage2_l1_weight: float = 0.5
    stage2_sample_steps: int = 10
    stage2_init_strength: float = 0.3
    vae_ckpt: str | None = None
    log_path: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.lr is None:
            self.lr = STAGE_DEFAULT_LR[self.stage]
        if self.iterations is None:
            self.iterations = STAGE_DEFAULT_ITERATIONS[self.stage]
        if self.image_size is None:
            self.image_size = self.model.image_size
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 < self.betas[0] < 1 and 0 < self.betas[1] < 1):
            raise ValueError(f"Adam betas must lie in (0,1), got {self.betas}")
        if self.image_size % 4:
            raise ValueError(f"image_size {self.image_size} must be divisible by 4")


@dataclass
class SamplerConfig:
    steps: int = 20
    eta: float = 0.0
    seed: int = 0
    # Fraction of the chain to run, starting from the noised LQ encoding;
    # 0 starts from pure noise (the text-to-image regime).
    init_strength: float = 0.3


@dataclass
class VaePretrainConfig:
    lr: float = 1e-3
    iterations: int = 1500
    batch_size: int = 4
    image_size: int = 64
    seed: int = 0
    kl_weight: float = 1e-6
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)


_KNOWN_SECTIONS = {"version", "seed", "model", "train", "vae", "sampler", "benchmark"}


def load_config_file(path: str | Path) -> dict:
    """Parse and validate the experiment config file."""
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a mapping")
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ValueError(f"config version {version} unsupported (expected {CONFIG_VERSION})")
    unknown = set(data) - _KNOWN_SECTIONS
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return data


def train_config_from(
    data: dict, stage: int, overrides: dict | None = None
) -> TrainConfig:
    """Build a TrainConfig from a config dict plus CLI-style overrides."""
    section = dict((data.get("train") or {}).get(f"stage{stage}") or {})
    section["stage"] = stage
    if "seed" in data and "seed" not in section:
        section["seed"] = data["seed"]
    model_kwargs = dict(data.get("model") or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in {f.name for f in fields(ModelConfig)}:
            model_kwargs[key] = value
        else:
            section[key] = value
    if model_kwargs:
        section["model"] = ModelConfig(**model_kwargs)
    return TrainConfig(**section)


def sampler_config_from(data: dict, overrides: dict | None = None) -> SamplerConfig:
    section = dict(data.get("sampler") or {})
    if "seed" in data and "seed" not in section:
        section["seed"] = data["seed"]
    for key, value in (overrides or {}).items():
        if value is not None:
            section[key] = value
    return SamplerConfig(**section)


def vae_config_from(data: dict, overrides: dict | None = None) -> VaePretrainConfig:
    section = dict(data.get("vae") or {})
    if "seed" in data and "seed" not in section:
        section["seed"] = data["seed"]
    model_kwargs = dict(data.get("model") or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in {f.name for f in fields(ModelConfig)}:
            model_kwargs[key] = value
        else:
            section[key] = value
    if model_kwargs:
        section["model"] = ModelConfig(**model_kwargs)
    return VaePretrainConfig(**section)


def config_hash(cfg) -> str:
    """Stable hash of a config dataclass for checkpoint provenance."""
    payload = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
