"""Bundled desk-scale recipes: synthetic corpora and smoke-training configs.

The default TrainConfig keeps the reference learning rates (5e-5 / 1e-4),
which suit long fine-tuning runs. The smoke recipes below train the toy
pipeline from scratch in a few hundred iterations, so they override the
learning rate; everything else follows the defaults. Tests, demos, and the
ablation machinery all use these so results are comparable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import ModelConfig, TrainConfig, VaePretrainConfig
from .utils import save_png, stable_seed


def synthetic_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic test image: smooth gradient, soft shapes, mild texture."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    for c in range(3):
        img[:, :, c] = (
            rng.uniform(0.2, 0.8)
            + rng.uniform(-0.5, 0.5) * xx
            + rng.uniform(-0.5, 0.5) * yy
        )
    for _ in range(rng.integers(4, 9)):
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.05, 0.3, 2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        color = rng.uniform(0, 1, 3)
        alpha = rng.uniform(0.4, 0.9)
        img[mask] = (1 - alpha) * img[mask] + alpha * color
    texture = gaussian_filter(rng.standard_normal((size, size, 3)), (1.2, 1.2, 0))
    img += 0.15 * texture
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def make_synthetic_corpus(
    out_dir: str | Path, count: int, size: int = 64, seed: int = 0
) -> list[Path]:
    """Write `count` synthetic PNGs; deterministic in (count, size, seed)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.default_rng(stable_seed(seed, "corpus", i))
        path = out_dir / f"img_{i:03d}.png"
        save_png(synthetic_image(size, rng), path)
        paths.append(path)
    return paths


def smoke_model_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def smoke_vae_config(seed: int = 7, **overrides) -> VaePretrainConfig:
    kwargs = dict(lr=2e-3, iterations=1500, batch_size=4, seed=seed)
    kwargs.update(overrides)
    kwargs.setdefault("model", smoke_model_config())
    return VaePretrainConfig(**kwargs)


def smoke_stage1_config(seed: int = 7, iterations: int = 500, **overrides) -> TrainConfig:
    kwargs = dict(stage=1, lr=2e-3, iterations=iterations, batch_size=4, seed=seed)
    kwargs.update(overrides)
    kwargs.setdefault("model", smoke_model_config())
    return TrainConfig(**kwargs)


def smoke_stage2_config(seed: int = 7, iterations: int = 500, **overrides) -> TrainConfig:
    kwargs = dict(stage=2, lr=1e-3, iterations=iterations, batch_size=4, seed=seed,
                  stage2_sample_steps=5)
    kwargs.update(overrides)
    kwargs.setdefault("model", smoke_model_config())
    return TrainConfig(**kwargs)
