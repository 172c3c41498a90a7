"""Protocol for the prompt-design trend comparison (acceptance criteria 7 and 8).

Three configurations trained under identical seeds and budgets on 4 synthetic
degradation tasks:
  - moe:    noisy top-K routing over N=7 prompts, K=3 (the default design)
  - soft:   all 7 prompts blended by softmax weights (multiple-prompt baseline)
  - single: one prompt shared by every task
Each run reports mean restored PSNR on held-out images of the seen tasks and
the prompt-bank cosine-similarity matrix.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from codecrestore.benchmark import DegradationTask, Split, build_manifest
from codecrestore.codecs import CodecSpec, Family
from codecrestore.config import ModelConfig, SamplerConfig
from codecrestore.evaluation import evaluate_manifest
from codecrestore.moe_prompt import prompt_similarity_matrix
from codecrestore.recipes import (
    make_synthetic_corpus,
    smoke_stage1_config,
    smoke_vae_config,
)
from codecrestore.training import model_from_checkpoint, pretrain_vae, train_stage1

TREND_TASKS = [
    DegradationTask(CodecSpec(Family.JPEG, 5), Split.SEEN),
    DegradationTask(CodecSpec(Family.LEARNED_PSNR, 1), Split.SEEN),
    DegradationTask(CodecSpec(Family.LEARNED_SSIM, 1), Split.SEEN),
    DegradationTask(CodecSpec(Family.LEARNED_GAN, 1), Split.SEEN),
]

CONFIG_VARIANTS = {
    "moe": dict(router_kind="noisy_topk", n_prompts=7, top_k=3),
    "soft": dict(router_kind="soft_all", n_prompts=7, top_k=7),
    "single": dict(router_kind="noisy_topk", n_prompts=1, top_k=1),
}

TREND_ITERATIONS = 400
TREND_SEEDS = (0, 1, 2)
EVAL_STEPS = 8


def mean_offdiag(similarity: np.ndarray) -> float:
    n = similarity.shape[0]
    mask = ~np.eye(n, dtype=bool)
    return float(similarity[mask].mean())


def run_trend_protocol(
    workdir: str | Path,
    seeds: tuple[int, ...] = TREND_SEEDS,
    iterations: int = TREND_ITERATIONS,
) -> dict:
    """Train every (seed, variant) pair; returns PSNRs and similarity stats."""
    workdir = Path(workdir)
    train_corpus = workdir / "corpus_train"
    held_corpus = workdir / "corpus_held"
    make_synthetic_corpus(train_corpus, count=8, size=64, seed=301)
    make_synthetic_corpus(held_corpus, count=4, size=64, seed=302)
    train_manifest = build_manifest(train_corpus, TREND_TASKS, workdir / "bench", seed=1)
    held_manifest = build_manifest(held_corpus, TREND_TASKS, workdir / "bench_held", seed=1)

    results: dict = {name: {"psnr": {}, "offdiag": {}} for name in CONFIG_VARIANTS}
    for seed in seeds:
        vae = pretrain_vae(
            smoke_vae_config(seed), train_manifest, workdir / f"vae_s{seed}.ckpt"
        )
        for name, variant in CONFIG_VARIANTS.items():
            cfg = smoke_stage1_config(
                seed,
                iterations=iterations,
                vae_ckpt=vae.path,
                model=ModelConfig(**variant),
            )
            ckpt = train_stage1(cfg, train_manifest, workdir / f"{name}_s{seed}.ckpt")
            report = evaluate_manifest(
                ckpt, held_manifest, ("psnr",), SamplerConfig(steps=EVAL_STEPS, seed=0)
            )
            psnr = float(np.mean([r["psnr"] for r in report.task_rows.values()]))
            results[name]["psnr"][seed] = psnr
            model, _ = model_from_checkpoint(ckpt)
            if model.moe.bank.n_prompts > 1:
                results[name]["offdiag"][seed] = mean_offdiag(
                    prompt_similarity_matrix(model.moe.bank)
                )
    return results
