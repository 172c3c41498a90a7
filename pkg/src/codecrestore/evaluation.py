"""Evaluation harness: per-task metric reports, N/K ablation sweeps, router diagnostics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .benchmark import BenchmarkManifest
from .checkpoint import Checkpoint
from .config import SamplerConfig, TrainConfig
from .errors import InvalidGrid
from .metrics import perceptual_distance, psnr, ssim
from .moe_prompt import prompt_similarity_matrix, route
from .utils import load_image_rgb

DEFAULT_METRICS = ("psnr", "ssim", "pdist")
# FID needs a pretrained feature network; the report schema keeps the column
# name reserved so externally computed values can be merged in.
RESERVED_METRICS = ("fid",)

DEFAULT_N_GRID = (1, 4, 7, 11, 14, 17, 21)
DEFAULT_K_GRID = (1, 3, 5, 7)

_METRIC_FNS = {"psnr": psnr, "ssim": ssim, "pdist": perceptual_distance}


@dataclass
class Report:
    """Metric rows at task, family, and split granularity."""

    meta: dict = field(default_factory=dict)
    task_rows: dict[str, dict[str, float]] = field(default_factory=dict)
    family_rows: dict[str, dict[str, float]] = field(default_factory=dict)
    split_rows: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"# codecrestore-report v1 tool={__version__}"]
        for key, value in sorted(self.meta.items()):
            lines.append(f"# {key}={value}")
        lines.append(f"# reserved_metrics={','.join(RESERVED_METRICS)}")
        for scope, rows in (
            ("task", self.task_rows),
            ("family", self.family_rows),
            ("split", self.split_rows),
        ):
            for name, metrics in sorted(rows.items()):
                for metric, value in sorted(metrics.items()):
                    lines.append(f"{scope} {name} {metric} {value:.6f}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _as_restorer(ckpt_or_fn, sampler: SamplerConfig):
    if callable(ckpt_or_fn):
        return ckpt_or_fn
    from .training import model_from_checkpoint
    from .pipeline import restore_tensor
    from .training import to_tensor01

    model, bundle = model_from_checkpoint(ckpt_or_fn)

    def run(lq: np.ndarray) -> np.ndarray:
        out = restore_tensor(
            model,
            to_tensor01(lq),
            steps=sampler.steps,
            eta=sampler.eta,
            seed=sampler.seed,
            use_compensator=bundle.stage == "stage2",
            init_strength=sampler.init_strength,
        )
        return (out.permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)

    return run


def evaluate_manifest(
    ckpt_or_restorer,
    manifest: BenchmarkManifest,
    metrics: tuple[str, ...] = DEFAULT_METRICS,
    sampler: SamplerConfig | None = None,
) -> Report:
    """Mean metrics per task, per family (over its levels), and per split.

    The first argument is a checkpoint (path or bundle) or any callable
    mapping a degraded uint8 raster to a restored uint8 raster.
    """
    unknown = set(metrics) - set(_METRIC_FNS)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    restorer = _as_restorer(ckpt_or_restorer, sampler or SamplerConfig())

    per_task_values: dict[str, dict[str, list[float]]] = defaultdict(
        lambda: defaultdict(list)
    )
    for entry in manifest.entries:
        hr = load_image_rgb(entry.source_path)
        lq = load_image_rgb(entry.degraded_path)
        restored = restorer(lq)
        for m in metrics:
            per_task_values[entry.task_id][m].append(_METRIC_FNS[m](restored, hr))

    report = Report(
        meta={
            "corpus_size": manifest.corpus_size,
            "n_tasks": len(per_task_values),
            "metrics": ",".join(metrics),
        }
    )
    for task_id, values in per_task_values.items():
        report.task_rows[task_id] = {m: float(np.mean(v)) for m, v in values.items()}

    by_family: dict[str, list[dict]] = defaultdict(list)
    by_split: dict[str, list[dict]] = defaultdict(list)
    for task in manifest.tasks:
        if task.task_id not in report.task_rows:
            continue
        row = report.task_rows[task.task_id]
        by_family[f"{task.split.value}/{task.codec.family.value}"].append(row)
        by_split[task.split.value].append(row)
    for scope_dict, out_rows in ((by_family, report.family_rows), (by_split, report.split_rows)):
        for name, rows in scope_dict.items():
            out_rows[name] = {
                m: float(np.mean([r[m] for r in rows])) for m in metrics
            }
    return report


def router_report(
    ckpt, manifest: BenchmarkManifest
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Expert-selection counts per task (noise disabled) and the prompt similarity matrix."""
    from .training import model_from_checkpoint, to_tensor01

    model, _ = model_from_checkpoint(ckpt)
    n = model.moe.bank.n_prompts
    usage: dict[str, np.ndarray] = defaultdict(lambda: np.zeros(n, dtype=np.int64))
    with torch.no_grad():
        for entry in manifest.entries:
            lq01 = to_tensor01(load_image_rgb(entry.degraded_path)).unsqueeze(0)
            dp = model.dp(lq01)
            base = model.moe.stem(lq01)
            attended = model.moe.cross_attn(base, dp)
            decision = route(model.moe.router_pool(attended), model.moe.bank)
            for idx in decision.indices.flatten().tolist():
                usage[entry.task_id][idx] += 1
    return dict(usage), prompt_similarity_matrix(model.moe.bank)


def ablation_sweep(
    base_cfg: TrainConfig,
    n_values: tuple[int, ...],
    k_values: tuple[int, ...],
    manifest: BenchmarkManifest,
    *,
    eval_manifest: BenchmarkManifest | None = None,
    sampler: SamplerConfig | None = None,
    workdir: str | Path = "ablation",
) -> dict:
    """Train/evaluate smoke-scale models across prompt-count and top-K grids.

    The N sweep uses K = min(base K, N); the K sweep holds N at the base
    value. Emits restored-PSNR and perceptual-distance curves.
    """
    from .training import train_stage1

    if any(n < 1 for n in n_values) or any(k < 1 for k in k_values):
        raise InvalidGrid("grid values must be >= 1")
    if any(k > base_cfg.model.n_prompts for k in k_values):
        raise InvalidGrid(
            f"K values {k_values} exceed N={base_cfg.model.n_prompts}"
        )
    workdir = Path(workdir)
    eval_manifest = eval_manifest or manifest
    sampler = sampler or SamplerConfig(steps=base_cfg.stage2_sample_steps)

    def run_one(tag: str, n: int, k: int) -> dict[str, float]:
        cfg = replace(
            base_cfg, model=replace(base_cfg.model, n_prompts=n, top_k=k)
        )
        ckpt = train_stage1(cfg, manifest, workdir / f"{tag}.ckpt")
        report = evaluate_manifest(ckpt, eval_manifest, ("psnr", "pdist"), sampler)
        return {
            "psnr": float(np.mean([r["psnr"] for r in report.task_rows.values()])),
            "pdist": float(np.mean([r["pdist"] for r in report.task_rows.values()])),
        }

    results = {"n_sweep": [], "k_sweep": []}
    for n in n_values:
        k = min(base_cfg.model.top_k, n)
        results["n_sweep"].append({"n": n, "k": k, **run_one(f"n{n}", n, k)})
    for k in k_values:
        n = base_cfg.model.n_prompts
        results["k_sweep"].append({"n": n, "k": k, **run_one(f"k{k}", n, k)})
    return results


def save_report_plots(report: Report, out_dir: str | Path) -> list[Path]:
    """One bar chart per metric across tasks."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not report.task_rows:
        return []
    metrics = sorted(next(iter(report.task_rows.values())))
    tasks = sorted(report.task_rows)
    paths = []
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(tasks)), 3.5))
        ax.bar(range(len(tasks)), [report.task_rows[t][metric] for t in tasks])
        ax.set_xticks(range(len(tasks)))
        ax.set_xticklabels(tasks, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel(metric)
        fig.tight_layout()
        path = out_dir / f"{metric}_by_task.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def save_ablation_plots(results: dict, out_dir: str | Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for sweep, xkey in (("n_sweep", "n"), ("k_sweep", "k")):
        rows = results[sweep]
        if not rows:
            continue
        xs = [r[xkey] for r in rows]
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        axes[0].plot(xs, [r["psnr"] for r in rows], "o-")
        axes[0].set_xlabel(xkey.upper())
        axes[0].set_ylabel("PSNR (dB)")
        axes[1].plot(xs, [r["pdist"] for r in rows], "o-")
        axes[1].set_xlabel(xkey.upper())
        axes[1].set_ylabel("perceptual distance")
        fig.tight_layout()
        path = out_dir / f"{sweep}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def save_similarity_heatmap(matrix: np.ndarray, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(matrix, vmin=-1, vmax=1, cmap="viridis")
    ax.set_xlabel("prompt")
    ax.set_ylabel("prompt")
    fig.colorbar(im, ax=ax, label="cosine similarity")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
