"""Evaluation harness tour: metric reports, router diagnostics, a tiny ablation.

Requires the checkpoints written by 03_train_toy_pipeline.py (run that
first). Produces the per-task / per-family / per-split report, the
expert-usage histogram with the prompt similarity matrix, and a two-point
prompt-count sweep.
"""

from pathlib import Path

from codecrestore.benchmark import load_manifest
from codecrestore.config import SamplerConfig
from codecrestore.evaluation import (
    ablation_sweep,
    evaluate_manifest,
    router_report,
    save_similarity_heatmap,
)
from codecrestore.recipes import smoke_stage1_config

WORK = Path("demo_output/training")


def main() -> None:
    held = load_manifest(WORK / "bench_held" / "manifest.jsonl")
    train = load_manifest(WORK / "bench" / "manifest.jsonl")
    ckpt = WORK / "stage2.ckpt"
    if not ckpt.exists():
        raise SystemExit("run demos/03_train_toy_pipeline.py first")

    print("== metric report over the held-out manifest")
    report = evaluate_manifest(ckpt, held, ("psnr", "ssim", "pdist"),
                               SamplerConfig(steps=10, seed=5))
    print(report.to_text())

    print("== router usage per task (noise disabled) and prompt similarity")
    usage, similarity = router_report(ckpt, held)
    for task_id, counts in sorted(usage.items()):
        print(f"   {task_id:18s} {counts.tolist()}")
    heatmap = WORK / "similarity.png"
    save_similarity_heatmap(similarity, heatmap)
    print(f"   similarity heatmap -> {heatmap}")

    print("== tiny ablation sweep (N in {1, 4}; K in {1, 3}) at 60 iterations")
    cfg = smoke_stage1_config(0, iterations=60, vae_ckpt=str(WORK / "vae.ckpt"))
    results = ablation_sweep(
        cfg, (1, 4), (1, 3), train,
        eval_manifest=held,
        sampler=SamplerConfig(steps=6, seed=0),
        workdir=WORK / "ablation",
    )
    for sweep in ("n_sweep", "k_sweep"):
        for row in results[sweep]:
            print(f"   {sweep}: N={row['n']} K={row['k']} "
                  f"psnr={row['psnr']:.2f} pdist={row['pdist']:.4f}")


if __name__ == "__main__":
    main()
