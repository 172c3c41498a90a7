"""End-to-end toy training: VAE pretrain, stage 1, stage 2, then restore.

The full two-stage procedure at demo scale (a few minutes on CPU): stage 1
trains the prompt experts, router, degradation prior, visual-to-text path and
denoiser under the noise-prediction loss with the autoencoder frozen; stage 2
freezes all of that and fine-tunes only the decoder plus its low-quality
compensator. Writes an LQ / restored / ground-truth strip per held-out image.
"""

from pathlib import Path

import numpy as np

from codecrestore.benchmark import DegradationTask, Split, build_manifest
from codecrestore.codecs import CodecSpec, Family
from codecrestore.config import SamplerConfig
from codecrestore.metrics import psnr
from codecrestore.recipes import (
    make_synthetic_corpus,
    smoke_stage1_config,
    smoke_stage2_config,
    smoke_vae_config,
)
from codecrestore.training import LossLog, pretrain_vae, restore, train_stage1, train_stage2
from codecrestore.utils import load_image_rgb, save_png

WORK = Path("demo_output/training")
SEED = 7
ITERS = 200  # demo-sized; the smoke recipes default to 500


def main() -> None:
    make_synthetic_corpus(WORK / "corpus", count=8, size=64, seed=11)
    make_synthetic_corpus(WORK / "heldout", count=2, size=64, seed=97)
    tasks = [
        DegradationTask(CodecSpec(Family.JPEG, 5), Split.SEEN),
        DegradationTask(CodecSpec(Family.LEARNED_PSNR, 1), Split.SEEN),
    ]
    train_manifest = build_manifest(WORK / "corpus", tasks, WORK / "bench", seed=SEED)
    held_manifest = build_manifest(WORK / "heldout", tasks, WORK / "bench_held", seed=SEED)

    print("== VAE pretraining (reconstruction, frozen afterwards)")
    vae = pretrain_vae(smoke_vae_config(SEED, iterations=800), train_manifest, WORK / "vae.ckpt")

    print("== stage 1: conditioning stack + denoiser under the noise-prediction loss")
    cfg1 = smoke_stage1_config(SEED, iterations=ITERS, vae_ckpt=vae.path)
    s1 = train_stage1(cfg1, train_manifest, WORK / "stage1.ckpt")
    losses = [r["loss"] for r in LossLog.read(WORK / "stage1.log")]
    print(f"   loss: first20 mean {np.mean(losses[:20]):.3f} -> last20 mean {np.mean(losses[-20:]):.3f}")

    print("== stage 2: decoder + compensator only (everything else frozen)")
    cfg2 = smoke_stage2_config(SEED, iterations=ITERS)
    s2 = train_stage2(cfg2, train_manifest, s1, WORK / "stage2.ckpt")
    losses2 = [r["loss"] for r in LossLog.read(WORK / "stage2.log")]
    print(f"   loss: first20 mean {np.mean(losses2[:20]):.3f} -> last20 mean {np.mean(losses2[-20:]):.3f}")

    print("== restoring held-out images (LQ | restored | ground truth)")
    sampler = SamplerConfig(steps=10, seed=5)
    for i, entry in enumerate(held_manifest.entries):
        hr = load_image_rgb(entry.source_path)
        lq = load_image_rgb(entry.degraded_path)
        out = restore(s2, lq, sampler)
        restored = (out * 255).round().astype(np.uint8)
        strip = np.concatenate([lq, restored, hr], axis=1)
        path = WORK / f"strip_{i}_{entry.task_id}.png"
        save_png(strip, path)
        print(f"   {entry.task_id:18s} LQ {psnr(lq, hr):5.2f} dB -> restored "
              f"{psnr(restored, hr):5.2f} dB   ({path})")


if __name__ == "__main__":
    main()
