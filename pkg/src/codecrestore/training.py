"""Two-stage training orchestration: data loading, augmentation, freezing, logging.

Stage 1 trains the conditioning stack (prompt experts, router, degradation
prior, visual-to-text path, modulation layers) together with the from-scratch
denoiser while the pretrained autoencoder stays fixed. Stage 2 freezes all of
that and fine-tunes only the decoder plus its low-quality compensator under
the perceptual objective. All randomness flows from explicit generators so a
(config, seed) pair reproduces checkpoints bit for bit on a single worker.
"""

from __future__ import annotations

import json
import time
from collections import Counter
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .benchmark import BenchmarkManifest
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .compensator import stage2_loss
from .config import SamplerConfig, TrainConfig, VaePretrainConfig, config_hash
from .diffusion import ToyVae, add_noise, sd_loss, vae_recon_loss
from .errors import (
    BadCheckpoint,
    EmptyManifest,
    MissingVae,
    ShapeError,
)
from .moe_prompt import importance_balance_loss
from .pipeline import (
    STAGE1_GROUPS,
    STAGE2_GROUPS,
    RestorationModel,
    build_model,
    group_of,
    param_group_hashes,
    restore_tensor,
    sample_restoration_latent,
    set_trainable,
)
from .utils import load_image_rgb, stable_seed


def augment(
    hr: np.ndarray,
    lq: np.ndarray,
    rng: np.random.Generator,
    image_size: int,
    flip: bool = True,
    rotate: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one random flip/rotation/crop identically to an aligned HR/LQ pair."""
    if hr.shape != lq.shape:
        raise ShapeError(f"hr {hr.shape} and lq {lq.shape} are not aligned")
    do_flip = flip and bool(rng.integers(2))
    k_rot = int(rng.integers(4)) if rotate else 0
    if do_flip:
        hr, lq = hr[:, ::-1], lq[:, ::-1]
    if k_rot:
        hr, lq = np.rot90(hr, k_rot), np.rot90(lq, k_rot)
    h, w = hr.shape[:2]
    if h < image_size or w < image_size:
        hr = _resize(hr, image_size)
        lq = _resize(lq, image_size)
    elif h > image_size or w > image_size:
        y = int(rng.integers(h - image_size + 1))
        x = int(rng.integers(w - image_size + 1))
        hr = hr[y : y + image_size, x : x + image_size]
        lq = lq[y : y + image_size, x : x + image_size]
    return np.ascontiguousarray(hr), np.ascontiguousarray(lq)


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    return np.asarray(
        Image.fromarray(img).resize((size, size), Image.BILINEAR), dtype=np.uint8
    )


def to_tensor01(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).float() / 255.0


class PairDataset:
    """(HR, LQ, task) pairs drawn from a benchmark manifest."""

    def __init__(self, manifest: BenchmarkManifest):
        if not manifest.entries:
            raise EmptyManifest("manifest has no entries")
        self.items = [(e.source_path, e.degraded_path, e.task_id) for e in manifest.entries]
        self.task_ids = sorted({e.task_id for e in manifest.entries})

    def __len__(self) -> int:
        return len(self.items)

    def sample_batch(
        self,
        rng: np.random.Generator,
        batch_size: int,
        image_size: int,
        flip: bool = True,
        rotate: bool = True,
    ) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
        hrs, lqs, tasks = [], [], []
        for idx in rng.integers(len(self.items), size=batch_size):
            src, deg, task = self.items[int(idx)]
            hr, lq = augment(
                load_image_rgb(src), load_image_rgb(deg), rng, image_size, flip, rotate
            )
            hrs.append(to_tensor01(hr))
            lqs.append(to_tensor01(lq))
            tasks.append(task)
        return torch.stack(hrs), torch.stack(lqs), tasks


class LossLog:
    """Append-only line-delimited training log with monotone timestamps."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._last_ts = 0.0

    def append(self, **record) -> None:
        record["ts"] = self._last_ts = max(time.time(), self._last_ts)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]


def _assert_grad_gating(model: RestorationModel, allowed: frozenset[str]) -> None:
    # Freezing contract: gradients may appear only inside the configured
    # trainable set (a trainable parameter may still get a zero gradient on
    # steps where its expert is not selected).
    for name, p in model.named_parameters():
        if p.grad is not None and p.grad.abs().max() > 0:
            group = group_of(name)
            if group not in allowed:
                raise AssertionError(f"gradient leaked into frozen group {group} ({name})")


def _task_histogram(tasks: list[str]) -> dict[str, int]:
    return dict(sorted(Counter(tasks).items()))


def pretrain_vae(
    cfg: VaePretrainConfig, manifest: BenchmarkManifest, out_path: str | Path
) -> Checkpoint:
    """Reconstruction-pretrain the autoencoder on the manifest's HR sources."""
    sources = sorted({e.source_path for e in manifest.entries})
    if not sources:
        raise EmptyManifest("manifest has no entries")
    torch.manual_seed(stable_seed(cfg.seed, "vae-init"))
    vae = ToyVae(cfg.model.latent_channels, cfg.model.vae_base)
    opt = torch.optim.Adam(vae.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(stable_seed(cfg.seed, "vae-data"))
    log = LossLog(Path(out_path).with_suffix(".log"))
    for it in range(cfg.iterations):
        # Step decay for the last fifth settles the reconstruction; the
        # fixed-lr rule applies to the diffusion stages, not this recipe.
        lr = cfg.lr * (0.1 if it >= int(0.8 * cfg.iterations) else 1.0)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = []
        for idx in rng.integers(len(sources), size=cfg.batch_size):
            img = load_image_rgb(sources[int(idx)])
            img, _ = augment(img, img, rng, cfg.image_size)
            batch.append(to_tensor01(img) * 2 - 1)
        x = torch.stack(batch)
        loss, l1, kl = vae_recon_loss(vae, x, cfg.kl_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append(iteration=it, loss=float(loss.detach()), l1=float(l1.detach()), kl=float(kl.detach()), lr=lr)
    path = save_checkpoint(
        out_path,
        stage="vae",
        state=vae.state_dict(),
        model_config=cfg.model,
        seed=cfg.seed,
        config_hash=config_hash(cfg),
    )
    return load_checkpoint(path)


def _load_vae_into(model: RestorationModel, vae_ckpt: str | Path | None) -> Checkpoint:
    if vae_ckpt is None:
        raise MissingVae("stage-1 training requires a pretrained VAE checkpoint")
    try:
        bundle = load_checkpoint(vae_ckpt)
    except BadCheckpoint as e:
        raise MissingVae(str(e)) from e
    if bundle.stage != "vae":
        raise MissingVae(f"{vae_ckpt} has stage {bundle.stage!r}, expected 'vae'")
    try:
        model.vae.load_state_dict(bundle.state)
    except RuntimeError as e:
        raise MissingVae(f"VAE checkpoint incompatible with model config: {e}") from e
    return bundle


def train_stage1(
    cfg: TrainConfig,
    manifest: BenchmarkManifest,
    out_path: str | Path = "stage1.ckpt",
) -> Checkpoint:
    """Train the conditioning stack and denoiser under the noise-prediction loss."""
    if cfg.stage != 1:
        raise ValueError("config is not a stage-1 config")
    dataset = PairDataset(manifest)
    model = build_model(cfg.model, cfg.seed)
    _load_vae_into(model, cfg.vae_ckpt)
    trainable = set_trainable(model, STAGE1_GROUPS)
    opt = torch.optim.Adam(trainable, lr=cfg.lr, betas=cfg.betas)

    data_rng = np.random.default_rng(stable_seed(cfg.seed, "stage1-data"))
    noise_rng = torch.Generator().manual_seed(stable_seed(cfg.seed, "stage1-noise"))
    log = LossLog(cfg.log_path or Path(out_path).with_suffix(".log"))
    schedule = model.schedule
    dp_active = True

    model.train()
    interrupted = False
    completed = 0
    try:
        for it in range(cfg.iterations):
            if (
                cfg.model.dp_frozen
                and dp_active
                and it >= cfg.model.dp_warmup_iters
            ):
                for _, p in model.param_groups()["dp"]:
                    p.requires_grad_(False)
                    p.grad = None
                dp_active = False
            hr01, lq01, tasks = dataset.sample_batch(
                data_rng, cfg.batch_size, cfg.image_size, cfg.flip, cfg.rotate
            )
            with torch.no_grad():
                z0 = model.vae.encode(hr01 * 2 - 1)
            t = torch.randint(
                1, schedule.num_timesteps + 1, (z0.shape[0],), generator=noise_rng
            )
            eps = torch.randn(z0.shape, generator=noise_rng, dtype=z0.dtype)
            z_t = add_noise(z0, t, eps, schedule)
            pyramid, decision, tokens = model.conditioning(
                lq01, noise_enabled=True, rng=noise_rng
            )
            eps_pred = model.denoiser(z_t, t, tokens, pyramid)
            loss = sd_loss(eps_pred, eps)
            if cfg.model.balance_weight > 0:
                loss = loss + cfg.model.balance_weight * importance_balance_loss(
                    decision.probs
                )
            opt.zero_grad()
            loss.backward()
            _assert_grad_gating(model, STAGE1_GROUPS)
            opt.step()
            completed = it + 1
            log.append(
                iteration=it,
                loss=float(loss.detach()),
                lr=cfg.lr,
                tasks=_task_histogram(tasks),
            )
    except KeyboardInterrupt:
        interrupted = True

    path = save_checkpoint(
        out_path,
        stage="stage1",
        state=model.state_dict(),
        model_config=cfg.model,
        seed=cfg.seed,
        config_hash=config_hash(cfg),
        extra={"interrupted": interrupted, "completed_iterations": completed},
    )
    return load_checkpoint(path)


def train_stage2(
    cfg: TrainConfig,
    manifest: BenchmarkManifest,
    stage1_ckpt: str | Path | Checkpoint,
    out_path: str | Path = "stage2.ckpt",
) -> Checkpoint:
    """Fine-tune the decoder + compensator on sampled latents, all else frozen."""
    if cfg.stage != 2:
        raise ValueError("config is not a stage-2 config")
    bundle = (
        stage1_ckpt if isinstance(stage1_ckpt, Checkpoint) else load_checkpoint(stage1_ckpt)
    )
    if bundle.stage != "stage1":
        raise BadCheckpoint(f"stage-2 training starts from a stage1 checkpoint, got {bundle.stage!r}")
    dataset = PairDataset(manifest)
    model = build_model(bundle.model_config, bundle.seed)
    model.load_state_dict(bundle.state)
    trainable = set_trainable(model, STAGE2_GROUPS)
    opt = torch.optim.Adam(trainable, lr=cfg.lr, betas=cfg.betas)

    frozen_groups = sorted(set(param_group_hashes(model)) - set(STAGE2_GROUPS))
    hashes_before = {
        g: h for g, h in param_group_hashes(model).items() if g in frozen_groups
    }

    data_rng = np.random.default_rng(stable_seed(cfg.seed, "stage2-data"))
    log = LossLog(cfg.log_path or Path(out_path).with_suffix(".log"))

    interrupted = False
    completed = 0
    try:
        for it in range(cfg.iterations):
            hr01, lq01, tasks = dataset.sample_batch(
                data_rng, cfg.batch_size, cfg.image_size, cfg.flip, cfg.rotate
            )
            with torch.no_grad():
                pyramid, _, tokens = model.conditioning(lq01, noise_enabled=False)
                rng = torch.Generator().manual_seed(
                    stable_seed(cfg.seed, "stage2-latent", it)
                )
                z0_hat = sample_restoration_latent(
                    model,
                    lq01,
                    pyramid,
                    tokens,
                    steps=cfg.stage2_sample_steps,
                    eta=0.0,
                    rng=rng,
                    init_strength=cfg.stage2_init_strength,
                )
                z_lq = model.vae.encode(lq01 * 2 - 1)
            loss = stage2_loss(
                z_lq,
                z0_hat,
                hr01 * 2 - 1,
                model.vae,
                model.compensator,
                model.pdist,
                cfg.stage2_l1_weight,
                lq_image=lq01 * 2 - 1,
            )
            opt.zero_grad()
            loss.backward()
            _assert_grad_gating(model, STAGE2_GROUPS)
            opt.step()
            completed = it + 1
            log.append(
                iteration=it,
                loss=float(loss.detach()),
                lr=cfg.lr,
                tasks=_task_histogram(tasks),
            )
    except KeyboardInterrupt:
        interrupted = True

    hashes_after = {
        g: h for g, h in param_group_hashes(model).items() if g in frozen_groups
    }
    if hashes_after != hashes_before:
        changed = [g for g in hashes_before if hashes_after[g] != hashes_before[g]]
        raise AssertionError(f"stage-2 training modified frozen groups: {changed}")

    path = save_checkpoint(
        out_path,
        stage="stage2",
        state=model.state_dict(),
        model_config=bundle.model_config,
        seed=cfg.seed,
        config_hash=config_hash(cfg),
        extra={
            "frozen_backbone_hash": json.dumps(hashes_before, sort_keys=True),
            "interrupted": interrupted,
            "completed_iterations": completed,
        },
    )
    return load_checkpoint(path)


def model_from_checkpoint(ckpt: str | Path | Checkpoint) -> tuple[RestorationModel, Checkpoint]:
    bundle = ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)
    if bundle.stage_index() < 1:
        raise BadCheckpoint(f"need a stage1/stage2 checkpoint, got {bundle.stage!r}")
    model = build_model(bundle.model_config, bundle.seed)
    try:
        model.load_state_dict(bundle.state)
    except RuntimeError as e:
        raise BadCheckpoint(f"checkpoint state incompatible: {e}") from e
    model.eval()
    return model, bundle


def restore(
    ckpt: str | Path | Checkpoint,
    lq_image: np.ndarray,
    sampler: SamplerConfig | None = None,
) -> np.ndarray:
    """Restore one low-quality raster; returns float image in [0,1]."""
    sampler = sampler or SamplerConfig()
    model, bundle = model_from_checkpoint(ckpt)
    lq = np.asarray(lq_image)
    if lq.dtype == np.uint8:
        lq01 = to_tensor01(lq)
    else:
        lq01 = torch.from_numpy(lq.astype(np.float32)).permute(2, 0, 1)
    out = restore_tensor(
        model,
        lq01,
        steps=sampler.steps,
        eta=sampler.eta,
        seed=sampler.seed,
        use_compensator=bundle.stage == "stage2",
        init_strength=sampler.init_strength,
    )
    return out.permute(1, 2, 0).numpy()
