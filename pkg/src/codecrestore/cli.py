"""Single entry point exposing every pipeline stage as a subcommand.

Exit codes: 0 success, 1 domain error, 2 usage error. Every subcommand honors
--seed and --config; command-line flags override config-file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CodecRestoreError


class _ConfigReferenceAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        print(config_reference_text(), end="")
        parser.exit(0)


def config_reference_text() -> str:
    """Flag/key reference generated from the config schema dataclasses."""
    import dataclasses

    from .config import ModelConfig, SamplerConfig, TrainConfig, VaePretrainConfig

    lines = [
        "# Config file reference (YAML, version 1)",
        "# Sections: version, seed, model, train.stage1, train.stage2, vae, sampler, benchmark",
        "# CLI flags of the same name override file values.",
        "",
    ]
    sections = [
        ("model", ModelConfig()),
        ("train.stage1 / train.stage2", TrainConfig(stage=1)),
        ("vae", VaePretrainConfig()),
        ("sampler", SamplerConfig()),
    ]
    for name, instance in sections:
        lines.append(f"[{name}]")
        for field in dataclasses.fields(instance):
            if field.name == "model":
                continue
            lines.append(f"  {field.name} = {getattr(instance, field.name)!r}")
        lines.append("")
    lines += [
        "[benchmark]",
        "  qualities = per-family seen quality lists, e.g. {jpeg: [5, 10, 15]}",
        "  codec.<family>.encode_cmd / decode_cmd = external encoder templates",
        "    with {in}, {out}, {qp} placeholders (hevc, vvc, avc)",
        "",
    ]
    return "\n".join(lines)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (YAML)")
    p.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codecrestore",
        description="Prompt-expert latent diffusion for compressed-image restoration.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "--config-reference",
        action=_ConfigReferenceAction,
        nargs=0,
        help="print every config-file key with its default and exit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-benchmark", help="materialize the degradation benchmark")
    p.add_argument("--corpus", required=True, help="directory of source images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tasks", help="task list file (JSON, as emitted by --dump-tasks)")
    p.add_argument("--dump-tasks", action="store_true", help="print the default task list and exit")
    p.add_argument("--workers", type=int, default=1)
    _add_common(p)

    p = sub.add_parser("pretrain-vae", help="reconstruction-pretrain the autoencoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    _add_common(p)

    p = sub.add_parser("train-stage1", help="train conditioning stack + denoiser")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vae", help="pretrained VAE checkpoint (or set train.stage1.vae_ckpt)")
    p.add_argument("--out", default="stage1.ckpt")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    _add_common(p)

    p = sub.add_parser("train-stage2", help="fine-tune decoder + compensator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--from", dest="from_ckpt", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", default="stage2.ckpt")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    _add_common(p)

    p = sub.add_parser("restore", help="restore one low-quality image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--eta", type=float)
    _add_common(p)

    p = sub.add_parser("evaluate", help="metric report over a benchmark manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report text file")
    p.add_argument("--plots", help="directory for optional plots")
    p.add_argument("--metrics", default="psnr,ssim,pdist")
    p.add_argument("--steps", type=int)
    _add_common(p)

    p = sub.add_parser("ablation", help="prompt-count / top-K sweep at smoke scale")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="results JSON file")
    p.add_argument("--n-grid", help="comma-separated prompt counts")
    p.add_argument("--k-grid", help="comma-separated top-K values")
    p.add_argument("--iterations", type=int)
    p.add_argument("--workdir", default="ablation")
    p.add_argument("--plots", help="directory for curve plots")
    _add_common(p)

    p = sub.add_parser("inspect-router", help="gate-usage histograms and prompt similarity")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--heatmap", help="write a similarity heatmap PNG here")
    _add_common(p)
    return parser


def _load_cfg(args) -> dict:
    from .config import load_config_file

    data = load_config_file(args.config) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    return data


def _cmd_build_benchmark(args) -> int:
    from .benchmark import build_manifest, default_task_list, _task_to_dict, _task_from_dict

    cfg = _load_cfg(args)
    bench = cfg.get("benchmark") or {}
    if args.tasks:
        with open(args.tasks, encoding="utf-8") as f:
            tasks = [_task_from_dict(d) for d in json.load(f)]
    else:
        tasks = default_task_list(bench.get("qualities"))
    if args.dump_tasks:
        print(json.dumps([_task_to_dict(t) for t in tasks], indent=2))
        return 0
    manifest = build_manifest(
        args.corpus,
        tasks,
        args.out,
        seed=cfg.get("seed", 0),
        external_commands=bench.get("codec"),
        workers=args.workers,
    )
    print(
        f"built {len(manifest.entries)} entries "
        f"({manifest.corpus_size} images x {len(manifest.built_tasks())} tasks); "
        f"{len(manifest.skipped)} tasks skipped"
    )
    for skip in manifest.skipped:
        print(f"  skipped {skip.task_id}: {skip.reason}")
    print(f"manifest: {Path(args.out) / 'manifest.jsonl'}")
    return 0


def _cmd_pretrain_vae(args) -> int:
    from .benchmark import load_manifest
    from .config import vae_config_from
    from .training import pretrain_vae

    cfg = _load_cfg(args)
    vcfg = vae_config_from(cfg, {"iterations": args.iterations, "lr": args.lr})
    bundle = pretrain_vae(vcfg, load_manifest(args.manifest), args.out)
    print(f"saved VAE checkpoint: {bundle.path}")
    return 0


def _train_common(args, stage: int):
    from .benchmark import load_manifest
    from .config import train_config_from

    cfg = _load_cfg(args)
    overrides = {
        "iterations": args.iterations,
        "lr": args.lr,
        "batch_size": getattr(args, "batch_size", None),
    }
    if stage == 1 and args.vae:
        overrides["vae_ckpt"] = args.vae
    tcfg = train_config_from(cfg, stage, overrides)
    return tcfg, load_manifest(args.manifest)


def _cmd_train_stage1(args) -> int:
    from .training import train_stage1

    tcfg, manifest = _train_common(args, 1)
    bundle = train_stage1(tcfg, manifest, args.out)
    if bundle.extra.get("interrupted"):
        print(f"interrupted; checkpoint saved at {bundle.path}")
        return 130
    print(f"saved stage-1 checkpoint: {bundle.path}")
    return 0


def _cmd_train_stage2(args) -> int:
    from .training import train_stage2

    tcfg, manifest = _train_common(args, 2)
    bundle = train_stage2(tcfg, manifest, args.from_ckpt, args.out)
    if bundle.extra.get("interrupted"):
        print(f"interrupted; checkpoint saved at {bundle.path}")
        return 130
    print(f"saved stage-2 checkpoint: {bundle.path}")
    return 0


def _cmd_restore(args) -> int:
    from .config import sampler_config_from
    from .training import restore
    from .utils import load_image_rgb, save_png

    cfg = _load_cfg(args)
    sampler = sampler_config_from(cfg, {"steps": args.steps, "eta": args.eta})
    out = restore(args.ckpt, load_image_rgb(args.input), sampler)
    save_png((out * 255).round().astype(np.uint8), args.out)
    print(f"restored image written to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .benchmark import load_manifest
    from .config import sampler_config_from
    from .evaluation import evaluate_manifest

    cfg = _load_cfg(args)
    sampler = sampler_config_from(cfg, {"steps": args.steps})
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    report = evaluate_manifest(args.ckpt, load_manifest(args.manifest), metrics, sampler)
    report.save(args.out)
    print(report.to_text(), end="")
    if args.plots:
        from .evaluation import save_report_plots

        for path in save_report_plots(report, args.plots):
            print(f"plot written to {path}")
    print(f"report written to {args.out}")
    return 0


def _cmd_ablation(args) -> int:
    from .benchmark import load_manifest
    from .config import train_config_from
    from .evaluation import DEFAULT_K_GRID, DEFAULT_N_GRID, ablation_sweep

    cfg = _load_cfg(args)
    tcfg = train_config_from(cfg, 1, {"iterations": args.iterations})
    n_grid = (
        tuple(int(v) for v in args.n_grid.split(",")) if args.n_grid else DEFAULT_N_GRID
    )
    k_grid = (
        tuple(int(v) for v in args.k_grid.split(",")) if args.k_grid else DEFAULT_K_GRID
    )
    results = ablation_sweep(
        tcfg, n_grid, k_grid, load_manifest(args.manifest), workdir=args.workdir
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(results, indent=2), encoding="utf-8")
    if args.plots:
        from .evaluation import save_ablation_plots

        save_ablation_plots(results, args.plots)
    print(f"ablation results written to {args.out}")
    return 0


def _cmd_inspect_router(args) -> int:
    from .benchmark import load_manifest
    from .evaluation import router_report, save_similarity_heatmap

    usage, similarity = router_report(args.ckpt, load_manifest(args.manifest))
    lines = ["# router-report v1"]
    for task_id, counts in sorted(usage.items()):
        lines.append(f"usage {task_id} " + " ".join(str(int(c)) for c in counts))
    for i, row in enumerate(similarity):
        lines.append(f"similarity {i} " + " ".join(f"{v:.6f}" for v in row))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"router report written to {args.out}")
    else:
        print(text, end="")
    if args.heatmap:
        save_similarity_heatmap(similarity, args.heatmap)
        print(f"heatmap written to {args.heatmap}")
    return 0


_COMMANDS = {
    "build-benchmark": _cmd_build_benchmark,
    "pretrain-vae": _cmd_pretrain_vae,
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "restore": _cmd_restore,
    "evaluate": _cmd_evaluate,
    "ablation": _cmd_ablation,
    "inspect-router": _cmd_inspect_router,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CodecRestoreError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
