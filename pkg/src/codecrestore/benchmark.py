"""Degradation benchmark builder: 7 codec families x 3 quality levels, plus unseen splits.

The seen split enumerates the 21 standard tasks; the cross-degree split holds
unseen VVC quality points and the cross-type split an unseen codec family
(AVC). Building materializes every (image, task) pair as a lossless PNG and a
line-delimited manifest whose entry order is deterministic regardless of
worker scheduling.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from . import __version__
from .codecs import Backend, CodecSpec, Family, encode_decode, probe_external
from .errors import EmptyCorpus, IoError, MissingBackend
from .utils import load_image_rgb, save_png, sha256_file, stable_seed

MANIFEST_FORMAT = "cir-benchmark-manifest"
MANIFEST_VERSION = 1

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}

DEFAULT_QUALITIES: dict[str, tuple[int, ...]] = {
    "jpeg": (5, 10, 15),
    "webp": (5, 10, 15),
    "hevc": (37, 42, 47),
    "vvc": (37, 42, 47),
    "learned_psnr": (1, 2, 3),
    "learned_ssim": (1, 2, 3),
    "learned_gan": (1, 2, 3),
}
CROSS_DEGREE_VVC_QPS = (32, 52)
CROSS_TYPE_AVC_QPS = (37, 42, 47)


class Split(str, Enum):
    SEEN = "seen"
    CROSS_DEGREE = "cross_degree"
    CROSS_TYPE = "cross_type"


@dataclass(frozen=True)
class DegradationTask:
    codec: CodecSpec
    split: Split = Split.SEEN
    task_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "split", Split(self.split))
        if not self.task_id:
            object.__setattr__(self, "task_id", self.codec.label)


@dataclass(frozen=True)
class ManifestEntry:
    source_path: str
    task_id: str
    degraded_path: str
    checksum: str


@dataclass(frozen=True)
class SkipRecord:
    task_id: str
    reason: str


@dataclass
class BenchmarkManifest:
    entries: list[ManifestEntry]
    corpus_size: int
    tasks: list[DegradationTask]
    skipped: list[SkipRecord] = field(default_factory=list)
    corpus_hash: str = ""
    seed: int = 0
    tool_version: str = __version__

    def built_tasks(self) -> list[DegradationTask]:
        skipped_ids = {s.task_id for s in self.skipped}
        return [t for t in self.tasks if t.task_id not in skipped_ids]

    def task_by_id(self, task_id: str) -> DegradationTask:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)


def default_task_list(
    quality_overrides: dict[str, list[int]] | None = None,
    include_unseen: bool = True,
) -> list[DegradationTask]:
    """The 21 seen tasks plus the configured cross-degree and cross-type tasks.

    `quality_overrides` substitutes the per-family seen quality lists, e.g.
    {"jpeg": [10, 15, 20]}.
    """
    qualities = dict(DEFAULT_QUALITIES)
    for family, values in (quality_overrides or {}).items():
        qualities[family] = tuple(int(v) for v in values)

    tasks = [
        DegradationTask(CodecSpec(Family(family), q), Split.SEEN)
        for family, qs in qualities.items()
        for q in qs
    ]
    if include_unseen:
        tasks += [
            DegradationTask(CodecSpec(Family.VVC, qp), Split.CROSS_DEGREE)
            for qp in CROSS_DEGREE_VVC_QPS
        ]
        tasks += [
            DegradationTask(CodecSpec(Family.AVC, qp), Split.CROSS_TYPE)
            for qp in CROSS_TYPE_AVC_QPS
        ]
    return tasks


def scan_corpus(corpus_dir: str | Path) -> list[Path]:
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise EmptyCorpus(f"{corpus_dir} is not a directory")
    paths = sorted(
        p for p in corpus_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file()
    )
    if not paths:
        raise EmptyCorpus(f"no decodable images under {corpus_dir}")
    return paths


def corpus_hash(paths: list[Path]) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(bytes.fromhex(sha256_file(p)))
    return h.hexdigest()


def _probe_tasks(
    tasks: list[DegradationTask], external_commands: dict | None
) -> tuple[list[DegradationTask], list[SkipRecord]]:
    available, skipped = [], []
    for task in tasks:
        codec = task.codec
        if codec.backend is Backend.EXTERNAL:
            commands = (external_commands or {}).get(codec.family.value)
            if not probe_external(commands):
                skipped.append(
                    SkipRecord(task.task_id, f"no external backend for {codec.family.value}")
                )
                continue
        if codec.family is Family.WEBP:
            from PIL import features

            if not features.check("webp"):
                skipped.append(SkipRecord(task.task_id, "Pillow lacks WebP support"))
                continue
        available.append(task)
    return available, skipped


def build_manifest(
    corpus_dir: str | Path,
    tasks: list[DegradationTask],
    out_dir: str | Path,
    *,
    seed: int = 0,
    external_commands: dict | None = None,
    workers: int = 1,
) -> BenchmarkManifest:
    """Degrade every corpus image under every available task and write the manifest.

    Tasks whose backend is missing are skipped and recorded, not fatal. The
    returned manifest is also written to `<out_dir>/manifest.jsonl`.
    """
    sources = scan_corpus(corpus_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    available, skipped = _probe_tasks(tasks, external_commands)

    def build_one(source: Path, task: DegradationTask) -> ManifestEntry:
        image = load_image_rgb(source)
        degraded = encode_decode(
            image,
            task.codec,
            external_commands=external_commands,
            seed=stable_seed(seed, source.name, task.task_id),
        )
        dest = out_dir / task.task_id / f"{source.stem}.png"
        save_png(degraded, dest)
        return ManifestEntry(str(source), task.task_id, str(dest), sha256_file(dest))

    pairs = [(src, task) for src in sources for task in available]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(lambda p: build_one(*p), pairs))
    else:
        entries = [build_one(src, task) for src, task in pairs]
    entries.sort(key=lambda e: (e.source_path, e.task_id))

    manifest = BenchmarkManifest(
        entries=entries,
        corpus_size=len(sources),
        tasks=list(tasks),
        skipped=skipped,
        corpus_hash=corpus_hash(sources),
        seed=seed,
    )
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def _task_to_dict(task: DegradationTask) -> dict:
    return {
        "task_id": task.task_id,
        "split": task.split.value,
        "family": task.codec.family.value,
        "quality": task.codec.quality,
        "backend": task.codec.backend.value,
    }


def _task_from_dict(d: dict) -> DegradationTask:
    codec = CodecSpec(Family(d["family"]), d["quality"], Backend(d["backend"]))
    return DegradationTask(codec, Split(d["split"]), d["task_id"])


def save_manifest(manifest: BenchmarkManifest, path: str | Path) -> None:
    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "tool_version": manifest.tool_version,
        "seed": manifest.seed,
        "corpus_hash": manifest.corpus_hash,
        "corpus_size": manifest.corpus_size,
        "tasks": [_task_to_dict(t) for t in manifest.tasks],
        "skipped": [{"task_id": s.task_id, "reason": s.reason} for s in manifest.skipped],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for e in manifest.entries:
                record = {
                    "source": e.source_path,
                    "task_id": e.task_id,
                    "degraded": e.degraded_path,
                    "checksum": e.checksum,
                }
                f.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise IoError(f"cannot write manifest {path}: {e}") from e


def load_manifest(path: str | Path) -> BenchmarkManifest:
    try:
        with open(path, encoding="utf-8") as f:
            lines = [line for line in f.read().splitlines() if line.strip()]
    except OSError as e:
        raise IoError(f"cannot read manifest {path}: {e}") from e
    if not lines:
        raise IoError(f"manifest {path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise IoError(f"{path} is not a benchmark manifest")
    entries = [
        ManifestEntry(r["source"], r["task_id"], r["degraded"], r["checksum"])
        for r in (json.loads(line) for line in lines[1:])
    ]
    return BenchmarkManifest(
        entries=entries,
        corpus_size=header["corpus_size"],
        tasks=[_task_from_dict(d) for d in header["tasks"]],
        skipped=[SkipRecord(s["task_id"], s["reason"]) for s in header["skipped"]],
        corpus_hash=header["corpus_hash"],
        seed=header["seed"],
        tool_version=header["tool_version"],
    )


def verify_checksums(manifest: BenchmarkManifest) -> list[str]:
    """Return the degraded paths whose on-disk checksum no longer matches."""
    return [
        e.degraded_path for e in manifest.entries if sha256_file(e.degraded_path) != e.checksum
    ]
