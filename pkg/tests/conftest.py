"""Shared fixtures: synthetic corpora, toy benchmarks, and smoke checkpoints.

The expensive training fixtures are session-scoped and follow the bundled
smoke recipes (8 train images, 2 tasks, seed 7, 500 iterations per stage) so
unit tests, trend tests, and the acceptance suite all share one run.
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from codecrestore.benchmark import DegradationTask, Split, build_manifest
from codecrestore.codecs import CodecSpec, Family
from codecrestore.recipes import (
    make_synthetic_corpus,
    smoke_stage1_config,
    smoke_stage2_config,
    smoke_vae_config,
    synthetic_image,
)

SMOKE_SEED = 7
SMOKE_TASKS = [
    DegradationTask(CodecSpec(Family.JPEG, 5), Split.SEEN),
    DegradationTask(CodecSpec(Family.LEARNED_PSNR, 1), Split.SEEN),
]

# Wall-clock durations of the expensive session fixtures, keyed by name;
# the acceptance suite checks these against the stated runtime budgets.
FIXTURE_TIMINGS: dict[str, float] = {}

# criterion id -> (description, "PASS"/"FAIL"); printed in the terminal summary.
ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_RESULTS):
        name, status = ACCEPTANCE_RESULTS[cid]
        terminalreporter.write_line(f"criterion {cid:2d} [{status}] {name}")


def fixed_image(size: int = 64, seed: int = 123) -> np.ndarray:
    return synthetic_image(size, np.random.default_rng(seed))


@pytest.fixture(scope="session")
def work_root(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("smoke")


@pytest.fixture(scope="session")
def train_corpus(work_root) -> Path:
    corpus = work_root / "corpus_train"
    make_synthetic_corpus(corpus, count=8, size=64, seed=11)
    return corpus


@pytest.fixture(scope="session")
def heldout_corpus(work_root) -> Path:
    corpus = work_root / "corpus_heldout"
    make_synthetic_corpus(corpus, count=4, size=64, seed=97)
    return corpus


@pytest.fixture(scope="session")
def toy_manifest(work_root, train_corpus):
    return build_manifest(
        train_corpus, SMOKE_TASKS, work_root / "bench_train", seed=SMOKE_SEED
    )


@pytest.fixture(scope="session")
def heldout_manifest(work_root, heldout_corpus):
    return build_manifest(
        heldout_corpus, SMOKE_TASKS, work_root / "bench_heldout", seed=SMOKE_SEED
    )


@pytest.fixture(scope="session")
def vae_ckpt(work_root, toy_manifest):
    from codecrestore.training import pretrain_vae

    t0 = time.monotonic()
    bundle = pretrain_vae(
        smoke_vae_config(SMOKE_SEED), toy_manifest, work_root / "vae.ckpt"
    )
    FIXTURE_TIMINGS["vae"] = time.monotonic() - t0
    return bundle


@pytest.fixture(scope="session")
def stage1_ckpt(work_root, toy_manifest, vae_ckpt):
    from codecrestore.training import train_stage1

    cfg = smoke_stage1_config(SMOKE_SEED, vae_ckpt=vae_ckpt.path)
    t0 = time.monotonic()
    bundle = train_stage1(cfg, toy_manifest, work_root / "stage1.ckpt")
    FIXTURE_TIMINGS["stage1"] = time.monotonic() - t0
    return bundle


@pytest.fixture(scope="session")
def stage2_ckpt(work_root, toy_manifest, stage1_ckpt):
    from codecrestore.training import train_stage2

    cfg = smoke_stage2_config(SMOKE_SEED)
    t0 = time.monotonic()
    bundle = train_stage2(cfg, toy_manifest, stage1_ckpt, work_root / "stage2.ckpt")
    FIXTURE_TIMINGS["stage2"] = time.monotonic() - t0
    return bundle
