import json

import numpy as np
import pytest
import yaml

from codecrestore.cli import dispatch
from codecrestore.recipes import make_synthetic_corpus
from codecrestore.utils import load_image_rgb, save_png
from conftest import fixed_image


class TestUsage:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as e:
            dispatch(["--help"])
        assert e.value.code == 0
        assert "build-benchmark" in capsys.readouterr().out

    def test_subcommand_help_exits_zero(self):
        for cmd in (
            "build-benchmark",
            "pretrain-vae",
            "train-stage1",
            "train-stage2",
            "restore",
            "evaluate",
            "ablation",
            "inspect-router",
        ):
            with pytest.raises(SystemExit) as e:
                dispatch([cmd, "--help"])
            assert e.value.code == 0

    def test_unknown_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as e:
            dispatch(["frobnicate"])
        assert e.value.code == 2

    def test_missing_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as e:
            dispatch([])
        assert e.value.code == 2

    def test_restore_without_ckpt_names_flag(self, capsys):
        with pytest.raises(SystemExit) as e:
            dispatch(["restore", "--in", "x.png", "--out", "y.png"])
        assert e.value.code == 2
        assert "--ckpt" in capsys.readouterr().err


class TestBuildBenchmark:
    def test_build_and_dump_tasks(self, tmp_path, capsys):
        corpus = tmp_path / "corpus"
        make_synthetic_corpus(corpus, count=2, size=64, seed=3)
        assert (
            dispatch(
                ["build-benchmark", "--corpus", str(corpus), "--out", str(tmp_path / "b"),
                 "--seed", "4"]
            )
            == 0
        )
        out = capsys.readouterr().out
        assert "manifest" in out
        assert (tmp_path / "b" / "manifest.jsonl").exists()

    def test_dump_tasks_lists_21_seen(self, tmp_path, capsys):
        assert dispatch(["build-benchmark", "--corpus", "x", "--out", "y", "--dump-tasks"]) == 0
        tasks = json.loads(capsys.readouterr().out)
        assert sum(1 for t in tasks if t["split"] == "seen") == 21

    def test_empty_corpus_is_domain_error(self, tmp_path, capsys):
        corpus = tmp_path / "empty"
        corpus.mkdir()
        assert (
            dispatch(["build-benchmark", "--corpus", str(corpus), "--out", str(tmp_path / "b")])
            == 1
        )
        assert "error" in capsys.readouterr().err

    def test_tasks_file_round_trip(self, tmp_path, capsys):
        assert dispatch(["build-benchmark", "--corpus", "x", "--out", "y", "--dump-tasks"]) == 0
        tasks_json = capsys.readouterr().out
        tasks_file = tmp_path / "tasks.json"
        tasks_file.write_text(tasks_json)
        corpus = tmp_path / "corpus"
        make_synthetic_corpus(corpus, count=1, size=64, seed=8)
        code = dispatch(
            ["build-benchmark", "--corpus", str(corpus), "--out", str(tmp_path / "b"),
             "--tasks", str(tasks_file)]
        )
        assert code == 0
        from codecrestore.benchmark import load_manifest

        manifest = load_manifest(tmp_path / "b" / "manifest.jsonl")
        assert len(manifest.tasks) == 26  # 21 seen + 2 cross-degree + 3 cross-type

    def test_config_quality_override(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(yaml.safe_dump({"benchmark": {"qualities": {"jpeg": [10, 15, 20]}}}))
        assert (
            dispatch(
                ["build-benchmark", "--corpus", "x", "--out", "y", "--dump-tasks",
                 "--config", str(cfg)]
            )
            == 0
        )
        tasks = json.loads(capsys.readouterr().out)
        jpeg_q = sorted(t["quality"] for t in tasks if t["family"] == "jpeg")
        assert jpeg_q == [10, 15, 20]


class TestRestoreCommand:
    def test_restore_roundtrip(self, stage1_ckpt, tmp_path):
        src = tmp_path / "lq.png"
        save_png(fixed_image(64), src)
        dst = tmp_path / "restored.png"
        code = dispatch(
            ["restore", "--ckpt", str(stage1_ckpt.path), "--in", str(src),
             "--out", str(dst), "--steps", "4", "--seed", "1"]
        )
        assert code == 0
        assert load_image_rgb(dst).shape == (64, 64, 3)

    def test_bad_checkpoint_is_domain_error(self, tmp_path, capsys):
        src = tmp_path / "lq.png"
        save_png(fixed_image(64), src)
        code = dispatch(
            ["restore", "--ckpt", str(tmp_path / "missing.ckpt"), "--in", str(src),
             "--out", str(tmp_path / "o.png")]
        )
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestEvaluateCommand:
    def test_evaluate_writes_report(self, stage1_ckpt, heldout_manifest, tmp_path, work_root):
        report_path = tmp_path / "report.txt"
        code = dispatch(
            ["evaluate", "--ckpt", str(stage1_ckpt.path),
             "--manifest", str(work_root / "bench_heldout" / "manifest.jsonl"),
             "--out", str(report_path), "--metrics", "psnr", "--steps", "3"]
        )
        assert code == 0
        assert report_path.read_text().startswith("# codecrestore-report")


class TestInspectRouterCommand:
    def test_writes_usage_and_similarity(self, stage1_ckpt, tmp_path, work_root, capsys):
        out = tmp_path / "router.txt"
        code = dispatch(
            ["inspect-router", "--ckpt", str(stage1_ckpt.path),
             "--manifest", str(work_root / "bench_heldout" / "manifest.jsonl"),
             "--out", str(out)]
        )
        assert code == 0
        text = out.read_text()
        assert "usage jpeg_qf05" in text
        assert "similarity 0" in text

    def test_heatmap_written(self, stage1_ckpt, tmp_path, work_root):
        heatmap = tmp_path / "sim.png"
        code = dispatch(
            ["inspect-router", "--ckpt", str(stage1_ckpt.path),
             "--manifest", str(work_root / "bench_heldout" / "manifest.jsonl"),
             "--heatmap", str(heatmap)]
        )
        assert code == 0
        assert heatmap.exists()


class TestSeedHonored:
    def test_restore_seed_changes_output(self, stage1_ckpt, tmp_path):
        src = tmp_path / "lq.png"
        save_png(fixed_image(64), src)
        outs = []
        for seed in (1, 1, 2):
            dst = tmp_path / f"r{len(outs)}.png"
            dispatch(
                ["restore", "--ckpt", str(stage1_ckpt.path), "--in", str(src),
                 "--out", str(dst), "--steps", "3", "--seed", str(seed)]
            )
            outs.append(load_image_rgb(dst))
        assert np.array_equal(outs[0], outs[1])
        assert not np.array_equal(outs[0], outs[2])
