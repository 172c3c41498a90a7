import pytest
import torch
import yaml

from codecrestore.checkpoint import load_checkpoint, save_checkpoint
from codecrestore.config import (
    ModelConfig,
    SamplerConfig,
    TrainConfig,
    config_hash,
    load_config_file,
    sampler_config_from,
    train_config_from,
)
from codecrestore.errors import BadCheckpoint
from codecrestore.pipeline import (
    STAGE1_GROUPS,
    STAGE2_GROUPS,
    build_model,
    group_of,
    param_group_hashes,
    set_trainable,
)


class TestTrainConfig:
    def test_stage_default_lrs_follow_reference_recipe(self):
        assert TrainConfig(stage=1).lr == pytest.approx(5e-5)
        assert TrainConfig(stage=2).lr == pytest.approx(1e-4)
        assert TrainConfig(stage=1).betas == (0.9, 0.999)

    def test_explicit_lr_wins(self):
        assert TrainConfig(stage=1, lr=3e-3).lr == pytest.approx(3e-3)

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(stage=3)
        with pytest.raises(ValueError):
            TrainConfig(stage=1, lr=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(stage=1, betas=(0.9, 1.5))
        with pytest.raises(ValueError):
            TrainConfig(stage=1, image_size=30)

    def test_image_size_defaults_to_model(self):
        cfg = TrainConfig(stage=1, model=ModelConfig(image_size=32))
        assert cfg.image_size == 32

    def test_model_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(n_prompts=3, top_k=5)


class TestConfigFile:
    def test_round_trip_with_overrides(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(
            yaml.safe_dump(
                {
                    "version": 1,
                    "seed": 9,
                    "model": {"n_prompts": 5, "top_k": 2},
                    "train": {"stage1": {"iterations": 7, "lr": 1e-3}},
                    "sampler": {"steps": 6},
                }
            )
        )
        data = load_config_file(path)
        cfg = train_config_from(data, 1, {"batch_size": 2})
        assert cfg.seed == 9
        assert cfg.iterations == 7
        assert cfg.lr == pytest.approx(1e-3)
        assert cfg.batch_size == 2
        assert cfg.model.n_prompts == 5
        sampler = sampler_config_from(data, {"eta": 0.5})
        assert sampler == SamplerConfig(steps=6, eta=0.5, seed=9)

    def test_flag_override_beats_file(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump({"train": {"stage1": {"lr": 1e-3}}}))
        cfg = train_config_from(load_config_file(path), 1, {"lr": 5e-4})
        assert cfg.lr == pytest.approx(5e-4)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump({"bogus": 1}))
        with pytest.raises(ValueError):
            load_config_file(path)

    def test_wrong_version_rejected(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump({"version": 99}))
        with pytest.raises(ValueError):
            load_config_file(path)

    def test_config_hash_stable_and_sensitive(self):
        a = TrainConfig(stage=1)
        b = TrainConfig(stage=1)
        c = TrainConfig(stage=1, lr=1e-3)
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        mc = ModelConfig(image_size=32)
        model = build_model(mc, seed=1)
        path = save_checkpoint(
            tmp_path / "m.ckpt",
            stage="stage1",
            state=model.state_dict(),
            model_config=mc,
            seed=1,
            config_hash="abc",
            extra={"note": "test"},
        )
        bundle = load_checkpoint(path)
        assert bundle.stage == "stage1"
        assert bundle.model_config == mc
        assert bundle.seed == 1
        assert bundle.extra["note"] == "test"
        rebuilt = build_model(mc, seed=1)
        rebuilt.load_state_dict(bundle.state)
        for (n1, p1), (n2, p2) in zip(
            model.named_parameters(), rebuilt.named_parameters()
        ):
            assert n1 == n2 and torch.equal(p1, p2)

    def test_missing_file(self, tmp_path):
        with pytest.raises(BadCheckpoint):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_wrong_format(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        torch.save({"format": "something-else"}, path)
        with pytest.raises(BadCheckpoint):
            load_checkpoint(path)

    def test_bad_stage_tag(self, tmp_path):
        with pytest.raises(ValueError):
            save_checkpoint(
                tmp_path / "x.ckpt",
                stage="stage9",
                state={},
                model_config=ModelConfig(),
                seed=0,
                config_hash="",
            )

    def test_stage_ordering(self, tmp_path):
        mc = ModelConfig(image_size=32)
        path = save_checkpoint(
            tmp_path / "v.ckpt",
            stage="vae",
            state={},
            model_config=mc,
            seed=0,
            config_hash="",
        )
        assert load_checkpoint(path).stage_index() == 0


class TestParamGroups:
    def test_every_parameter_belongs_to_one_group(self):
        model = build_model(ModelConfig(image_size=32), seed=0)
        for name, _ in model.named_parameters():
            assert group_of(name)

    def test_stage_sets_are_disjoint(self):
        assert not (STAGE1_GROUPS & STAGE2_GROUPS)

    def test_set_trainable_freezes_complement(self):
        model = build_model(ModelConfig(image_size=32), seed=0)
        set_trainable(model, STAGE2_GROUPS)
        for name, p in model.named_parameters():
            assert p.requires_grad == (group_of(name) in STAGE2_GROUPS)

    def test_group_hashes_change_only_with_content(self):
        model = build_model(ModelConfig(image_size=32), seed=0)
        before = param_group_hashes(model)
        with torch.no_grad():
            model.moe.bank.prompts.add_(1.0)
        after = param_group_hashes(model)
        assert before["prompts"] != after["prompts"]
        assert all(before[g] == after[g] for g in before if g != "prompts")
