import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from fixtures.generate import fixture_image
from con2.dataprep import SyntheticConfig, make_synthetic_split
from con2.imageops import ContentAugmentationPolicy
from con2.objective import ProjectionSet, con2_loss
from con2.trainer import (
    Checkpoint,
    ModelConfig,
    NonFiniteLossError,
    TrainConfig,
    anneal_alpha,
    build_model,
    cosine_lr,
    encode,
    project_content,
    project_context,
    train,
)

SMALL = SyntheticConfig(n_train=24, n_test_normal=4, n_test_anomaly=4)


def _tc(**kw):
    base = dict(max_steps=2, batch_size=4, content=ContentAugmentationPolicy(output_size=16))
    base.update(kw)
    return TrainConfig(**base)


def _params(model):
    return {k: v.detach().clone() for k, v in model.named_parameters()}


class TestSchedules:
    @pytest.mark.parametrize("step,total,expected", [(0, 100, 0.0), (100, 100, 1.0), (25, 100, 0.25)])
    def test_anneal_alpha(self, step, total, expected):
        assert anneal_alpha(step, total) == expected

    def test_anneal_alpha_errors(self):
        with pytest.raises(ValueError):
            anneal_alpha(101, 100)
        with pytest.raises(ValueError):
            anneal_alpha(-1, 100)
        with pytest.raises(ValueError):
            anneal_alpha(0, 0)

    @given(st.integers(2, 10_000))
    def test_cosine_endpoints(self, total):
        assert cosine_lr(0, total, 1e-3) == 1e-3
        assert cosine_lr(total - 1, total, 1e-3) <= 1e-6

    def test_cosine_monotone(self):
        lrs = [cosine_lr(s, 50, 1.0) for s in range(50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_total_steps(self):
        assert TrainConfig(epochs=3, batch_size=10).total_steps(25) == 6
        assert TrainConfig(epochs=3, batch_size=10, max_steps=4).total_steps(25) == 4


class TestConfigs:
    def test_train_config_round_trip(self):
        cfg = _tc(alpha=0.5, context="vflip")
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(encoder="vgg")
        with pytest.raises(ValueError):
            ModelConfig(head_out=1)
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(alpha=-0.1)

    def test_resnet_preset_dimensions(self):
        cfg = ModelConfig(encoder="paper-resnet18", rep_dim=512, head_hidden=512, head_out=128)
        model = build_model(cfg, seed=0)
        model.eval()
        with torch.no_grad():
            h, zc, zs = model(torch.zeros(2, 3, 32, 32))
        assert h.shape == (2, 512) and zc.shape == (2, 128) and zs.shape == (2, 128)


class TestInference:
    @pytest.fixture(scope="class")
    @staticmethod
    def ckpt():
        cfg = ModelConfig()
        return Checkpoint(model=build_model(cfg, seed=0), model_config=cfg,
                          train_config=TrainConfig(), input_size=(20, 20))

    def test_deterministic(self, ckpt):
        img = fixture_image()
        assert np.array_equal(encode(ckpt, img), encode(ckpt, img))

    def test_batch_of_one_matches_batched_row(self, ckpt):
        imgs = np.stack([fixture_image(seed=s) for s in range(5)])
        batched = ckpt.encode(imgs)
        np.testing.assert_allclose(ckpt.encode(imgs[2:3])[0], batched[2], rtol=1e-5, atol=1e-6)

    def test_golden_encode(self, ckpt, golden):
        rep = ckpt.encode(fixture_image()[None])[0].astype(np.float64)
        g = golden["encode_seed0"]
        assert rep.sum() == pytest.approx(g["sum"], rel=1e-5)
        np.testing.assert_allclose(rep[:8], g["head"], rtol=1e-5, atol=1e-6)
        assert np.isfinite(rep).all() and rep.shape == (64,)

    def test_golden_projections(self, ckpt, golden):
        rep = ckpt.encode(fixture_image()[None])[0]
        g = golden["project_seed0"]
        np.testing.assert_allclose(project_context(ckpt, rep)[:4], g["context"], rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(project_content(ckpt, rep)[:4], g["content"], rtol=1e-5, atol=1e-6)

    def test_shape_mismatch(self, ckpt):
        with pytest.raises(ValueError, match="does not match"):
            ckpt.encode(np.zeros((1, 16, 16, 3)))
        with pytest.raises(ValueError):
            ckpt.project_context(np.zeros(10))

    def test_grayscale_input_accepted(self, ckpt):
        assert ckpt.encode(fixture_image(channels=1)[None]).shape == (1, 64)

    def test_zero_representation_gives_bias_response(self, ckpt):
        zero = np.zeros(64)
        a, b = ckpt.project_context(zero), ckpt.project_context(zero)
        assert np.array_equal(a, b) and np.isfinite(a).all()

    def test_heads_independent(self):
        cfg = ModelConfig()
        ckpt = Checkpoint(model=build_model(cfg, seed=1), model_config=cfg, train_config=TrainConfig())
        rep = np.random.default_rng(0).normal(size=(3, 64))
        before_ctx, before_cnt = ckpt.project_context(rep), ckpt.project_content(rep)
        with torch.no_grad():
            for p in ckpt.model.context_head.parameters():
                p.add_(0.1)
        assert not np.array_equal(ckpt.project_context(rep), before_ctx)
        assert np.array_equal(ckpt.project_content(rep), before_cnt)
        ctx_ids = {id(p) for p in ckpt.model.context_head.parameters()}
        assert ctx_ids.isdisjoint(id(p) for p in ckpt.model.content_head.parameters())


class TestTraining:
    def test_lr_zero_leaves_parameters(self):
        split = make_synthetic_split(SMALL)
        cfg = _tc(lr=0.0, max_steps=3)
        initial = _params(build_model(ModelConfig(), cfg.seed))
        after = _params(train(ModelConfig(), cfg, split).model)
        for k in initial:
            assert torch.equal(initial[k], after[k]), k

    def test_deterministic(self):
        split = make_synthetic_split(SMALL)
        a = train(ModelConfig(), _tc(max_steps=1), split)
        b = train(ModelConfig(), _tc(max_steps=1), split)
        for (k, va), vb in zip(a.model.state_dict().items(), b.model.state_dict().values()):
            assert torch.equal(va, vb), k
        assert a.history == b.history

    def test_history_schedule(self):
        split = make_synthetic_split(SMALL)
        ckpt = train(ModelConfig(), _tc(max_steps=5), split)
        alphas = [r["alpha"] for r in ckpt.history]
        assert alphas[0] == 0.0 and alphas[-1] == 1.0
        assert all(a <= b for a, b in zip(alphas, alphas[1:]))
        assert ckpt.history[0]["lr"] == 1e-3 and ckpt.history[-1]["lr"] <= 1e-6
        assert ckpt.step == 5

    def test_content_head_gradient_zero_when_alpha_pinned(self):
        model = build_model(ModelConfig(), seed=0)
        rng = np.random.default_rng(0)
        x = torch.from_numpy(rng.uniform(-1, 1, size=(8, 3, 16, 16)).astype(np.float32))
        labels = torch.tensor([0, 0, 1, 1] * 2)
        ids = torch.repeat_interleave(torch.arange(2), 4)
        _, zc, zs = model(x)
        loss = con2_loss(ProjectionSet(zc, labels, ids), ProjectionSet(zs, labels, ids), 0.0)
        loss.total.backward()
        for p in model.content_head.parameters():
            assert p.grad is not None and torch.count_nonzero(p.grad) == 0
        assert any(torch.count_nonzero(p.grad) > 0 for p in model.context_head.parameters())

    def test_non_finite_loss_aborts(self):
        split = make_synthetic_split(SMALL)
        with pytest.raises(NonFiniteLossError) as info:
            train(ModelConfig(), _tc(lr=1e30, max_steps=5), split)
        assert "step" in str(info.value)

    def test_needs_two_images(self):
        split = make_synthetic_split(SyntheticConfig(n_train=1))
        with pytest.raises(ValueError):
            train(ModelConfig(), _tc(), split)

    def test_context_term_decreases(self):
        split = make_synthetic_split(SyntheticConfig(n_train=64, n_test_normal=0, n_test_anomaly=0))
        ckpt = train(ModelConfig(), _tc(max_steps=200, batch_size=8), split)
        first = np.mean([r["context"] for r in ckpt.history[:10]])
        last = np.mean([r["context"] for r in ckpt.history[-10:]])
        assert ckpt.history[-1]["context"] < ckpt.history[0]["context"]
        assert last < first


class TestCheckpointFiles:
    @pytest.fixture(scope="class")
    @staticmethod
    def trained():
        return train(ModelConfig(), _tc(max_steps=2), make_synthetic_split(SMALL))

    def test_round_trip_bit_identical(self, trained, tmp_path):
        imgs = make_synthetic_split(SMALL).test
        path = trained.save(tmp_path / "ckpt")
        loaded = Checkpoint.load(path)
        assert np.array_equal(loaded.encode(imgs), trained.encode(imgs))
        assert loaded.train_config == trained.train_config
        assert loaded.history == trained.history
        assert loaded.step == trained.step and loaded.input_size == trained.input_size

    def test_manifest_is_readable(self, trained, tmp_path):
        path = trained.save(tmp_path / "ckpt")
        manifest = json.loads((path / "manifest.json").read_text())
        assert manifest["format_version"] == 1
        assert manifest["model_config"]["encoder"] == "tiny-cnn"

    def test_overwrite(self, trained, tmp_path):
        trained.save(tmp_path / "ckpt")
        trained.save(tmp_path / "ckpt")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt"]

    def test_version_mismatch_refused(self, trained, tmp_path):
        path = trained.save(tmp_path / "ckpt")
        manifest = json.loads((path / "manifest.json").read_text())
        manifest["format_version"] = 99
        (path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match="format 99"):
            Checkpoint.load(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Checkpoint.load(tmp_path / "nothing")
