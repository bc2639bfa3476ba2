"""Tests for schedules, parameter groups and the training step."""

import numpy as np
import pytest
import torch

import midway.train as train_mod
from midway.checkpoint import read_checkpoint
from midway.errors import DivergenceError
from midway.train import (
    build_state,
    cosine_scheduler,
    epoch_batches,
    param_groups,
    train_step,
)

from .conftest import make_batch, make_config, tiny_model


class TestSchedules:
    def test_warmup_then_cosine(self):
        values = cosine_scheduler(1.0, 0.1, epochs=4, niter_per_ep=5, warmup_epochs=1)
        assert len(values) == 20
        assert values[0] == 0.0
        assert values[4] == pytest.approx(1.0)
        assert values[5] == pytest.approx(1.0)
        assert values[-1] == pytest.approx(0.1, abs=0.01)
        assert np.all(np.diff(values[5:]) <= 0)

    def test_without_warmup(self):
        values = cosine_scheduler(0.04, 0.4, epochs=2, niter_per_ep=3)
        assert values[0] == pytest.approx(0.04)
        assert np.all(np.diff(values) >= 0)

    def test_epoch_batches(self):
        batches = epoch_batches(9, 2, seed=0, epoch=0)
        assert len(batches) == 4
        assert all(len(b) == 2 for b in batches)
        assert len({i for b in batches for i in b}) == 8
        assert batches == epoch_batches(9, 2, seed=0, epoch=0)
        assert batches != epoch_batches(9, 2, seed=0, epoch=1)


class TestParamGroups:
    def test_no_decay_for_biases_norms_and_embeddings(self, tiny_cfg):
        model = tiny_model(tiny_cfg)
        groups, names = param_groups(model.trainable_modules())
        decayed = set(names[: len(groups[0]["params"])])
        plain = set(names[len(groups[0]["params"]):])
        assert "student.encoder.pos_embed" in plain
        assert "student.encoder.cls_token" in plain
        assert "student.encoder.blocks.0.norm1.weight" in plain
        assert "student.encoder.blocks.0.attn.q.bias" in plain
        assert "dynamics.midway.init" in plain
        assert "student.encoder.blocks.0.attn.q.weight" in decayed
        assert groups[1]["weight_decay"] == 0.0

    def test_teacher_not_optimised(self, tiny_cfg):
        model = tiny_model(tiny_cfg)
        _, names = param_groups(model.trainable_modules())
        assert not any(".teacher." in n or n.startswith("teacher") for n in names)
        expected = sum(1 for p in model.student.parameters()) + sum(
            1 for p in model.dynamics.parameters()
        )
        assert len(names) == expected

    def test_zero_gradient_step_only_decays(self, tiny_cfg):
        model = tiny_model(tiny_cfg)
        state = build_state(model, tiny_cfg, iters_per_epoch=4)
        decayed, plain = state.optimizer.param_groups
        decayed["lr"] = plain["lr"] = 0.1
        decayed["weight_decay"] = 0.5
        before = [[p.detach().clone() for p in g["params"]] for g in (decayed, plain)]
        for p in state.trainable_parameters():
            p.grad = torch.zeros_like(p)
        state.optimizer.step()
        for b, p in zip(before[0], decayed["params"]):
            assert torch.allclose(p, b * (1 - 0.1 * 0.5), atol=1e-15)
        for b, p in zip(before[1], plain["params"]):
            assert torch.equal(p, b)


class TestTrainStep:
    def test_step_updates_counters_and_teacher(self, tiny_cfg):
        model = tiny_model(tiny_cfg)
        state = build_state(model, tiny_cfg, iters_per_epoch=4)
        teacher_before = [t.detach().clone() for t in model.teacher.parameters()]
        report = train_step(state, make_batch(tiny_cfg))
        assert state.step == 1 and report.step == 0
        assert report.level_order == [1, 2]
        assert report.lr == pytest.approx(float(state.lr[0]))
        m = report.momentum
        for t_old, s, t in zip(
            teacher_before, model.student.parameters(), model.teacher.parameters()
        ):
            assert torch.allclose(t, m * t_old + (1 - m) * s.detach(), atol=1e-14)

    def test_loss_keys(self, tiny_cfg):
        state = build_state(tiny_model(tiny_cfg), tiny_cfg, iters_per_epoch=4)
        report = train_step(state, make_batch(tiny_cfg))
        assert set(report.losses) == {"dyn_l1", "dyn_l2", "dyn", "inv", "total"}
        assert all(np.isfinite(v) for v in report.losses.values())

    def test_global_norm_clipped_to_threshold(self, monkeypatch):
        cfg = make_config(objective__divergence_threshold="1e12")
        assert cfg.optim.clip_grad == 3.0
        real = train_mod.compute_objective

        def amplified(*args, **kwargs):
            report = real(*args, **kwargs)
            report.total = report.total * 1e4
            return report

        monkeypatch.setattr(train_mod, "compute_objective", amplified)
        state = build_state(tiny_model(cfg), cfg, iters_per_epoch=4)
        report = train_step(state, make_batch(cfg))
        assert report.grad_norm > 3.0
        clipped = torch.sqrt(sum((p.grad * p.grad).sum() for p in state.trainable_parameters()))
        assert float(clipped) == pytest.approx(3.0, rel=1e-6)

    def test_divergence_dumps_state(self, tmp_path):
        cfg = make_config(objective__divergence_threshold="1e-9")
        state = build_state(tiny_model(cfg), cfg, iters_per_epoch=4, run_dir=tmp_path)
        with pytest.raises(DivergenceError) as excinfo:
            train_step(state, make_batch(cfg))
        dump = excinfo.value.dump_path
        assert dump == tmp_path / "divergence.ckpt"
        assert read_checkpoint(dump).step == 0
        assert state.step == 0

    def test_same_seed_same_losses(self, tiny_cfg):
        losses = []
        for _ in range(2):
            state = build_state(tiny_model(tiny_cfg, seed=3), tiny_cfg, iters_per_epoch=4)
            losses.append([train_step(state, make_batch(tiny_cfg, seed=s)).losses for s in (0, 1)])
        assert losses[0] == losses[1]

    def test_training_reduces_loss_on_fixed_batch(self):
        cfg = make_config(invariance__enabled="false", optim__warmup_epochs=0, optim__lr="1e-3")
        state = build_state(tiny_model(cfg), cfg, iters_per_epoch=100)
        batch = make_batch(cfg)
        first = train_step(state, batch).losses["total"]
        for _ in range(30):
            last = train_step(state, batch).losses["total"]
        assert last < first
