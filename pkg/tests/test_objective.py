"""Tests for the dense forward loss, the invariance loss and the combined objective."""

import math

import pytest
import torch

from midway.errors import DegenerateFeatureError, ShapeError
from midway.objective import (
    InvarianceLoss,
    compute_objective,
    dense_forward_loss,
    normalize_tokens,
    teacher_temp_schedule,
)

from .conftest import make_batch, make_config, tiny_model


def _rand(*shape, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


class TestDenseLoss:
    def test_identical_is_zero(self):
        x = _rand(2, 16, 8)
        assert dense_forward_loss(x, x.clone()).item() == pytest.approx(0.0, abs=1e-12)

    def test_opposite_is_four(self):
        x = _rand(2, 16, 8)
        assert dense_forward_loss(-x, x).item() == pytest.approx(4.0, abs=1e-12)

    def test_orthogonal_is_two(self):
        pred = torch.zeros(1, 4, 2, dtype=torch.float64)
        target = torch.zeros(1, 4, 2, dtype=torch.float64)
        pred[..., 0] = 1.0
        target[..., 1] = 3.0
        assert dense_forward_loss(pred, target).item() == pytest.approx(2.0, abs=1e-12)

    def test_scale_invariant(self):
        pred, target = _rand(2, 16, 8), _rand(2, 16, 8, seed=1)
        a = dense_forward_loss(pred, target)
        b = dense_forward_loss(pred * 7.5, target * 0.01)
        assert a.item() == pytest.approx(b.item(), abs=1e-12)

    def test_bounded(self):
        value = dense_forward_loss(_rand(4, 16, 8), _rand(4, 16, 8, seed=3)).item()
        assert 0.0 <= value <= 4.0

    def test_zero_token_exact_mode(self):
        pred = _rand(1, 4, 8)
        pred[0, 2] = 0.0
        with pytest.raises(DegenerateFeatureError):
            dense_forward_loss(pred, _rand(1, 4, 8, seed=1))

    def test_zero_token_training_mode(self):
        pred = _rand(1, 4, 8)
        pred[0, 2] = 0.0
        assert math.isfinite(dense_forward_loss(pred, _rand(1, 4, 8, seed=1), eps=1e-6).item())

    def test_target_is_constant(self):
        pred = _rand(1, 4, 8).requires_grad_(True)
        target = _rand(1, 4, 8, seed=1).requires_grad_(True)
        dense_forward_loss(pred, target).backward()
        assert pred.grad is not None
        assert target.grad is None

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dense_forward_loss(_rand(1, 4, 8), _rand(1, 5, 8))

    def test_normalize_tokens_unit_norm(self):
        norms = normalize_tokens(_rand(2, 5, 8)).norm(dim=-1)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-12)


class TestInvarianceLoss:
    def test_uniform_student_gives_log_k(self, tiny_cfg):
        loss_fn = InvarianceLoss(tiny_cfg.invariance, epochs=2).double()
        k = tiny_cfg.invariance.prototypes
        student = [[torch.zeros(2, k, dtype=torch.float64)] * 4 for _ in range(2)]
        teacher = [[_rand(2, k, seed=s)] * 2 for s in range(2)]
        loss = loss_fn(student, teacher, update_center=False)
        assert loss.item() == pytest.approx(math.log(k), abs=1e-9)

    def test_center_ema(self, tiny_cfg):
        loss_fn = InvarianceLoss(tiny_cfg.invariance, epochs=2).double()
        outputs = [_rand(2, 32, seed=1), _rand(2, 32, seed=2)]
        loss_fn.update_center(outputs)
        expected = 0.1 * torch.cat(outputs).mean(dim=0, keepdim=True)
        assert torch.allclose(loss_fn.center, expected, atol=1e-14)

    def test_needs_two_frames(self, tiny_cfg):
        loss_fn = InvarianceLoss(tiny_cfg.invariance, epochs=2)
        with pytest.raises(ShapeError):
            loss_fn([[torch.zeros(1, 32)]], [[torch.zeros(1, 32)]])

    def test_temperature_warmup(self, tiny_cfg):
        schedule = teacher_temp_schedule(tiny_cfg.invariance, 5)
        assert schedule[0] == pytest.approx(0.04)
        assert schedule[1] == pytest.approx(0.07)
        assert schedule[-1] == pytest.approx(0.07)
        assert len(schedule) == 5


class TestObjective:
    def test_terms_and_total(self, tiny_cfg):
        model = tiny_model(tiny_cfg).eval()
        report = compute_objective(model, make_batch(tiny_cfg), tiny_cfg, update_center=False)
        assert sorted(report.level_losses) == [1, 2]
        mean = sum(report.level_losses.values()) / 2
        assert report.dyn.item() == pytest.approx(mean.item(), abs=1e-12)
        assert report.total.item() == pytest.approx(
            report.dyn.item() + report.inv.item(), abs=1e-12
        )
        scalars = report.scalars()
        assert set(scalars) == {"dyn_l1", "dyn_l2", "dyn", "inv", "total"}

    def test_sum_reduction(self):
        cfg = make_config(objective__level_reduction="sum")
        model = tiny_model(cfg).eval()
        report = compute_objective(model, make_batch(cfg), cfg, update_center=False)
        total = sum(v.item() for v in report.level_losses.values())
        assert report.dyn.item() == pytest.approx(total, abs=1e-12)

    def test_lowest_level_only(self):
        cfg = make_config(dynamics__multi_level="false", dynamics__refinement="false")
        model = tiny_model(cfg).eval()
        report = compute_objective(model, make_batch(cfg), cfg, update_center=False)
        assert list(report.level_losses) == [1]

    def test_no_gradient_to_teacher(self, tiny_cfg):
        model = tiny_model(tiny_cfg).eval()
        compute_objective(model, make_batch(tiny_cfg), tiny_cfg).total.backward()
        assert all(p.grad is None for p in model.teacher.parameters())
        assert any(p.grad is not None for p in model.student.encoder.parameters())
        assert any(p.grad is not None for p in model.dynamics.parameters())

    def test_no_terms(self):
        cfg = make_config(dynamics__latent_dynamics="false", invariance__enabled="false")
        model = tiny_model(cfg)
        with pytest.raises(ShapeError, match="no loss terms"):
            compute_objective(model, make_batch(cfg), cfg)

    def test_base_model_has_only_invariance(self):
        cfg = make_config(dynamics__latent_dynamics="false")
        model = tiny_model(cfg).eval()
        report = compute_objective(model, make_batch(cfg), cfg, update_center=False)
        assert report.dyn is None
        assert report.total.item() == pytest.approx(report.inv.item())


def _groups(model):
    groups = {
        "encoder": list(model.student.encoder.parameters()),
        "head": list(model.student.head.parameters()),
        "midway": list(model.dynamics.midway.parameters()),
        "backward": list(model.dynamics.backward.parameters()),
        "forward": list(model.dynamics.predictor.parameters()),
    }
    return {name: [p for p in params if p.requires_grad] for name, params in groups.items()}


def test_gradients_match_finite_differences(grad_cfg):
    """Directional derivatives of the total loss agree with central differences in double."""
    model = tiny_model(grad_cfg).eval()
    batch = make_batch(grad_cfg, seed=5)

    def loss() -> float:
        with torch.no_grad():
            return compute_objective(model, batch, grad_cfg, update_center=False).total.item()

    model.zero_grad()
    compute_objective(model, batch, grad_cfg, update_center=False).total.backward()
    gen = torch.Generator().manual_seed(0)
    h = 1e-5
    for name, params in _groups(model).items():
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
        for _ in range(3):
            directions = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
            scale = torch.sqrt(sum((d * d).sum() for d in directions))
            directions = [d / scale for d in directions]
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, directions))
            with torch.no_grad():
                for p, d in zip(params, directions):
                    p.add_(d, alpha=h)
                up = loss()
                for p, d in zip(params, directions):
                    p.add_(d, alpha=-2 * h)
                down = loss()
                for p, d in zip(params, directions):
                    p.add_(d, alpha=h)
            numeric = (up - down) / (2 * h)
            assert abs(analytic - numeric) <= 1e-4 * abs(numeric) + 1e-9, name
