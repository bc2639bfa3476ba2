"""Tests for the encoder, its feature pyramid and the EMA teacher."""

import copy

import pytest
import torch
import torch.nn as nn

from midway.encoder import Encoder, ParameterSets, ema_update, encode, init_teacher
from midway.errors import (
    NonFiniteInputError,
    ShapeError,
    StructureMismatchError,
    classify_exception,
)


@pytest.fixture
def encoder(tiny_cfg):
    torch.manual_seed(0)
    return Encoder(tiny_cfg.encoder).double().eval()


def _images(batch=2, size=16, seed=1):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(batch, 3, size, size, generator=gen, dtype=torch.float64)


class TestPyramid:
    def test_one_grid_per_exported_level(self, encoder):
        pyramid = encode(_images(), encoder)
        assert sorted(pyramid.levels) == [1, 2, 3]
        for tokens in pyramid.levels.values():
            assert tokens.shape == (2, 16, 16)
        assert pyramid.grid == (4, 4)
        assert pyramid.num_tokens == 16

    def test_class_token_only_at_top(self, encoder):
        pyramid = encode(_images(), encoder)
        assert list(pyramid.cls) == [3]
        assert pyramid.cls[3].shape == (2, 16)

    def test_no_class_token(self, tiny_cfg):
        from dataclasses import replace

        enc = Encoder(replace(tiny_cfg.encoder, use_cls_token=False)).double()
        pyramid = enc(_images())
        assert pyramid.cls == {}
        assert pyramid[3].shape == (2, 16, 16)

    def test_pure_function_of_image(self, encoder):
        x = _images()
        a, b = encode(x, encoder), encode(x.clone(), encoder)
        for level in a.levels:
            assert torch.equal(a[level], b[level])

    def test_batch_items_independent(self, encoder):
        x = _images(batch=3)
        full = encode(x, encoder)
        single = encode(x[1:2], encoder)
        assert torch.allclose(full[2][1], single[2][0], atol=1e-12)

    def test_smaller_crops_interpolate_positions(self, encoder):
        pyramid = encoder(_images(size=8))
        assert pyramid.grid == (2, 2)
        assert pyramid[3].shape == (2, 4, 16)


class TestEncodeChecks:
    @pytest.mark.parametrize(
        "shape",
        [(2, 16, 16), (2, 1, 16, 16), (2, 3, 16, 12), (2, 3, 18, 18)],
    )
    def test_bad_shapes(self, encoder, shape):
        with pytest.raises(ShapeError):
            encode(torch.zeros(shape, dtype=torch.float64), encoder)

    def test_non_finite_image(self, encoder):
        x = _images()
        x[0, 0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteInputError, match="non-finite") as info:
            encode(x, encoder)
        assert classify_exception(info.value).category == "numeric"


class TestParameterSets:
    def _pair(self, encoder):
        params = ParameterSets(encoder, copy.deepcopy(encoder))
        with torch.no_grad():
            for p in params.teacher.parameters():
                p.add_(1.0)
        return params

    def test_init_copies_bit_exactly(self, encoder):
        params = init_teacher(self._pair(encoder))
        for s, t in zip(params.student.parameters(), params.teacher.parameters()):
            assert torch.equal(s, t)
            assert not t.requires_grad

    def test_momentum_one_keeps_teacher(self, encoder):
        params = self._pair(encoder)
        before = [t.clone() for t in params.teacher.parameters()]
        ema_update(params, 1.0)
        for b, t in zip(before, params.teacher.parameters()):
            assert torch.equal(b, t)

    def test_momentum_zero_copies_student(self, encoder):
        params = ema_update(self._pair(encoder), 0.0)
        for s, t in zip(params.student.parameters(), params.teacher.parameters()):
            assert torch.equal(s, t)

    def test_convex_combination(self, encoder):
        params = self._pair(encoder)
        expected = [
            0.9 * t + 0.1 * s
            for s, t in zip(params.student.parameters(), params.teacher.parameters())
        ]
        ema_update(params, 0.9)
        for e, t in zip(expected, params.teacher.parameters()):
            assert torch.allclose(e, t, atol=1e-14)

    def test_student_untouched(self, encoder):
        params = self._pair(encoder)
        before = [s.clone() for s in params.student.parameters()]
        ema_update(params, 0.5)
        for b, s in zip(before, params.student.parameters()):
            assert torch.equal(b, s)

    @pytest.mark.parametrize("momentum", [-0.1, 1.5])
    def test_momentum_out_of_range(self, encoder, momentum):
        with pytest.raises(ValueError):
            ema_update(self._pair(encoder), momentum)

    def test_structure_mismatch(self):
        params = ParameterSets(nn.Linear(4, 4), nn.Linear(4, 3))
        with pytest.raises(StructureMismatchError, match="weight"):
            init_teacher(params)

    def test_missing_parameter(self):
        params = ParameterSets(nn.Linear(4, 4), nn.Linear(4, 4, bias=False))
        with pytest.raises(StructureMismatchError, match="bias"):
            ema_update(params, 0.5)
