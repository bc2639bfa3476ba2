"""Tests for the checkpoint archive."""

import pytest
import torch

from midway.checkpoint import (
    FORMAT_VERSION,
    load_model,
    load_optimizer,
    read_checkpoint,
    save_checkpoint,
)
from midway.errors import CheckpointError
from midway.train import build_state, train_step

from .conftest import make_batch, make_config, tiny_model


@pytest.fixture
def trained_state(tiny_cfg):
    state = build_state(tiny_model(tiny_cfg), tiny_cfg, iters_per_epoch=4)
    train_step(state, make_batch(tiny_cfg))
    return state


def test_round_trip(trained_state, tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", trained_state, extra={"note": "x"})
    ckpt = read_checkpoint(path)
    assert ckpt.step == 1 and ckpt.iters_per_epoch == 4
    assert ckpt.cfg == trained_state.cfg
    assert ckpt.extra == {"note": "x"}

    model = load_model(ckpt)
    assert next(model.parameters()).dtype == torch.float64
    for a, b in zip(trained_state.model.parameters(), model.parameters()):
        assert torch.equal(a, b)
    assert torch.equal(model.invariance.center, trained_state.model.invariance.center)


def test_namespaces(trained_state, tmp_path):
    ckpt = read_checkpoint(save_checkpoint(tmp_path / "a.ckpt", trained_state))
    roots = {name.split(".", 1)[0] for name in ckpt.tensors}
    assert roots == {
        "student", "teacher", "midway", "backward", "forward", "invariance", "optimizer"
    }
    assert "encoder.pos_embed" in ckpt.namespace("student")
    assert any(k.endswith(".exp_avg_sq") for k in ckpt.namespace("optimizer"))


def test_optimizer_moments_restored(trained_state, tmp_path):
    ckpt = read_checkpoint(save_checkpoint(tmp_path / "a.ckpt", trained_state))
    cfg = trained_state.cfg
    fresh = build_state(load_model(ckpt), cfg, iters_per_epoch=4)
    load_optimizer(ckpt, fresh)
    assert fresh.step == 1
    old = list(trained_state.trainable_parameters())
    new = list(fresh.trainable_parameters())
    for p_old, p_new in zip(old, new):
        a = trained_state.optimizer.state[p_old]
        b = fresh.optimizer.state[p_new]
        assert torch.equal(a["exp_avg"], b["exp_avg"])
        assert torch.equal(a["exp_avg_sq"], b["exp_avg_sq"])


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "absent.ckpt")


def test_unknown_format_version(tmp_path):
    path = tmp_path / "old.ckpt"
    torch.save({"format_version": "midway-ckpt/0"}, path)
    with pytest.raises(CheckpointError, match="format version"):
        read_checkpoint(path)


def test_garbage_file(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="unreadable"):
        read_checkpoint(path)


def test_manifest_must_match_tensors(trained_state, tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", trained_state)
    archive = torch.load(path, weights_only=True)
    assert archive["format_version"] == FORMAT_VERSION
    archive["manifest"] = archive["manifest"][1:]
    torch.save(archive, path)
    with pytest.raises(CheckpointError, match="manifest"):
        read_checkpoint(path)


def test_shape_must_match_manifest(trained_state, tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", trained_state)
    archive = torch.load(path, weights_only=True)
    archive["manifest"][0]["shape"] = [999]
    torch.save(archive, path)
    with pytest.raises(CheckpointError, match="shape"):
        read_checkpoint(path)


def test_load_into_different_model(trained_state, tmp_path):
    ckpt = read_checkpoint(save_checkpoint(tmp_path / "a.ckpt", trained_state))
    other = tiny_model(make_config(encoder__embed_dim=32))
    with pytest.raises(CheckpointError, match="does not match"):
        load_model(ckpt, other)
