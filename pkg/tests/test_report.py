"""Tests for loss logs, tables and plots."""

import numpy as np
import pytest
from PIL import Image

from midway.errors import DatasetError
from midway.report import (
    LossLog,
    loss_columns,
    plot_ablation,
    plot_loss_curves,
    read_loss_log,
    write_table,
)


def _row(step):
    return {"step": step, "dyn_l1": 0.5 / (step + 1), "dyn": 0.4, "total": 1.0, "lr": 1e-4}


def test_columns():
    assert loss_columns([1, 2], True) == [
        "step", "dyn_l1", "dyn_l2", "dyn", "inv", "total", "lr", "momentum", "grad_norm"
    ]
    assert "inv" not in loss_columns([1], False)


def test_log_round_trip(tmp_path):
    path = tmp_path / "loss.tsv"
    cols = loss_columns([1], False)
    with LossLog(path, cols) as log:
        for step in range(3):
            log.append(_row(step))
    data = read_loss_log(path)
    assert data["step"].tolist() == [0, 1, 2]
    assert data["dyn_l1"][2] == 0.5 / 3
    assert np.isnan(data["momentum"]).all()


def test_resume_drops_rows_after_checkpoint(tmp_path):
    path = tmp_path / "loss.tsv"
    cols = loss_columns([1], False)
    with LossLog(path, cols) as log:
        for step in range(5):
            log.append(_row(step))
    with LossLog(path, cols, resume_step=3) as log:
        log.append(_row(3))
    assert read_loss_log(path)["step"].tolist() == [0, 1, 2, 3]


def test_fresh_log_truncates(tmp_path):
    path = tmp_path / "loss.tsv"
    cols = loss_columns([1], False)
    with LossLog(path, cols) as log:
        log.append(_row(0))
    LossLog(path, cols).close()
    assert len(read_loss_log(path)["step"]) == 0


def test_read_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_loss_log(tmp_path / "absent.tsv")
    (tmp_path / "bad.tsv").write_text("0\t1\n")
    with pytest.raises(DatasetError, match="header"):
        read_loss_log(tmp_path / "bad.tsv")


def test_plots_are_written(tmp_path):
    log = {"step": np.arange(5.0), "dyn": np.linspace(1, 0.1, 5), "total": np.ones(5)}
    png = plot_loss_curves(log, tmp_path / "loss.png")
    assert Image.open(png).format == "PNG"
    rows = [{"row": "full", "final_dyn": 0.2, "probe_direction": 0.9}, {"row": "base"}]
    assert Image.open(plot_ablation(rows, tmp_path / "ablation.png")).format == "PNG"


def test_table_cells(tmp_path):
    path = write_table(
        tmp_path / "t.tsv", ["row", "gating", "loss"], [{"row": "a", "gating": True, "loss": 0.5}]
    )
    assert path.read_text().splitlines() == ["# row\tgating\tloss", "a\ttrue\t0.5"]
