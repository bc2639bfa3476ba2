"""Loss logs and plots written next to a run."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import IO, Sequence

import numpy as np
from matplotlib.figure import Figure

from .errors import DatasetError

logger = logging.getLogger(__name__)

LOSS_LOG = "loss.tsv"


def loss_columns(levels: Sequence[int], with_invariance: bool) -> list[str]:
    cols = ["step"] + [f"dyn_l{level}" for level in levels] + ["dyn"]
    if with_invariance:
        cols.append("inv")
    return cols + ["total", "lr", "momentum", "grad_norm"]


def _fmt(value: float | int) -> str:
    return str(value) if isinstance(value, int) else repr(float(value))


class LossLog:
    """
    Tab-separated per-step loss log with a ``#``-prefixed header.

    Opening an existing log keeps rows up to *resume_step* so a resumed run
    continues the same file.
    """

    def __init__(
        self,
        path: str | Path,
        columns: Sequence[str],
        *,
        resume_step: int | None = None,
    ) -> None:
        self.path = Path(path)
        self.columns = list(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept: list[str] = []
        if resume_step is not None and self.path.is_file():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line and not line.startswith("#") and int(line.split("\t", 1)[0]) < resume_step:
                    kept.append(line)
        self._fh: IO[str] = self.path.open("w", encoding="utf-8")
        self._fh.write("# " + "\t".join(self.columns) + "\n")
        for line in kept:
            self._fh.write(line + "\n")
        self._fh.flush()

    def append(self, row: dict[str, float | int]) -> None:
        self._fh.write("\t".join(_fmt(row.get(col, float("nan"))) for col in self.columns) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "LossLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_loss_log(path: str | Path) -> dict[str, np.ndarray]:
    """Columns of a loss log as float arrays keyed by header name."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"loss log not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DatasetError(f"{path}: missing header")
    header = lines[0][1:].strip().split("\t")
    rows = [line.split("\t") for line in lines[1:] if line]
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def plot_loss_curves(log: dict[str, np.ndarray], path: str | Path) -> Path:
    path = Path(path)
    fig = Figure(figsize=(8, 4.5))
    ax = fig.add_subplot(1, 1, 1)
    steps = log["step"]
    for name in log:
        if (name.startswith("dyn") or name in ("inv", "total")) and np.any(log[name] > 0):
            ax.plot(steps, log[name], label=name, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    logger.debug("loss plot written: %s", path)
    return path


def write_table(path: str | Path, columns: Sequence[str], rows: Sequence[dict]) -> Path:
    """Tab-separated table with a ``#`` header, one row per dict."""
    path = Path(path)
    lines = ["# " + "\t".join(columns)]
    for row in rows:
        lines.append("\t".join(_cell(row.get(col, "")) for col in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def plot_ablation(rows: Sequence[dict], path: str | Path) -> Path:
    """Final dense loss and probe accuracy per ablation row."""
    path = Path(path)
    names = [str(r["row"]) for r in rows]
    x = np.arange(len(rows))
    fig = Figure(figsize=(10, 4))
    loss_ax = fig.add_subplot(1, 2, 1)
    loss_ax.bar(x, [float(r.get("final_dyn", np.nan)) for r in rows], color="tab:blue")
    loss_ax.set_title("final dense loss")
    acc_ax = fig.add_subplot(1, 2, 2)
    acc_ax.bar(x, [float(r.get("probe_direction", np.nan)) for r in rows], color="tab:green")
    acc_ax.axhline(0.25, color="gray", linestyle="--", linewidth=1)
    acc_ax.set_ylim(0.0, 1.0)
    acc_ax.set_title("direction probe accuracy")
    for ax in (loss_ax, acc_ax):
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path
