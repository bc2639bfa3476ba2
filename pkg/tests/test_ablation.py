"""Tests for the component ablation."""

import math

import pytest
import torch

from midway.ablation import (
    ABLATION_ROWS,
    TOGGLES,
    audit,
    cover_steps,
    expected_parameters,
    full_config,
    run_ablation,
    validate_rows,
    variant_config,
)
from midway.config import apply_overrides, config_hash, toy_preset, validate_config
from midway.errors import ConfigError
from midway.model import MidwayNetwork

from .conftest import make_config


def test_rows():
    assert len(ABLATION_ROWS) == 9
    name, toggles = ABLATION_ROWS[0]
    assert not any(toggles.values())
    assert ABLATION_ROWS[5][1] == dict.fromkeys(TOGGLES, True)
    removed = [set(k for k, v in t.items() if not v) for _, t in ABLATION_ROWS[6:]]
    assert removed == [{"backward"}, {"multi_level"}, {"refinement"}]


def test_variants_cap_steps(tiny_cfg):
    cfg = make_config(ablation_steps=7)
    variant = variant_config(cfg, ABLATION_ROWS[2][1])
    assert variant.max_steps == 7
    assert variant.dynamics.backward and not variant.dynamics.gating
    assert config_hash(dict(validate_rows(cfg))["6-gating"]) == config_hash(full_config(cfg))


def test_cover_steps_stretches_short_schedules():
    cfg = make_config(ablation_steps=10)
    assert cover_steps(cfg, 4).epochs == 3
    assert cover_steps(cfg, 10).epochs == 1
    assert cover_steps(cfg, 0) == cfg
    assert variant_config(cover_steps(cfg, 4), ABLATION_ROWS[5][1]).max_steps == 10


def test_base_has_no_dynamics_parameters(tiny_cfg):
    base = variant_config(tiny_cfg, ABLATION_ROWS[0][1])
    assert expected_parameters(base) == {"midway": 0, "backward": 0, "forward": 0, "gates": 0}


@pytest.mark.parametrize("name,toggles", ABLATION_ROWS)
def test_every_row_passes_audit(tiny_cfg, name, toggles):
    variant = variant_config(tiny_cfg, toggles)
    torch.manual_seed(0)
    assert audit(name, variant, MidwayNetwork(variant)) == []


def test_audit_flags_wrong_model(tiny_cfg):
    declared = variant_config(tiny_cfg, ABLATION_ROWS[5][1])
    built = MidwayNetwork(variant_config(tiny_cfg, ABLATION_ROWS[4][1]))
    problems = audit("6-gating", declared, built)
    assert problems and all(p.startswith("6-gating: ") for p in problems)


def test_invalid_row_names_the_row():
    cfg = make_config(encoder__tap_levels=2, dynamics__refinement="false")
    with pytest.raises(ConfigError) as excinfo:
        validate_rows(cfg)
    assert all(p.startswith("row ") for p in excinfo.value.problems)


def test_run_writes_table(sprite_root, tmp_path):
    cfg = make_config(ablation_steps=2, probe__pairs=6, probe__holdout_fraction="0.5")
    seen = []
    summary = run_ablation(cfg, sprite_root, tmp_path, progress=lambda n, r: seen.append(n))
    assert summary["total"] == 9 and summary["failed"] == 0
    assert seen == [name for name, _ in ABLATION_ROWS]
    rows = {r["row"]: r for r in summary["rows"]}
    assert rows["1-base"]["dynamics_params"] == 0
    assert math.isnan(rows["1-base"]["final_dyn"])
    assert "probe_direction" not in rows["1-base"]
    assert 0.0 <= rows["6-gating"]["probe_direction"] <= 1.0
    assert all(r["steps"] == 2 for r in summary["rows"])
    lines = (tmp_path / "ablation.tsv").read_text().splitlines()
    assert len(lines) == 10
    assert (tmp_path / "ablation.png").is_file()


@pytest.mark.slow
def test_toy_preset_rows_train_full_budget(toy_sprite_root, tmp_path):
    cfg = validate_config(apply_overrides(toy_preset(), [("ablation_steps", "200")]))
    summary = run_ablation(cfg, toy_sprite_root, tmp_path, probes=False)
    assert summary["failed"] == 0
    rows = summary["rows"]
    assert all(r["steps"] == 200 for r in rows)
    for row in rows[1:]:
        assert math.isfinite(row["final_dyn"]), row["row"]
        assert math.isfinite(row["final_total"]), row["row"]
