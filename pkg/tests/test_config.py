"""Tests for midway.config."""

import pytest

from midway.config import (
    apply_overrides,
    config_hash,
    get_preset,
    load_config,
    parse_config,
    serialize_config,
    toy_preset,
    validate_config,
)
from midway.errors import ConfigError


class TestSerialization:
    def test_round_trip_is_identity(self, tiny_cfg):
        assert parse_config(serialize_config(tiny_cfg)) == tiny_cfg

    def test_paper_round_trip(self):
        cfg = get_preset("paper")
        assert parse_config(serialize_config(cfg), base=toy_preset()) == cfg

    def test_hash_changes_with_any_key(self, tiny_cfg):
        other = apply_overrides(tiny_cfg, [("dynamics.gate_bias", "3.5")])
        assert config_hash(tiny_cfg) != config_hash(other)
        assert config_hash(tiny_cfg) == config_hash(parse_config(serialize_config(tiny_cfg)))

    def test_serialized_keys_are_sorted_by_section(self, tiny_cfg):
        keys = [line.split("=", 1)[0] for line in serialize_config(tiny_cfg).splitlines()]
        assert keys[0].startswith("encoder.")
        assert "seed" in keys and "dynamics.gating" in keys


class TestOverrides:
    def test_tuple_and_bool_values(self, tiny_cfg):
        cfg = apply_overrides(
            tiny_cfg, [("encoder.tap_levels", "2"), ("dynamics.refinement", "off")]
        )
        assert cfg.encoder.tap_levels == (2,)
        assert cfg.dynamics.refinement is False

    def test_unknown_keys_collected(self, tiny_cfg):
        with pytest.raises(ConfigError) as excinfo:
            apply_overrides(tiny_cfg, [("encoder.nope", "1"), ("bogus", "2"), ("x.y", "3")])
        assert len(excinfo.value.problems) == 3

    def test_bad_value_names_key(self, tiny_cfg):
        with pytest.raises(ConfigError, match="encoder.depth"):
            apply_overrides(tiny_cfg, [("encoder.depth", "twelve")])

    def test_section_name_is_not_a_top_level_key(self, tiny_cfg):
        with pytest.raises(ConfigError, match="unknown key 'encoder'"):
            apply_overrides(tiny_cfg, [("encoder", "1")])


class TestValidation:
    def test_every_problem_reported(self, tiny_cfg):
        cfg = apply_overrides(
            tiny_cfg,
            [("encoder.patch_size", "5"), ("objective.level_reduction", "max"), ("dtype", "int8")],
        )
        with pytest.raises(ConfigError) as excinfo:
            validate_config(cfg)
        problems = excinfo.value.problems
        assert any("patch_size" in p for p in problems)
        assert any("level_reduction" in p for p in problems)
        assert any("dtype" in p for p in problems)

    def test_refinement_needs_two_taps(self, tiny_cfg):
        cfg = apply_overrides(tiny_cfg, [("encoder.tap_levels", "1")])
        with pytest.raises(ConfigError, match="two tap levels"):
            validate_config(cfg)
        validate_config(apply_overrides(cfg, [("dynamics.refinement", "false")]))

    def test_taps_below_top(self, tiny_cfg):
        cfg = apply_overrides(tiny_cfg, [("encoder.tap_levels", "1,3")])
        with pytest.raises(ConfigError, match="top_level"):
            validate_config(cfg)

    def test_resolution_matches_encoder(self, tiny_cfg):
        cfg = apply_overrides(tiny_cfg, [("sampling.output_resolution", "32")])
        with pytest.raises(ConfigError, match="output_resolution"):
            validate_config(cfg)


def test_paper_preset_values():
    cfg = get_preset("paper")
    assert cfg.optim.lr == 5e-4
    assert (cfg.optim.weight_decay, cfg.optim.weight_decay_end) == (0.04, 0.4)
    assert cfg.optim.clip_grad == 3.0
    assert cfg.optim.warmup_epochs == 10
    assert cfg.batch_size == 200
    assert cfg.sampling.dt_range == (0.5, 1.0)
    assert cfg.encoder.tap_levels == (3, 6, 9) and cfg.encoder.top_level == 12
    assert cfg.dynamics.gate_bias == 4.0
    validate_config(cfg)


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        get_preset("huge")


def test_preset_line_selects_base(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# paper scale, short run\npreset=paper\nepochs=3\n", encoding="utf-8")
    cfg = load_config(path)
    assert cfg.encoder.image_size == 224
    assert cfg.epochs == 3


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.cfg")


def test_malformed_line_reports_line_number():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("seed=1\nno equals sign\n")
