"""Run-configuration parsing, validation, and serialization."""

import json
import os

import pytest

from finecast.config import (
    EvaluationSettings,
    LrSearchSettings,
    RunConfig,
    SensitivitySettings,
    demo_config,
    load_config,
    pretrain_curriculum,
    scaled_lr_curriculum,
)
from finecast.errors import ConfigError
from finecast.trainer import default_curriculum


def _demo(tmp_path):
    return demo_config(str(tmp_path / "run"))


def test_roundtrip_preserves_digest(tmp_path):
    cfg = _demo(tmp_path)
    again = RunConfig.from_dict(cfg.to_dict())
    assert again.digest == cfg.digest
    assert again.ranges == cfg.ranges
    assert again.finetune == cfg.finetune

    path = tmp_path / "cfg.json"
    cfg.save(str(path))
    loaded = load_config(str(path))
    assert loaded.digest == cfg.digest
    # saved form is stable: saving the loaded config reproduces the bytes
    path2 = tmp_path / "cfg2.json"
    loaded.save(str(path2))
    assert path.read_bytes() == path2.read_bytes()


def test_unknown_and_missing_keys(tmp_path):
    d = _demo(tmp_path).to_dict()
    bad = dict(d)
    bad["mystery"] = 1
    with pytest.raises(ConfigError, match="mystery"):
        RunConfig.from_dict(bad)
    for required in ("out_dir", "seed", "grid", "dates", "pretrain",
                     "finetune"):
        trimmed = {k: v for k, v in d.items() if k != required}
        with pytest.raises(ConfigError, match=required):
            RunConfig.from_dict(trimmed)


def test_range_validation(tmp_path):
    d = json.loads(json.dumps(_demo(tmp_path).to_dict()))
    overlapping = json.loads(json.dumps(d))
    overlapping["dates"]["val_a"] = overlapping["dates"]["train_a"]
    with pytest.raises(ConfigError, match="overlap"):
        RunConfig.from_dict(overlapping)

    reversed_pair = json.loads(json.dumps(d))
    reversed_pair["dates"]["test_b"] = ["2011-07-01T00", "2011-04-01T00"]
    with pytest.raises(ConfigError, match="reversed"):
        RunConfig.from_dict(reversed_pair)

    missing = json.loads(json.dumps(d))
    del missing["dates"]["val_b"]
    with pytest.raises(ConfigError, match="val_b"):
        RunConfig.from_dict(missing)

    malformed = json.loads(json.dumps(d))
    malformed["dates"]["train_a"] = ["2000-01-01T00"]
    with pytest.raises(ConfigError, match="pair"):
        RunConfig.from_dict(malformed)


def test_cross_system_ranges_may_overlap(tmp_path):
    # disjointness is only required within a system's own splits
    d = json.loads(json.dumps(_demo(tmp_path).to_dict()))
    d["dates"]["train_b"] = d["dates"]["train_a"]
    d["dates"]["val_b"] = ["2001-04-01T00", "2001-07-01T00"]
    d["dates"]["test_b"] = ["2001-07-01T00", "2001-10-01T00"]
    cfg = RunConfig.from_dict(d)
    assert cfg.range("train_b") == cfg.range("train_a")


def test_span_covers_all_ranges(tmp_path):
    cfg = _demo(tmp_path)
    start_a, end_a = cfg.span("a")
    assert start_a == cfg.range("train_a")[0]
    assert end_a == cfg.range("val_a")[1]
    start_b, end_b = cfg.span("b")
    assert start_b == cfg.range("train_b")[0]
    assert end_b == cfg.range("test_b")[1]


def test_system_spec_and_presets(tmp_path):
    cfg = _demo(tmp_path)
    spec_a = cfg.system_spec("a")
    spec_b = cfg.system_spec("b")
    assert spec_a.nlat == cfg.nlat and spec_a.nlon == cfg.nlon
    assert spec_b.nlat == cfg.nlat and spec_b.nlon == cfg.nlon
    assert spec_a != spec_b

    d = json.loads(json.dumps(cfg.to_dict()))
    d["systems"]["b"] = "system-z"
    with pytest.raises(ConfigError, match="system-z"):
        RunConfig.from_dict(d)


def test_subseed_determinism(tmp_path):
    cfg = _demo(tmp_path)
    assert cfg.subseed("data:a") == cfg.subseed("data:a")
    assert cfg.subseed("data:a") != cfg.subseed("data:b")
    other = RunConfig.from_dict(cfg.to_dict())
    assert other.subseed("pretrain") == cfg.subseed("pretrain")


def test_archive_paths_checked(tmp_path):
    d = json.loads(json.dumps(_demo(tmp_path).to_dict()))
    d["archives"] = {"a": str(tmp_path / "missing.bin")}
    with pytest.raises(ConfigError, match="missing.bin"):
        RunConfig.from_dict(d)

    d["archives"] = {"c": str(tmp_path / "whatever.bin")}
    with pytest.raises(ConfigError, match="'c'"):
        RunConfig.from_dict(d)

    # relative paths resolve against the config file's directory
    blob = tmp_path / "arch.bin"
    blob.write_bytes(b"x")
    d["archives"] = {"a": "arch.bin"}
    cfg_path = tmp_path / "cfg.json"
    with open(cfg_path, "w", encoding="utf-8") as fh:
        json.dump(d, fh)
    cfg = load_config(str(cfg_path))
    assert cfg.archives["a"] == str(blob)
    assert os.path.isabs(cfg.archives["a"])


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "nope.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(str(bad))
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError, match="object"):
        load_config(str(arr))


def test_scaled_lr_curriculum_preserves_ratios():
    base = default_curriculum(divisor=512)
    scaled = scaled_lr_curriculum(512, 200.0)
    assert [s.name for s in scaled.stages] == [s.name for s in base.stages]
    for s_base, s_scaled in zip(base.stages, scaled.stages):
        assert s_scaled.peak_lr == pytest.approx(200.0 * s_base.peak_lr)
        assert s_scaled.n_samples == s_base.n_samples
        assert s_scaled.n_steps == s_base.n_steps
        assert s_scaled.weight_scheme == s_base.weight_scheme
        assert s_scaled.split_points == s_base.split_points


def test_pretrain_curriculum_budgets():
    cur = pretrain_curriculum(512, batch_size=4)
    assert [s.n_steps for s in cur.stages] == [1, 2, 4]
    for stage in cur.stages:
        assert stage.n_samples >= stage.batch_size
        assert stage.n_samples % stage.batch_size == 0
        assert stage.weight_scheme == "pressure"
    # extreme divisor still yields at least one batch per stage
    tiny = pretrain_curriculum(10 ** 9)
    assert all(s.n_samples == s.batch_size for s in tiny.stages)
    with pytest.raises(ConfigError):
        pretrain_curriculum(0)


def test_settings_validation():
    with pytest.raises(ConfigError):
        SensitivitySettings(n_dates=1)
    with pytest.raises(ConfigError):
        SensitivitySettings(resamples=10)
    with pytest.raises(ConfigError):
        EvaluationSettings(lead_hours=(5,))
    with pytest.raises(ConfigError):
        EvaluationSettings(lead_hours=(6, 24), spectra_lead_hours=72)
    with pytest.raises(ConfigError):
        LrSearchSettings(candidates=(1e-3,))
    with pytest.raises(ConfigError):
        LrSearchSettings(candidates=(1e-3, -1e-2))
    # defaults form a geometric grid spanning >= 3 decades
    grid = LrSearchSettings().candidates
    assert grid == tuple(sorted(grid))
    assert grid[-1] / grid[0] >= 1000.0


def test_bad_section_shape(tmp_path):
    d = json.loads(json.dumps(_demo(tmp_path).to_dict()))
    d["sensitivity"] = {"n_dates": 4, "bogus_knob": 1}
    with pytest.raises(ConfigError, match="section"):
        RunConfig.from_dict(d)
    d2 = json.loads(json.dumps(_demo(tmp_path).to_dict()))
    d2["grid"] = {"nlat": 8}
    with pytest.raises(ConfigError, match="grid"):
        RunConfig.from_dict(d2)
