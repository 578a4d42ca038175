import json
import math
import struct

import numpy as np
import pytest

from fedrelu import cli
from fedrelu.cli import ConfigError, run_experiment, sweep, validate_config


def base_raw(**overrides):
    raw = {
        "net": {"L": 1, "m": 16, "d": 6, "o": 2},
        "fed": {"K": 2, "tau": 2, "eta": 0.05, "rounds": 3, "algo": "local_gd", "seed": 1},
        "data": {"synthetic": {"n_total": 8, "phi": 0.2}},
        "partition": {"scheme": "iid"},
        "probe_every": 2,
        "out_dir": "runs/test",
    }
    raw.update(overrides)
    return raw


def write_cfg(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return str(p)


# --- validate_config -----------------------------------------------------------


def test_validate_tau_range_message():
    raw = base_raw()
    raw["fed"]["tau"] = 0
    with pytest.raises(ConfigError) as exc:
        validate_config(raw)
    assert "fed.tau must be ≥ 1" in exc.value.errors


def test_validate_exclusive_data_source():
    raw = base_raw()
    raw["data"] = {
        "synthetic": {"n_total": 8, "phi": 0.2},
        "idx": {"images": "a", "labels": "b"},
    }
    with pytest.raises(ConfigError) as exc:
        validate_config(raw)
    assert any("exactly one data source" in e for e in exc.value.errors)


def test_validate_reports_all_errors_at_once():
    raw = base_raw()
    raw["fed"]["tau"] = 0
    raw["fed"]["K"] = 0
    raw["net"]["m"] = 0
    with pytest.raises(ConfigError) as exc:
        validate_config(raw)
    assert len(exc.value.errors) >= 3


def test_validate_round_trip_after_defaults():
    raw = base_raw()
    cfg = validate_config(raw)
    echoed = cfg.to_dict()
    assert echoed["fed"]["tau"] == raw["fed"]["tau"]
    assert echoed["fed"]["batch"] == 1  # default filled
    assert echoed["fed"]["c_eta"] == 1.0
    assert echoed["data"] == raw["data"]
    assert echoed["net"]["init_hidden_std"] is None
    # a second validation of the echo resolves to the same thing
    assert validate_config(echoed).to_dict() == echoed


def test_validate_sweep_block():
    raw = base_raw(sweep={"param": "net.m", "values": [16, 32], "seeds": [0, 1]})
    cfg = validate_config(raw)
    assert cfg.sweep.param == "net.m"
    raw_bad = base_raw(sweep={"param": "nope", "values": []})
    with pytest.raises(ConfigError) as exc:
        validate_config(raw_bad)
    assert len(exc.value.errors) == 2


# --- run_experiment --------------------------------------------------------------


def test_minimal_run_writes_three_files(tmp_path):
    raw = base_raw()
    raw["fed"].update({"K": 1, "rounds": 1, "tau": 1})
    raw["data"]["synthetic"]["n_total"] = 4
    cfg = validate_config(raw)
    log, paths = run_experiment(cfg, out_dir=str(tmp_path / "out"))
    listed = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert listed == ["config.json", "metrics.csv", "summary.json"]
    lines = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
    assert lines[0] == cli.CSV_HEADER
    assert len(lines) >= 3  # header + t=0 + final


def test_csv_header_is_pinned():
    assert cli.CSV_HEADER == (
        "t,c,global_loss,client_loss_min,client_loss_mean,client_loss_max,"
        "drift_virtual,drift_client_max,deviation_mean_sq,deviation_bound_rhs,"
        "grad_upper_ratio,grad_lower_ratio,shrinkage_violation"
    )


def test_rerun_is_byte_identical(tmp_path):
    cfg = validate_config(base_raw())
    run_experiment(cfg, out_dir=str(tmp_path / "a"))
    run_experiment(cfg, out_dir=str(tmp_path / "b"))
    for name in ("metrics.csv", "config.json", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # overwrite in place stays identical too
    first = (tmp_path / "a" / "metrics.csv").read_bytes()
    run_experiment(cfg, out_dir=str(tmp_path / "a"))
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == first


def test_eta_resolves_from_theory_default(tmp_path):
    raw = base_raw()
    raw["fed"]["eta"] = None
    raw["fed"]["c_eta"] = 0.01
    cfg = validate_config(raw)
    log, paths = run_experiment(cfg, out_dir=str(tmp_path / "out"))
    resolved = json.loads((tmp_path / "out" / "config.json").read_text())
    expect = 0.01 * 6 * 4**2 / (16 * 0.2 * 2)
    assert resolved["fed"]["eta"] == pytest.approx(expect, rel=1e-12)
    assert log.header["eta"] == pytest.approx(expect, rel=1e-12)


def test_summary_contents(tmp_path):
    cfg = validate_config(base_raw())
    log, paths = run_experiment(cfg, out_dir=str(tmp_path / "out"))
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["final_loss"] == log.records[-1].global_loss
    assert summary["initial_loss"] == log.records[0].global_loss
    assert summary["records"] == len(log.records)
    assert "rate_fit" in summary


# --- sweep -----------------------------------------------------------------------


def test_sweep_filenames_embed_value_and_seed(tmp_path):
    raw = base_raw(sweep={"param": "net.m", "values": [16, 32], "seeds": [0]})
    cfg = validate_config(raw)
    rows, paths = sweep(cfg, out_dir=str(tmp_path / "grid"))
    names = sorted(p.name for p in (tmp_path / "grid").iterdir())
    assert "metrics_m16_seed0.csv" in names
    assert "metrics_m32_seed0.csv" in names
    assert "sweep_summary.csv" in names
    assert len(rows) == 2


def test_singleton_sweep_matches_single_run(tmp_path):
    raw = base_raw(sweep={"param": "net.m", "values": [16], "seeds": [1]})
    cfg = validate_config(raw)
    rows, _ = sweep(cfg, out_dir=str(tmp_path / "grid"))
    single = validate_config(base_raw())
    log, _ = run_experiment(single, out_dir=str(tmp_path / "single"))
    assert rows[0]["final_loss_mean"] == log.records[-1].global_loss
    assert rows[0]["final_loss_min"] == rows[0]["final_loss_max"]


def test_sweep_equal_total_steps_rescales_rounds(tmp_path):
    raw = base_raw(
        sweep={"param": "fed.tau", "values": [1, 2], "seeds": [0], "equal_total_steps": True}
    )
    raw["fed"]["rounds"] = 4
    raw["fed"]["tau"] = 2  # base total = 8 steps
    cfg = validate_config(raw)
    sweep(cfg, out_dir=str(tmp_path / "grid"))
    cfg_tau1 = json.loads((tmp_path / "grid" / "config_tau1_seed0.json").read_text())
    cfg_tau2 = json.loads((tmp_path / "grid" / "config_tau2_seed0.json").read_text())
    assert cfg_tau1["fed"]["rounds"] * cfg_tau1["fed"]["tau"] == 8
    assert cfg_tau2["fed"]["rounds"] * cfg_tau2["fed"]["tau"] == 8


def test_sweep_requires_block(tmp_path):
    cfg = validate_config(base_raw())
    with pytest.raises(ConfigError):
        sweep(cfg, out_dir=str(tmp_path))


# --- CLI entry point ---------------------------------------------------------------


def test_main_run_ok(tmp_path, capsys):
    path = write_cfg(tmp_path, base_raw())
    rc = cli.main(["run", "--config", path, "--out", str(tmp_path / "out")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "final loss" in out


def test_main_validate_echoes_resolved(tmp_path, capsys):
    path = write_cfg(tmp_path, base_raw())
    rc = cli.main(["validate", "--config", path])
    assert rc == 0
    echoed = json.loads(capsys.readouterr().out)
    assert echoed["fed"]["K"] == 2


def test_main_config_error_exit_2(tmp_path, capsys):
    raw = base_raw()
    raw["fed"]["tau"] = 0
    path = write_cfg(tmp_path, raw)
    rc = cli.main(["run", "--config", path])
    assert rc == 2
    assert "fed.tau" in capsys.readouterr().err


def test_main_missing_config_exit_2(tmp_path, capsys):
    rc = cli.main(["run", "--config", str(tmp_path / "nope.json")])
    assert rc == 2


def test_main_invalid_json_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    rc = cli.main(["validate", "--config", str(p)])
    assert rc == 2


def test_main_runtime_error_exit_3(tmp_path, capsys):
    raw = base_raw()
    raw["data"] = {"idx": {"images": str(tmp_path / "x.idx"), "labels": str(tmp_path / "y.idx")}}
    path = write_cfg(tmp_path, raw)
    rc = cli.main(["run", "--config", path, "--out", str(tmp_path / "out")])
    assert rc == 3
    assert "runtime error" in capsys.readouterr().err


def test_main_seed_override_changes_metrics(tmp_path):
    path = write_cfg(tmp_path, base_raw())
    cli.main(["run", "--config", path, "--out", str(tmp_path / "a"), "--seed", "1"])
    cli.main(["run", "--config", path, "--out", str(tmp_path / "b"), "--seed", "2"])
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a != b


def test_out_root_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path / "root"))
    cfg = validate_config(base_raw(out_dir="rel/exp"))
    run_experiment(cfg)
    assert (tmp_path / "root" / "rel" / "exp" / "metrics.csv").exists()


def test_idx_run_end_to_end(tmp_path):
    # tiny 3-class IDX corpus exercised through the full CLI path
    rng = np.random.default_rng(0)
    n, h, w = 24, 2, 2
    pixels = rng.integers(1, 255, size=(n, h, w), dtype=np.uint8)
    labels = list(rng.integers(0, 3, size=n))
    img = struct.pack(">IIII", 0x803, n, h, w) + pixels.tobytes()
    lab = struct.pack(">II", 0x801, n) + bytes(int(l) for l in labels)
    (tmp_path / "img.idx").write_bytes(img)
    (tmp_path / "lab.idx").write_bytes(lab)
    raw = base_raw()
    raw["net"].update({"d": 4, "o": 3})
    raw["data"] = {
        "idx": {
            "images": str(tmp_path / "img.idx"),
            "labels": str(tmp_path / "lab.idx"),
            "test_images": str(tmp_path / "img.idx"),
            "test_labels": str(tmp_path / "lab.idx"),
        }
    }
    path = write_cfg(tmp_path, raw)
    rc = cli.main(["run", "--config", path, "--out", str(tmp_path / "out")])
    assert rc == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert 0.0 <= summary["test_accuracy"] <= 1.0
