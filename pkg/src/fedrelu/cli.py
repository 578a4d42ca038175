"""Experiment runner: config validation, single runs, and grid sweeps.

Configs are JSON; each run writes exactly three files into its output
directory (metrics.csv, config.json, summary.json), all byte-stable under
re-runs with the same seed. Exit codes: 0 success, 2 config error, 3 runtime
error.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import network, probes
from .federated import (
    DATA_STREAM,
    LOCAL_GD,
    LOCAL_SGD,
    PARTITION_STREAM,
    FedConfig,
    MetricsLog,
    ProbeSchedule,
    default_lr,
    run,
)
from .numerics import RngStream

OUT_ROOT_ENV = "FEDRELU_OUT_ROOT"

CSV_HEADER = ",".join(probes.ProbeRecord.CSV_FIELDS)


class ConfigError(ValueError):
    """Aggregated validation failure; `errors` lists every problem found."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


@dataclass
class SweepSpec:
    param: str
    values: list
    seeds: list[int]
    equal_total_steps: bool = False


@dataclass
class ExperimentConfig:
    """Fully validated run description with defaults filled in."""

    net: network.NetConfig
    K: int
    tau: int
    eta: float | None
    rounds: int
    algo: str
    batch: int
    seed: int
    c_eta: float
    data: dict
    partition_scheme: str
    classes_per_client: int
    probe_every: int | None
    out_dir: str
    sweep: SweepSpec | None = None

    def to_dict(self) -> dict:
        d = {
            "net": {
                "L": self.net.L,
                "m": self.net.m,
                "d": self.net.d,
                "o": self.net.o,
                "init_hidden_std": self.net.init_hidden_std,
                "init_output_std": self.net.init_output_std,
            },
            "fed": {
                "K": self.K,
                "tau": self.tau,
                "eta": self.eta,
                "rounds": self.rounds,
                "algo": self.algo,
                "batch": self.batch,
                "seed": self.seed,
                "c_eta": self.c_eta,
            },
            "data": self.data,
            "partition": {
                "scheme": self.partition_scheme,
                "classes_per_client": self.classes_per_client,
            },
            "probe_every": self.probe_every,
            "out_dir": self.out_dir,
        }
        if self.sweep is not None:
            d["sweep"] = {
                "param": self.sweep.param,
                "values": self.sweep.values,
                "seeds": self.sweep.seeds,
                "equal_total_steps": self.sweep.equal_total_steps,
            }
        return d


_SWEEPABLE = {
    "net.L",
    "net.m",
    "net.d",
    "net.o",
    "fed.K",
    "fed.tau",
    "fed.eta",
    "fed.rounds",
    "fed.batch",
    "fed.c_eta",
}


def validate_config(raw: dict) -> ExperimentConfig:
    """Structural and range validation; reports every error at once."""
    errors: list[str] = []

    def need_int(section: dict, path: str, key: str, minimum: int, default=None):
        v = section.get(key, default)
        if v is None:
            errors.append(f"{path}.{key} is required")
            return default if isinstance(default, int) else minimum
        if not isinstance(v, int) or isinstance(v, bool):
            errors.append(f"{path}.{key} must be an integer")
            return minimum
        if v < minimum:
            errors.append(f"{path}.{key} must be ≥ {minimum}")
            return minimum
        return v

    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])

    net_raw = raw.get("net")
    if not isinstance(net_raw, dict):
        errors.append("net section is required")
        net_raw = {}
    L = need_int(net_raw, "net", "L", 1, 1)
    m = need_int(net_raw, "net", "m", 1, 1)
    d = need_int(net_raw, "net", "d", 1, 1)
    o = need_int(net_raw, "net", "o", 1, 1)
    hid_std = net_raw.get("init_hidden_std")
    out_std = net_raw.get("init_output_std")
    for name, v in (("init_hidden_std", hid_std), ("init_output_std", out_std)):
        if v is not None and (not isinstance(v, (int, float)) or v < 0):
            errors.append(f"net.{name} must be a nonnegative number or null")

    fed_raw = raw.get("fed")
    if not isinstance(fed_raw, dict):
        errors.append("fed section is required")
        fed_raw = {}
    K = need_int(fed_raw, "fed", "K", 1, 1)
    tau = need_int(fed_raw, "fed", "tau", 1, 1)
    rounds = need_int(fed_raw, "fed", "rounds", 1, 1)
    batch = need_int(fed_raw, "fed", "batch", 1, 1)
    seed = need_int(fed_raw, "fed", "seed", 0, 0)
    eta = fed_raw.get("eta")
    if eta is not None and (not isinstance(eta, (int, float)) or eta <= 0):
        errors.append("fed.eta must be > 0 or null (null means the theory default)")
    c_eta = fed_raw.get("c_eta", 1.0)
    if not isinstance(c_eta, (int, float)) or c_eta < 0:
        errors.append("fed.c_eta must be ≥ 0")
        c_eta = 1.0
    algo = fed_raw.get("algo", LOCAL_GD)
    if algo not in (LOCAL_GD, LOCAL_SGD):
        errors.append(f"fed.algo must be '{LOCAL_GD}' or '{LOCAL_SGD}'")
        algo = LOCAL_GD

    data_raw = raw.get("data")
    if not isinstance(data_raw, dict):
        errors.append("data section is required")
        data_raw = {}
    sources = [k for k in ("synthetic", "idx") if k in data_raw]
    if len(sources) != 1:
        errors.append("exactly one data source (data.synthetic or data.idx) is required")
    data_resolved: dict = {}
    if "synthetic" in data_raw:
        syn = data_raw["synthetic"] if isinstance(data_raw["synthetic"], dict) else {}
        n_total = need_int(syn, "data.synthetic", "n_total", 1, 1)
        phi = syn.get("phi", 0.0)
        if not isinstance(phi, (int, float)) or not 0.0 <= phi < 2.0:
            errors.append("data.synthetic.phi must be in [0, 2)")
            phi = 0.0
        data_resolved = {"synthetic": {"n_total": n_total, "phi": float(phi)}}
    if "idx" in data_raw:
        idx = data_raw["idx"] if isinstance(data_raw["idx"], dict) else {}
        for key in ("images", "labels"):
            if not isinstance(idx.get(key), str):
                errors.append(f"data.idx.{key} must be a file path")
        data_resolved = {"idx": dict(idx)}

    part_raw = raw.get("partition", {"scheme": "iid"})
    if not isinstance(part_raw, dict):
        errors.append("partition must be an object")
        part_raw = {}
    scheme = part_raw.get("scheme", "iid")
    if scheme not in ("iid", "label_shards"):
        errors.append("partition.scheme must be 'iid' or 'label_shards'")
        scheme = "iid"
    cpc = part_raw.get("classes_per_client", 2)
    if scheme == "label_shards":
        if not isinstance(cpc, int) or isinstance(cpc, bool) or cpc < 1:
            errors.append("partition.classes_per_client must be ≥ 1")
            cpc = 2

    probe_every = raw.get("probe_every")
    if probe_every is not None and (
        not isinstance(probe_every, int) or isinstance(probe_every, bool) or probe_every < 1
    ):
        errors.append("probe_every must be ≥ 1 or null (null means every round)")
        probe_every = None

    out_dir = raw.get("out_dir", "runs/run")
    if not isinstance(out_dir, str) or not out_dir:
        errors.append("out_dir must be a nonempty string")
        out_dir = "runs/run"

    sweep = None
    if "sweep" in raw:
        sw = raw["sweep"] if isinstance(raw["sweep"], dict) else {}
        param = sw.get("param")
        if param not in _SWEEPABLE:
            errors.append(f"sweep.param must be one of {sorted(_SWEEPABLE)}")
            param = "net.m"
        values = sw.get("values")
        if not isinstance(values, list) or not values:
            errors.append("sweep.values must be a nonempty list")
            values = []
        seeds = sw.get("seeds", [seed])
        if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds
        ):
            errors.append("sweep.seeds must be a nonempty list of integers")
            seeds = [seed]
        ets = sw.get("equal_total_steps", False)
        if not isinstance(ets, bool):
            errors.append("sweep.equal_total_steps must be a boolean")
            ets = False
        sweep = SweepSpec(param, values, seeds, ets)

    if errors:
        raise ConfigError(errors)

    net = network.NetConfig(
        L=L, m=m, d=d, o=o, init_hidden_std=hid_std, init_output_std=out_std
    )
    return ExperimentConfig(
        net=net,
        K=K,
        tau=tau,
        eta=float(eta) if eta is not None else None,
        rounds=rounds,
        algo=algo,
        batch=batch,
        seed=seed,
        c_eta=float(c_eta),
        data=data_resolved,
        partition_scheme=scheme,
        classes_per_client=int(cpc),
        probe_every=probe_every,
        out_dir=out_dir,
        sweep=sweep,
    )


def _build_dataset(cfg: ExperimentConfig) -> data_mod.Dataset:
    if "synthetic" in cfg.data:
        syn = cfg.data["synthetic"]
        return data_mod.gen_separable(
            syn["n_total"],
            cfg.net.d,
            syn["phi"],
            RngStream(cfg.seed, DATA_STREAM),
            o=cfg.net.o,
        )
    idx = cfg.data["idx"]
    ds = data_mod.load_idx(idx["images"], idx["labels"])
    if ds.d != cfg.net.d:
        raise RuntimeError(f"IDX images have dimension {ds.d}, config says net.d={cfg.net.d}")
    if ds.o != cfg.net.o:
        raise RuntimeError(f"IDX labels span {ds.o} classes, config says net.o={cfg.net.o}")
    return ds


def _build_partition(cfg: ExperimentConfig, ds: data_mod.Dataset) -> data_mod.Partition:
    rng = RngStream(cfg.seed, PARTITION_STREAM)
    if cfg.partition_scheme == "iid":
        return data_mod.partition_iid(ds, cfg.K, rng)
    return data_mod.partition_label_shards(ds, cfg.K, cfg.classes_per_client, rng)


def _resolve_out_dir(out_dir: str, override: str | None) -> Path:
    chosen = Path(override) if override else Path(out_dir)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not chosen.is_absolute():
        chosen = Path(root) / chosen
    return chosen


def _format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_metrics_csv(path: Path, log: MetricsLog) -> None:
    lines = [CSV_HEADER]
    for r in log.records:
        lines.append(",".join(_format_value(getattr(r, f)) for f in probes.ProbeRecord.CSV_FIELDS))
    path.write_text("\n".join(lines) + "\n")


def _rate_fit_dict(log: MetricsLog, tau: int) -> dict | None:
    rows = log.rows_at_round_boundaries(tau)
    losses = [r.global_loss for r in rows]
    try:
        fit = probes.linear_rate_fit(losses)
    except ValueError:
        return None
    return {
        "slope": fit.slope,
        "intercept": fit.intercept,
        "r2": fit.r2,
        "implied_rate": fit.implied_rate,
    }


def _test_accuracy(cfg: ExperimentConfig, params: network.Params) -> float | None:
    idx = cfg.data.get("idx", {})
    if "test_images" not in idx or "test_labels" not in idx:
        return None
    test = data_mod.load_idx(idx["test_images"], idx["test_labels"])
    if test.d != cfg.net.d:
        raise RuntimeError(f"test images have dimension {test.d}, net.d={cfg.net.d}")
    pred = np.argmax(network.predict(params, test.xs), axis=1)
    return float(np.mean(pred == test.labels))


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | None = None,
    file_tag: str = "",
) -> tuple[MetricsLog, dict]:
    """Execute one run and write metrics.csv / config.json / summary.json.

    `file_tag` (used by sweeps) is inserted into the three file names so
    cells of a grid can share one directory without collisions.
    """
    ds = _build_dataset(cfg)
    partition = _build_partition(cfg, ds)

    eta = cfg.eta
    phi = ds.phi
    if eta is None:
        if phi == 0.0:
            phi = data_mod.min_pairwise_distance(ds)
            ds = dataclasses.replace(ds, phi=phi)
            partition = _build_partition(cfg, ds)
        eta = default_lr(cfg.algo, cfg.net, partition.max_shard_size(), phi, cfg.tau, cfg.c_eta)
        if eta <= 0.0:
            raise RuntimeError("resolved step size is not positive; check c_eta")

    fed = FedConfig(
        K=cfg.K,
        tau=cfg.tau,
        eta=eta,
        rounds=cfg.rounds,
        algo=cfg.algo,
        batch=cfg.batch,
        seed=cfg.seed,
        c_eta=cfg.c_eta,
    )
    schedule = ProbeSchedule(every=cfg.probe_every if cfg.probe_every else cfg.tau)
    log = run(fed, partition, cfg.net, schedule)

    target = _resolve_out_dir(cfg.out_dir, out_dir)
    target.mkdir(parents=True, exist_ok=True)
    suffix = f"_{file_tag}" if file_tag else ""
    paths = {
        "metrics": target / f"metrics{suffix}.csv",
        "config": target / f"config{suffix}.json",
        "summary": target / f"summary{suffix}.json",
    }

    _write_metrics_csv(paths["metrics"], log)

    resolved = cfg.to_dict()
    resolved["fed"]["eta"] = eta
    resolved["net"]["init_hidden_std"] = cfg.net.hidden_std()
    resolved["net"]["init_output_std"] = cfg.net.output_std()
    if "synthetic" in resolved["data"]:
        resolved["data"]["synthetic"]["phi"] = phi
    resolved["resolved_phi"] = phi
    resolved["version"] = log.header["version"]
    paths["config"].write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    first, last = log.records[0], log.records[-1]
    summary = {
        "initial_loss": first.global_loss,
        "final_loss": last.global_loss,
        "loss_ratio": last.global_loss / first.global_loss if first.global_loss > 0 else None,
        "final_drift_virtual": last.drift_virtual,
        "final_drift_virtual_fro": last.drift_virtual_fro,
        "rounds": cfg.rounds,
        "total_steps": fed.total_steps,
        "rate_fit": _rate_fit_dict(log, cfg.tau),
        "records": len(log.records),
    }
    acc = _test_accuracy(cfg, log.final_params) if log.final_params is not None else None
    if acc is not None:
        summary["test_accuracy"] = acc
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return log, {k: str(v) for k, v in paths.items()}


def _set_param(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    section, key = param.split(".", 1)
    if section == "net":
        net_kwargs = {
            "L": cfg.net.L,
            "m": cfg.net.m,
            "d": cfg.net.d,
            "o": cfg.net.o,
            "init_hidden_std": cfg.net.init_hidden_std,
            "init_output_std": cfg.net.init_output_std,
        }
        net_kwargs[key] = value
        return dataclasses.replace(cfg, net=network.NetConfig(**net_kwargs))
    return dataclasses.replace(cfg, **{key: value})


def sweep(cfg: ExperimentConfig, out_dir: str | None = None) -> tuple[list[dict], dict]:
    """Run every (value, seed) cell of the sweep grid and aggregate.

    Returns (per-value summary rows, paths). Cell files carry the swept value
    and seed in their names; the aggregate lands in sweep_summary.csv.
    """
    if cfg.sweep is None:
        raise ConfigError(["sweep block is required for the sweep command"])
    spec = cfg.sweep
    key = spec.param.split(".", 1)[1]
    base_total = cfg.rounds * cfg.tau

    cells = []
    for value in spec.values:
        for s in spec.seeds:
            cell = _set_param(cfg, spec.param, value)
            cell = dataclasses.replace(cell, seed=s, sweep=None)
            if spec.equal_total_steps and spec.param == "fed.tau":
                if base_total % value != 0:
                    raise ConfigError(
                        [f"equal_total_steps: total steps {base_total} not divisible by tau={value}"]
                    )
                cell = dataclasses.replace(cell, rounds=base_total // value)
            tag = f"{key}{value}_seed{s}"
            log, paths = run_experiment(cell, out_dir=out_dir, file_tag=tag)
            fit = _rate_fit_dict(log, cell.tau)
            cells.append(
                {
                    "value": value,
                    "seed": s,
                    "final_loss": log.records[-1].global_loss,
                    "rate_slope": fit["slope"] if fit else math.nan,
                    "rate_r2": fit["r2"] if fit else math.nan,
                    "implied_rate": fit["implied_rate"] if fit else math.nan,
                }
            )

    rows = []
    for value in spec.values:
        mine = [c for c in cells if c["value"] == value]
        finals = [c["final_loss"] for c in mine]
        rows.append(
            {
                "param": spec.param,
                "value": value,
                "n_seeds": len(mine),
                "final_loss_mean": sum(finals) / len(finals),
                "final_loss_min": min(finals),
                "final_loss_max": max(finals),
                "rate_slope_mean": sum(c["rate_slope"] for c in mine) / len(mine),
                "implied_rate_mean": sum(c["implied_rate"] for c in mine) / len(mine),
            }
        )

    target = _resolve_out_dir(cfg.out_dir, out_dir)
    target.mkdir(parents=True, exist_ok=True)
    summary_path = target / "sweep_summary.csv"
    header = "param,value,n_seeds,final_loss_mean,final_loss_min,final_loss_max,rate_slope_mean,implied_rate_mean"
    lines = [header]
    for r in rows:
        lines.append(
            ",".join(
                [
                    r["param"],
                    _format_value(r["value"]),
                    str(r["n_seeds"]),
                    _format_value(r["final_loss_mean"]),
                    _format_value(r["final_loss_min"]),
                    _format_value(r["final_loss_max"]),
                    _format_value(r["rate_slope_mean"]),
                    _format_value(r["implied_rate_mean"]),
                ]
            )
        )
    summary_path.write_text("\n".join(lines) + "\n")
    return rows, {"summary": str(summary_path)}


def _load_raw(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read config file: {exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from exc


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedrelu", description="Federated ReLU-network training experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a single experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_sweep = sub.add_parser("sweep", help="execute a sweep grid")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out", default=None)
    p_val = sub.add_parser("validate", help="validate a config and echo the resolved form")
    p_val.add_argument("--config", required=True)
    args = parser.parse_args(argv)

    try:
        cfg = validate_config(_load_raw(args.config))
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2

    if args.command == "validate":
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0

    try:
        if args.command == "run":
            if args.seed is not None:
                cfg = dataclasses.replace(cfg, seed=args.seed)
            log, paths = run_experiment(cfg, out_dir=args.out)
            print(f"final loss {log.records[-1].global_loss!r} after {cfg.rounds} rounds")
            print(f"metrics: {paths['metrics']}")
            return 0
        rows, paths = sweep(cfg, out_dir=args.out)
        for r in rows:
            print(
                f"{r['param']}={r['value']}: final loss mean {r['final_loss_mean']:.6g} "
                f"(min {r['final_loss_min']:.6g}, max {r['final_loss_max']:.6g})"
            )
        print(f"summary: {paths['summary']}")
        return 0
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
