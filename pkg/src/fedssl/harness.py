"""Experiment configuration, runner and parameter sweeps.

A run is fully determined by its :class:`ExperimentConfig`; the metrics CSV
it writes is byte-identical across invocations.
"""
from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .data import Dataset, PartitionSpec, build_clients, generate_synthetic, load_idx, split_fractions
from .federation import Method, MethodConfig, RoundMetrics, run_training
from .nn import init_params
from .pseudolabel import Metric, Mode, SslConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Bad experiment configuration; the message names the offending key."""


# Every default lives here. Section -> key -> default.
DEFAULTS: dict[str, dict[str, Any]] = {
    "": {
        "seed": 0,
        "rounds": 150,
        "eval_every": 1,
        "participation": 0.3,
        "output_dir": "runs/default",
    },
    "dataset": {
        "kind": "synthetic",
        "n_classes": 10,
        "dim": 32,
        "per_class": 600,
        "spread": 0.8,
        "radius": 2.0,
        "modes_per_class": 1,
        "images": "",
        "labels": "",
        "train_frac": 0.80,
        "val_frac": 0.05,
        "test_frac": 0.15,
    },
    "partition": {
        "n_clients": 20,
        "alpha": 0.1,
        "label_ratio": 0.2,
    },
    "model": {
        "hidden": [128],
    },
    "method": {
        "name": "fedlabel",
        "tau": 20,
        "tau_prime": 20,
        "lr": 0.05,
        "batch_size": 16,
        "prox_mu": -1.0,  # negative: use the FedProx default
        "strong_aug": True,
        "aug_ops": 1,
        "aug_magnitude": 10.0,
        "uda_temperature": 0.4,
    },
    "ssl": {
        "beta": 0.4,
        "lambda0": 1.0,
        "metric": "variance",
        "mode": "confidence",
    },
}

# (low, high, inclusive-low, inclusive-high); None means unbounded
RANGES = {
    "rounds": (0, None, True, True),
    "eval_every": (1, None, True, True),
    "participation": (0, 1, False, True),
    "dataset.n_classes": (2, None, True, True),
    "dataset.dim": (2, None, True, True),
    "dataset.per_class": (1, None, True, True),
    "dataset.spread": (0, None, True, True),
    "dataset.radius": (0, None, False, True),
    "dataset.modes_per_class": (1, None, True, True),
    "dataset.train_frac": (0, 1, False, True),
    "dataset.val_frac": (0, 1, True, True),
    "dataset.test_frac": (0, 1, False, True),
    "partition.n_clients": (1, None, True, True),
    "partition.alpha": (0, None, False, True),
    "partition.label_ratio": (0, 1, False, True),
    "method.tau": (0, None, True, True),
    "method.tau_prime": (0, None, True, True),
    "method.lr": (0, None, True, True),
    "method.batch_size": (1, None, True, True),
    "method.aug_ops": (1, None, True, True),
    "method.aug_magnitude": (0, 30, True, True),
    "method.uda_temperature": (0, None, False, True),
    "ssl.beta": (0, 1, True, True),
    "ssl.lambda0": (0, None, True, True),
}

CHOICES = {
    "dataset.kind": ("synthetic", "idx"),
    "method.name": tuple(m.value for m in Method),
    "ssl.metric": tuple(m.value for m in Metric),
    "ssl.mode": tuple(m.value for m in Mode),
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    rounds: int
    eval_every: int
    participation: float
    output_dir: str
    dataset: dict
    partition: dict
    model: dict
    method: dict
    ssl: dict

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    def method_config(self) -> MethodConfig:
        m = self.method
        return MethodConfig(
            method=Method(m["name"]),
            ssl=SslConfig(self.ssl["beta"], self.ssl["lambda0"], Metric(self.ssl["metric"]), Mode(self.ssl["mode"])),
            tau=m["tau"],
            tau_prime=m["tau_prime"],
            lr=m["lr"],
            batch_size=m["batch_size"],
            prox_mu=None if m["prox_mu"] < 0 else m["prox_mu"],
            strong_aug=m["strong_aug"],
            aug_ops=m["aug_ops"],
            aug_magnitude=m["aug_magnitude"],
            uda_temperature=m["uda_temperature"],
        )

    def partition_spec(self) -> PartitionSpec:
        p = self.partition
        return PartitionSpec(p["n_clients"], p["alpha"], p["label_ratio"], self.seed)


def _check_type(key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in value)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _check_range(key: str, value):
    if key in RANGES:
        lo, hi, lo_inc, hi_inc = RANGES[key]
        if lo is not None and (value < lo or (value == lo and not lo_inc)):
            raise ConfigError(f"{key}: value {value} out of range")
        if hi is not None and (value > hi or (value == hi and not hi_inc)):
            raise ConfigError(f"{key}: value {value} out of range")
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key}: {value!r} not one of {', '.join(CHOICES[key])}")


def config_from_dict(doc: dict, base_dir: Path | None = None, apply_env: bool = True) -> ExperimentConfig:
    """Validate a raw TOML document against :data:`DEFAULTS`. Unknown keys
    and bad types or ranges raise :class:`ConfigError`. ``FEDSSL_SEED``
    overrides the seed when ``apply_env`` is set."""
    merged = copy.deepcopy(DEFAULTS)
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in merged or key == "":
                raise ConfigError(f"{key}: unknown section")
            for sub, v in value.items():
                full = f"{key}.{sub}"
                if sub not in merged[key]:
                    raise ConfigError(f"{full}: unknown key")
                merged[key][sub] = _check_type(full, v, DEFAULTS[key][sub])
        else:
            if key not in merged[""]:
                raise ConfigError(f"{key}: unknown key")
            merged[""][key] = _check_type(key, value, DEFAULTS[""][key])
    for section, values in merged.items():
        for k, v in values.items():
            _check_range(f"{section}.{k}" if section else k, v)

    ds = merged["dataset"]
    if abs(ds["train_frac"] + ds["val_frac"] + ds["test_frac"] - 1.0) > 1e-9:
        raise ConfigError("dataset.train_frac: train/val/test fractions must sum to 1")
    if ds["kind"] == "idx":
        for k in ("images", "labels"):
            p = Path(ds[k])
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            if not ds[k] or not p.exists():
                raise ConfigError(f"dataset.{k}: file {ds[k]!r} does not exist")
            ds[k] = str(p)
    if merged["method"]["prox_mu"] > 0 and not Method(merged["method"]["name"]).uses_prox:
        raise ConfigError("method.prox_mu: only FedProx variants take a proximal term")

    env_seed = os.environ.get("FEDSSL_SEED") if apply_env else None
    if env_seed is not None:
        try:
            merged[""]["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"seed: FEDSSL_SEED={env_seed!r} is not an integer") from None

    top = merged.pop("")
    return ExperimentConfig(**top, **merged)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(doc, path.parent)


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Re-validate ``cfg`` with dotted-key overrides, e.g. ``{"ssl.beta": 0.9}``."""
    doc = cfg.to_dict()
    for dotted, value in overrides.items():
        section, _, key = dotted.rpartition(".")
        (doc[section] if section else doc)[key] = value
    return config_from_dict(doc, apply_env=False)


# ---------------------------------------------------------------------------
# Running


def load_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        data = generate_synthetic(ds["n_classes"], ds["dim"], ds["per_class"], ds["spread"], cfg.seed, ds["radius"],
                                  ds["modes_per_class"])
    else:
        data = load_idx(ds["images"], ds["labels"], ds["n_classes"])
    train, val, test = split_fractions(data, [ds["train_frac"], ds["val_frac"], ds["test_frac"]], [cfg.seed, 17])
    return train, val, test


def prepare(cfg: ExperimentConfig):
    train, _, test = load_dataset(cfg)
    clients = build_clients(train, cfg.partition_spec())
    sizes = [train.dim, *cfg.model["hidden"], train.n_classes]
    init = init_params(sizes, np.random.default_rng([cfg.seed, 101]))
    return clients, init, test


def train(cfg: ExperimentConfig, on_round=None):
    clients, init, test = prepare(cfg)
    return run_training(
        clients, cfg.method_config(), cfg.rounds, init, test.x, test.y,
        seed=cfg.seed, participation=cfg.participation, eval_every=cfg.eval_every, on_round=on_round,
    )


def metrics_csv(history: list[RoundMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RoundMetrics.CSV_FIELDS)
    for m in history:
        w.writerow(m.csv_row())
    return buf.getvalue()


FINAL_WINDOW = 10


def final_accuracy(history: list[RoundMetrics], window: int = FINAL_WINDOW) -> float:
    """Mean test accuracy over the last ``window`` evaluated rounds.

    A single round is too noisy to rank runs on a few hundred test samples.
    """
    accs = [m.test_acc for m in history if not math.isnan(m.test_acc)]
    return float(np.mean(accs[-window:])) if accs else math.nan


AUDIT_FIELDS = ("round", "client", "sample_id", "selected", "conf_global", "conf_local",
                "pseudo_label", "true_label", "kl_active", "lambda")


class DecisionAudit:
    """``on_round`` hook writing one CSV row per FedLabel pseudo-label
    decision. Reads hidden labels, so it belongs to evaluation only."""

    def __init__(self, clients, path):
        self.by_id = {c.client_id: c for c in clients}
        self.file = open(path, "w", newline="")
        self.writer = csv.writer(self.file, lineterminator="\n")
        self.writer.writerow(AUDIT_FIELDS)

    def __call__(self, rnd, updates, params):
        for u in updates:
            d = u.decisions
            if d is None:
                continue
            c = self.by_id[u.client_id]
            truth = c.quarantined_labels()
            for i in range(len(d)):
                self.writer.writerow([
                    rnd, u.client_id, int(c.unlabeled_ids[i]) if c.unlabeled_ids.size else i,
                    "local" if d.selected_local[i] else "global",
                    repr(float(d.conf_global[i])), repr(float(d.conf_local[i])),
                    int(d.labels[i]), int(truth[i]), int(bool(d.kl_active[i])), repr(float(d.lam[i])),
                ])

    def close(self):
        self.file.close()


def run_experiment(cfg: ExperimentConfig, name: str = "metrics", audit: bool = False) -> Path:
    """Train, then write ``<name>.csv``, ``<name>.summary.json`` and
    ``<name>.config.json`` under the output directory. With ``audit`` the
    per-sample decisions go to ``<name>.decisions.csv``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if audit:
        clients, init, test = prepare(cfg)
        hook = DecisionAudit(clients, out / f"{name}.decisions.csv")
        try:
            history, _ = run_training(
                clients, cfg.method_config(), cfg.rounds, init, test.x, test.y, seed=cfg.seed,
                participation=cfg.participation, eval_every=cfg.eval_every, on_round=hook,
            )
        finally:
            hook.close()
    else:
        history, _ = train(cfg)
    path = out / f"{name}.csv"
    path.write_text(metrics_csv(history))
    summary = {
        "rounds": len(history),
        "final_test_acc": _json_float(final_accuracy(history)),
        "last_round_test_acc": None if not history else _json_float(history[-1].test_acc),
        "method": cfg.method["name"],
        "seed": cfg.seed,
    }
    (out / f"{name}.summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / f"{name}.config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def _json_float(v: float):
    return None if math.isnan(v) else v


# ---------------------------------------------------------------------------
# Sweeps


@dataclass
class SweepResult:
    overrides: dict
    final_acc: float
    history: list[RoundMetrics] = field(repr=False, default_factory=list)


def expand_grid(grid: dict[str, list]) -> list[dict]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _run_one(args):
    cfg, overrides = args
    history, _ = train(with_overrides(cfg, overrides))
    return SweepResult(overrides, final_accuracy(history), history)


def run_grid(cfg: ExperimentConfig, grid: dict[str, list], workers: int = 1) -> list[SweepResult]:
    jobs = [(cfg, o) for o in expand_grid(grid)]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def parse_grid(path) -> tuple[ExperimentConfig, dict[str, list]]:
    """A grid file is a config file plus a ``[grid]`` table mapping dotted
    keys to value lists."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    grid = doc.pop("grid", None)
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("grid: missing or empty [grid] table")
    cfg = config_from_dict(doc, path.parent)
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid.{key}: expected a non-empty list")
        with_overrides(cfg, {key: values[0]})  # validates the key
    return cfg, grid


def sweep(cfg: ExperimentConfig, grid: dict[str, list], workers: int = 1) -> Path:
    """Run the cross product of ``grid``; write one metrics CSV per run,
    ``sweep.csv`` with every run's final accuracy, and ``summary.txt``
    ranked best first."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_grid(cfg, grid, workers)
    keys = list(grid)
    rows = []
    for i, r in enumerate(results):
        (out / f"run{i:03d}.csv").write_text(metrics_csv(r.history))
        rows.append([f"run{i:03d}"] + [str(r.overrides[k]) for k in keys] + [repr(r.final_acc)])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run"] + keys + ["final_test_acc"])
    w.writerows(rows)
    (out / "sweep.csv").write_text(buf.getvalue())
    ranked = sorted(zip(rows, results), key=lambda rr: (-rr[1].final_acc, rr[0][0]))
    lines = [f"{rank + 1:>3}  {row[0]}  acc={res.final_acc:.4f}  " + "  ".join(f"{k}={res.overrides[k]}" for k in keys)
             for rank, (row, res) in enumerate(ranked)]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return out / "sweep.csv"
