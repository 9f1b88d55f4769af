import json
import math

import numpy as np
import pytest

from fedssl import cli
from fedssl.data import write_idx
from fedssl.harness import (
    DEFAULTS,
    ConfigError,
    config_from_dict,
    final_accuracy,
    parse_config,
    parse_grid,
    run_experiment,
    sweep,
    train,
    with_overrides,
)

TINY = """
rounds = 2
output_dir = "{out}"
[dataset]
per_class = 30
dim = 8
n_classes = 4
[partition]
n_clients = 5
[method]
tau = 3
tau_prime = 3
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(TINY.format(out=tmp_path / "out"))
    return path


def test_defaults_fully_populate(monkeypatch):
    monkeypatch.delenv("FEDSSL_SEED", raising=False)
    cfg = config_from_dict({})
    for section, values in DEFAULTS.items():
        target = cfg.to_dict() if section == "" else cfg.to_dict()[section]
        for k, v in values.items():
            assert target[k] == v
    assert cfg.dataset["spread"] == 0.8
    assert cfg.partition["n_clients"] == 20 and cfg.rounds == 150


def test_parse_is_pure(tiny):
    assert parse_config(tiny) == parse_config(tiny)


@pytest.mark.parametrize("doc, key", [
    ({"ssl": {"beta": 1.5}}, "ssl.beta"),
    ({"ssl": {"bogus": 1}}, "ssl.bogus"),
    ({"nosuch": {"a": 1}}, "nosuch"),
    ({"rounds": "ten"}, "rounds"),
    ({"method": {"name": "fedfoo"}}, "method.name"),
    ({"dataset": {"train_frac": 0.5}}, "dataset.train_frac"),
    ({"dataset": {"kind": "idx", "images": "/nope", "labels": "/nope"}}, "dataset.images"),
    ({"method": {"name": "fedavg", "prox_mu": 0.1}}, "method.prox_mu"),
    ({"partition": {"alpha": 0.0}}, "partition.alpha"),
    ({"model": {"hidden": [0]}}, "model.hidden"),
])
def test_config_errors_name_the_key(doc, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        config_from_dict(doc, apply_env=False)


def test_env_seed_override(monkeypatch, tiny):
    monkeypatch.setenv("FEDSSL_SEED", "17")
    assert parse_config(tiny).seed == 17
    monkeypatch.setenv("FEDSSL_SEED", "x")
    with pytest.raises(ConfigError, match="seed"):
        parse_config(tiny)


def test_overrides_revalidate(tiny):
    cfg = parse_config(tiny)
    assert with_overrides(cfg, {"ssl.beta": 0.9}).ssl["beta"] == 0.9
    with pytest.raises(ConfigError):
        with_overrides(cfg, {"ssl.beta": 2.0})


def test_zero_rounds_header_only(tiny):
    cfg = with_overrides(parse_config(tiny), {"rounds": 0})
    path = run_experiment(cfg)
    assert path.read_text() == "round,test_acc,mean_mismatch,accepted_frac,pseudo_acc,mean_lambda,sup_loss,unsup_ce,unsup_kl\n"


def test_rerun_is_byte_identical(tiny, tmp_path):
    cfg = parse_config(tiny)
    a = run_experiment(cfg, "a").read_bytes()
    b = run_experiment(cfg, "b").read_bytes()
    assert a == b
    summary = json.loads((tmp_path / "out" / "a.summary.json").read_text())
    assert summary["rounds"] == 2
    echoed = json.loads((tmp_path / "out" / "a.config.json").read_text())
    assert echoed["seed"] == cfg.seed


def test_final_accuracy_window():
    class M:
        def __init__(self, a):
            self.test_acc = a

    hist = [M(float(i)) for i in range(15)] + [M(math.nan)]
    assert final_accuracy(hist) == pytest.approx(np.mean(range(5, 15)))
    assert math.isnan(final_accuracy([]))


def test_singleton_sweep_matches_run(tiny, tmp_path):
    cfg = parse_config(tiny)
    run_experiment(cfg, "single")
    sweep(cfg, {"ssl.beta": [cfg.ssl["beta"]]})
    out = tmp_path / "out"
    assert (out / "run000.csv").read_bytes() == (out / "single.csv").read_bytes()


def test_metric_grid_completes(tiny, tmp_path):
    path = sweep(parse_config(tiny), {"ssl.metric": ["variance", "neg_entropy"]})
    rows = path.read_text().splitlines()
    assert rows[0] == "run,ssl.metric,final_test_acc" and len(rows) == 3
    assert (tmp_path / "out" / "summary.txt").read_text().count("acc=") == 2


def test_parse_grid(tmp_path):
    path = tmp_path / "g.toml"
    path.write_text(TINY.format(out=tmp_path) + '\n[grid]\n"ssl.beta" = [0.3, 0.9]\n"method.tau" = [5]\n')
    cfg, grid = parse_grid(path)
    assert grid == {"ssl.beta": [0.3, 0.9], "method.tau": [5]}
    path.write_text(TINY.format(out=tmp_path) + '\n[grid]\n"ssl.nope" = [1]\n')
    with pytest.raises(ConfigError):
        parse_grid(path)


def test_idx_dataset_config(tmp_path):
    rng = np.random.default_rng(0)
    write_idx(rng.integers(0, 256, (120, 4, 4)), np.arange(120) % 3, tmp_path / "i.idx", tmp_path / "l.idx")
    doc = {"rounds": 1, "dataset": {"kind": "idx", "images": "i.idx", "labels": "l.idx", "n_classes": 3},
           "partition": {"n_clients": 3}, "method": {"tau": 2, "tau_prime": 2}}
    cfg = config_from_dict(doc, base_dir=tmp_path, apply_env=False)
    history, _ = train(cfg)
    assert len(history) == 1


# ---------------------------------------------------------------- CLI

def test_cli_run_and_audit(tiny, tmp_path, capsys):
    assert cli.main(["run", str(tiny), "--audit"]) == 0
    out = tmp_path / "out"
    assert (out / "metrics.csv").exists()
    lines = (out / "metrics.decisions.csv").read_text().splitlines()
    assert lines[0].startswith("round,client,sample_id,selected")
    assert len(lines) > 1
    assert "final test accuracy" in capsys.readouterr().out


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[ssl]\nbeta = 1.5\n")
    assert cli.main(["run", str(bad)]) == 1
    assert "ssl.beta" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.toml")]) == 1


def test_cli_numeric_abort_exit_code(tmp_path):
    path = tmp_path / "nan.toml"
    path.write_text(TINY.format(out=tmp_path).replace("tau_prime = 3", "tau_prime = 3\nlr = 1e308"))
    assert cli.main(["run", str(path)]) == 2


def test_cli_gradcheck(capsys):
    assert cli.main(["gradcheck", "--seeds", "3"]) == 0
    assert capsys.readouterr().out.count("ok") == 3


def test_cli_partition_report(tiny, tmp_path):
    assert cli.main(["partition-report", str(tiny)]) == 0
    rows = (tmp_path / "out" / "partition.csv").read_text().splitlines()
    assert rows[0].startswith("client,n_labeled,n_unlabeled,mismatch,labeled_0")
    assert len(rows) == 6


def test_cli_sweep(tmp_path):
    path = tmp_path / "g.toml"
    path.write_text(TINY.format(out=tmp_path / "sw") + '\n[grid]\n"ssl.lambda0" = [0.0, 1.0]\n')
    assert cli.main(["sweep", str(path)]) == 0
    assert (tmp_path / "sw" / "sweep.csv").exists()
