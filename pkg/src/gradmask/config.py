"""Experiment configuration files.

The format is INI-style (``[section]`` headers, ``key = value`` lines, ``#``
or ``;`` comments). Lists are comma separated. Every key has a default, so a
file only needs to state what differs; see ``configs/`` for complete
examples. Recognised sections and keys::

    [experiment]  kind, out, seeds, jobs, timing
    [data]        datasets, train_size, test_size, root, synth_classes, synth_shape
    [model]       kind (cnn | dense), hidden
    [grid]        <method> = p1, p2, ...     (method: none, mask, noise, clip, prune)
    [attack]      lr, weight_decay, checkpoint_interval, max_iterations, nan_policy
    [rounds]      rounds, epochs, clients, batch_size, optimizer, lr, exempt_batchnorm
    [partition]   kinds (iid, dirichlet), beta, min_shard
    [aggregation] kinds (mean, median), weighted
    [demo]        dataset, method, p, index
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .aggregation import KINDS as AGG_KINDS
from .attack import AttackConfig
from .obfuscation import METHODS, ObfuscationSpec

EXPERIMENTS = ("threshold-sweep", "convergence", "attack-demo")
DATASETS = ("mnist", "cifar10", "digits", "synth")


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, str]] = {
    "experiment": {"kind": "threshold-sweep", "out": "results", "seeds": "0,1,2,3,4",
                   "jobs": "1", "timing": "true"},
    "data": {"datasets": "digits, synth", "train_size": "2000", "test_size": "1000",
             "root": "", "synth_classes": "4", "synth_shape": "1,28,28"},
    "model": {"kind": "cnn", "hidden": ""},
    "grid": {},
    "attack": {"lr": "0.03", "weight_decay": "0.01", "checkpoint_interval": "30",
               "max_iterations": "3000", "nan_policy": "zero"},
    "rounds": {"rounds": "25", "epochs": "1", "clients": "10", "batch_size": "32",
               "optimizer": "adam", "lr": "0.001", "exempt_batchnorm": "true"},
    "partition": {"kinds": "iid, dirichlet", "beta": "0.5", "min_shard": "1"},
    "aggregation": {"kinds": "mean, median", "weighted": "false"},
    "demo": {"dataset": "digits", "method": "mask", "p": "0.4", "index": ""},
}


def _list(s: str) -> list[str]:
    return [t.strip() for t in s.split(",") if t.strip()]


def _bool(s: str, key: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {s!r}")


@dataclass
class ExperimentConfig:
    kind: str
    out: str
    seeds: list
    jobs: int
    timing: bool
    datasets: list
    train_size: int
    test_size: int
    data_root: str
    synth_classes: int
    synth_shape: tuple
    model_kind: str
    hidden: tuple
    grid: list  # [(method, p), ...] in file order
    attack: AttackConfig
    rounds: int
    epochs: int
    clients: int
    batch_size: int
    optimizer: str
    lr: float
    exempt_batchnorm: bool
    partitions: list
    beta: float
    min_shard: int
    aggregations: list
    weighted: bool
    demo_dataset: str
    demo_method: str
    demo_p: float
    demo_index: int | None = None
    source: dict = field(default_factory=dict, repr=False)

    def config_hash(self) -> str:
        """Short digest of every setting that can change results (not out/jobs/timing)."""
        d = asdict(self)
        for k in ("out", "jobs", "timing", "source", "seeds"):
            d.pop(k, None)
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _merged(parser: configparser.ConfigParser) -> dict:
    merged = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    for sec in parser.sections():
        if sec not in merged:
            raise ConfigError(f"unknown section [{sec}]")
        for key, val in parser.items(sec):
            if sec not in ("grid",) and key not in DEFAULTS[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            merged[sec][key] = val
    return merged


def apply_override(merged: dict, assignment: str) -> None:
    """Apply ``section.key=value`` on top of a merged config dict."""
    if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
        raise ConfigError(f"override {assignment!r} is not section.key=value")
    lhs, value = assignment.split("=", 1)
    sec, key = lhs.strip().split(".", 1)
    if sec not in merged:
        raise ConfigError(f"unknown section [{sec}]")
    if sec != "grid" and key not in DEFAULTS[sec]:
        raise ConfigError(f"unknown key {sec}.{key}")
    merged[sec][key] = value.strip()


def parse_text(text: str, overrides=()) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    merged = _merged(parser)
    for o in overrides:
        apply_override(merged, o)
    return build(merged)


def load(path=None, overrides=()) -> ExperimentConfig:
    text = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        text = p.read_text()
    return parse_text(text, overrides)


def build(m: dict) -> ExperimentConfig:
    try:
        ex, da, mo, at, ro, pa, ag, de = (m[s] for s in (
            "experiment", "data", "model", "attack", "rounds", "partition", "aggregation", "demo"))
        kind = ex["kind"].strip()
        if kind not in EXPERIMENTS:
            raise ConfigError(f"experiment.kind must be one of {EXPERIMENTS}, got {kind!r}")
        seeds = [int(s) for s in _list(ex["seeds"])]
        if not seeds:
            raise ConfigError("experiment.seeds is empty")
        datasets = _list(da["datasets"])
        for d in datasets + [de["dataset"].strip()]:
            if d not in DATASETS:
                raise ConfigError(f"unknown dataset {d!r}")
        grid = []
        for method, ps in m["grid"].items():
            if method not in METHODS:
                raise ConfigError(f"unknown obfuscation method {method!r} in [grid]")
            values = [float(v) for v in _list(ps)] or [0.0]
            for p in values:
                ObfuscationSpec(method, p)
                grid.append((method, p))
        if kind != "attack-demo" and not grid:
            raise ConfigError("[grid] is empty")
        if kind == "threshold-sweep" and not datasets:
            raise ConfigError("data.datasets is empty")
        attack = AttackConfig(lr=float(at["lr"]), weight_decay=float(at["weight_decay"]),
                              checkpoint_interval=int(at["checkpoint_interval"]),
                              max_iterations=int(at["max_iterations"]),
                              nan_policy=at["nan_policy"].strip())
        partitions = _list(pa["kinds"])
        for p in partitions:
            if p not in ("iid", "dirichlet"):
                raise ConfigError(f"unknown partition kind {p!r}")
        aggs = _list(ag["kinds"])
        for a in aggs:
            if a not in AGG_KINDS:
                raise ConfigError(f"unknown aggregation {a!r}")
        if kind == "convergence" and not (partitions and aggs and datasets):
            raise ConfigError("convergence needs datasets, partition kinds and aggregation kinds")
        demo_method = de["method"].strip()
        demo_p = float(de["p"])
        ObfuscationSpec(demo_method, demo_p)
        cfg = ExperimentConfig(
            kind=kind,
            out=ex["out"].strip(),
            seeds=seeds,
            jobs=max(1, int(ex["jobs"])),
            timing=_bool(ex["timing"], "experiment.timing"),
            datasets=datasets,
            train_size=int(da["train_size"]),
            test_size=int(da["test_size"]),
            data_root=da["root"].strip(),
            synth_classes=int(da["synth_classes"]),
            synth_shape=tuple(int(v) for v in _list(da["synth_shape"])),
            model_kind=mo["kind"].strip(),
            hidden=tuple(int(v) for v in _list(mo["hidden"])),
            grid=grid,
            attack=attack,
            rounds=int(ro["rounds"]),
            epochs=int(ro["epochs"]),
            clients=int(ro["clients"]),
            batch_size=int(ro["batch_size"]),
            optimizer=ro["optimizer"].strip(),
            lr=float(ro["lr"]),
            exempt_batchnorm=_bool(ro["exempt_batchnorm"], "rounds.exempt_batchnorm"),
            partitions=partitions,
            beta=float(pa["beta"]),
            min_shard=int(pa["min_shard"]),
            aggregations=aggs,
            weighted=_bool(ag["weighted"], "aggregation.weighted"),
            demo_dataset=de["dataset"].strip(),
            demo_method=demo_method,
            demo_p=demo_p,
            demo_index=int(de["index"]) if de["index"].strip() else None,
            source=m,
        )
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.model_kind not in ("cnn", "dense"):
        raise ConfigError(f"model.kind must be cnn or dense, got {cfg.model_kind!r}")
    if cfg.optimizer not in ("adam", "sgd"):
        raise ConfigError(f"rounds.optimizer must be adam or sgd, got {cfg.optimizer!r}")
    if min(cfg.rounds, cfg.epochs, cfg.clients, cfg.batch_size) < 1:
        raise ConfigError("rounds, epochs, clients and batch_size must be >= 1")
    if not cfg.beta > 0:
        raise ConfigError("partition.beta must be > 0")
    return cfg
