"""Experiment drivers behind the CLI: threshold sweep, convergence grid, attack demo."""
from __future__ import annotations

import csv
import json
import logging
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .aggregation import AggregationSpec
from .attack import capture_gradient, run_attack
from .config import ConfigError, ExperimentConfig
from .data import load_named, write_pnm
from .metrics import assess_leakage, quantize, shift_brightness
from .nn import ModelConfig, OptimizerSpec, build_model, default_cnn, dense_model
from .obfuscation import ObfuscationSpec
from .protocol import PartitionSpec, RoundConfig, run_training

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("dataset", "method", "p", "seed", "status", "mse", "max_adjusted_ssim",
                 "argmax_offset", "attack_iterations", "wall_ms", "config_hash")
CONVERGENCE_COLUMNS = ("method", "p", "aggregation", "partition", "round", "accuracy", "loss",
                       "wall_ms", "seed", "config_hash")
DATA_SEED = 0  # dataset subsampling is shared by every cell


@dataclass
class RunOutcome:
    rows: list
    summary: str
    failures: int
    paths: dict


def prepare_out(out) -> Path:
    """Create the output directory or fail before any compute happens."""
    path = Path(out)
    if path.exists() and not path.is_dir():
        raise ConfigError(f"output path {path} exists and is not a directory")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    return path


@lru_cache(maxsize=8)
def _dataset(name, train_size, test_size, root, shape, classes):
    return load_named(name, train_size, test_size, seed=DATA_SEED, root=root or None,
                      shape=shape, classes=classes)


def datasets_for(cfg: ExperimentConfig, name: str):
    return _dataset(name, cfg.train_size, cfg.test_size, cfg.data_root, cfg.synth_shape,
                    cfg.synth_classes)


def model_for(cfg: ExperimentConfig, shape, classes: int, seed: int) -> ModelConfig:
    if cfg.model_kind == "dense":
        return dense_model(shape, classes, cfg.hidden, seed)
    return default_cnn(shape, classes, seed)


def pick_sample(test, seed: int, index: int | None = None):
    i = int(np.random.default_rng(seed).integers(len(test))) if index is None else index
    if not 0 <= i < len(test):
        raise IndexError(f"sample index {i} outside test set of {len(test)}")
    return i, test.images[i], int(test.labels[i])


def attack_cell(cfg: ExperimentConfig, dataset: str, method: str, p: float, seed: int,
                index: int | None = None):
    """One sweep cell: (sample index, original, AttackResult, LeakageReport)."""
    _, test = datasets_for(cfg, dataset)
    i, image, label = pick_sample(test, seed, index)
    graph, params = build_model(model_for(cfg, test.shape, test.num_classes, seed))
    capture = capture_gradient(graph, params, image, label, ObfuscationSpec(method, p, seed))
    result = run_attack(graph, capture, replace(cfg.attack, seed=seed))
    report = assess_leakage(result.reconstruction, image)
    return i, image, result, report


def _fmt(v: float, digits: int = 6) -> str:
    return f"{v:.{digits}f}"


def _sweep_task(args):
    cfg, dataset, method, p, seed = args
    row = {"dataset": dataset, "method": method, "p": f"{p:g}", "seed": seed, "status": "ok",
           "mse": "", "max_adjusted_ssim": "", "argmax_offset": "", "attack_iterations": "",
           "wall_ms": "0", "config_hash": cfg.config_hash()}
    start = time.perf_counter()
    try:
        _, _, result, report = attack_cell(cfg, dataset, method, p, seed)
        row.update(mse=_fmt(report.mse, 8), max_adjusted_ssim=_fmt(report.max_adjusted_ssim),
                   argmax_offset=report.argmax_offset, attack_iterations=result.iterations)
    except Exception as exc:  # a failing cell is recorded, never fatal
        row["status"] = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    if cfg.timing:
        row["wall_ms"] = f"{(time.perf_counter() - start) * 1000.0:.1f}"
    return row


def _map(fn, tasks, jobs: int):
    """Ordered map; results come back in task order whatever the completion order."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize_sweep(rows) -> str:
    """Median max_adjusted_ssim per (method, p) row and dataset column; failed cells skipped."""
    cells = defaultdict(list)
    datasets, keys = [], []
    for r in rows:
        d, k = r["dataset"], (r["method"], r["p"])
        if d not in datasets:
            datasets.append(d)
        if k not in keys:
            keys.append(k)
        if r["status"] == "ok":
            cells[d, k].append(float(r["max_adjusted_ssim"]))
    head = ["method", "p"] + datasets
    lines = [head]
    for method, p in keys:
        line = [method, p]
        for d in datasets:
            v = cells.get((d, (method, p)))
            line.append(f"{np.median(v):.3f}" if v else "-")
        lines.append(line)
    widths = [max(len(l[i]) for l in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(l, widths)).rstrip() for l in lines) + "\n"


def run_threshold_sweep(cfg: ExperimentConfig) -> RunOutcome:
    out = prepare_out(cfg.out)
    tasks = [(cfg, d, m, p, s) for d in cfg.datasets for m, p in cfg.grid for s in cfg.seeds]
    log.info("threshold sweep: %d cells", len(tasks))
    rows = [{k: str(r[k]) for k in SWEEP_COLUMNS} for r in _map(_sweep_task, tasks, cfg.jobs)]
    summary = summarize_sweep(rows)
    paths = {"csv": out / "threshold_sweep.csv", "summary": out / "threshold_summary.txt"}
    write_csv(paths["csv"], SWEEP_COLUMNS, rows)
    paths["summary"].write_text(summary)
    failures = sum(r["status"] != "ok" for r in rows)
    return RunOutcome(rows, summary, failures, paths)


def round_config(cfg: ExperimentConfig, method: str, p: float, aggregation: str, seed: int,
                 exempt_batchnorm: bool | None = None) -> RoundConfig:
    return RoundConfig(
        rounds=cfg.rounds, epochs=cfg.epochs, clients=cfg.clients,
        optimizer=OptimizerSpec(cfg.optimizer, lr=cfg.lr),
        obfuscation=ObfuscationSpec(method, p, seed),
        aggregation=AggregationSpec(aggregation, cfg.weighted),
        batch_size=cfg.batch_size, seed=seed,
        exempt_batchnorm=cfg.exempt_batchnorm if exempt_batchnorm is None else exempt_batchnorm,
    )


def partition_spec(cfg: ExperimentConfig, kind: str, seed: int) -> PartitionSpec:
    return PartitionSpec(kind, beta=cfg.beta, min_shard=cfg.min_shard, seed=seed)


def _partition_label(kind: str, beta: float) -> str:
    return "iid" if kind == "iid" else f"dirichlet({beta:g})"


def _convergence_task(args):
    cfg, method, p, agg, part, seed = args
    base = {"method": method, "p": f"{p:g}", "aggregation": agg,
            "partition": _partition_label(part, cfg.beta), "seed": seed,
            "config_hash": cfg.config_hash()}
    try:
        train, test = datasets_for(cfg, cfg.datasets[0])
        model = model_for(cfg, train.shape, train.num_classes, seed)
        trace = run_training(train, test, round_config(cfg, method, p, agg, seed),
                             partition_spec(cfg, part, seed), model)
    except Exception as exc:
        return [dict(base, round="", accuracy="", loss="", wall_ms="0",
                     status=f"error: {type(exc).__name__}: {exc}")]
    return [dict(base, status="ok", **r) for r in trace.rows(cfg.timing)]


PLOT_SCRIPT = '''"""Plot convergence traces from {csv}; needs matplotlib."""
import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "{csv}"
curves = defaultdict(list)
with open(path, newline="") as fh:
    for r in csv.DictReader(fh):
        if r["round"]:
            key = (r["aggregation"], r["partition"], r["method"] + " " + r["p"], r["seed"])
            curves[key].append((int(r["round"]), float(r["accuracy"])))
panels = sorted({{(k[0], k[1]) for k in curves}})
fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 4), squeeze=False)
for ax, (agg, part) in zip(axes[0], panels):
    for (a, pt, label, seed), pts in sorted(curves.items()):
        if (a, pt) == (agg, part):
            xs, ys = zip(*sorted(pts))
            ax.plot(xs, ys, label=f"{{label}} (seed {{seed}})")
    ax.set_title(f"{{agg}} / {{part}}")
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig("convergence.png", dpi=120)
'''


def final_accuracy(rows) -> dict:
    """{(method, p, aggregation, partition): mean final-round accuracy over seeds}."""
    last = {}
    for r in rows:
        if r["round"] == "":
            continue
        key = (r["method"], r["p"], r["aggregation"], r["partition"], r["seed"])
        if key not in last or int(r["round"]) > int(last[key]["round"]):
            last[key] = r
    acc = defaultdict(list)
    for (m, p, a, pt, _), r in last.items():
        acc[m, p, a, pt].append(float(r["accuracy"]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def summarize_convergence(rows) -> str:
    finals = final_accuracy(rows)
    methods, settings = [], []
    for r in rows:
        m, s = (r["method"], r["p"]), (r["aggregation"], r["partition"])
        if m not in methods:
            methods.append(m)
        if s not in settings:
            settings.append(s)
    head = ["method", "p"] + [f"{a}/{pt}" for a, pt in settings]
    lines = [head]
    for m, p in methods:
        vals = [finals.get((m, p, a, pt)) for a, pt in settings]
        lines.append([m, p] + ["-" if v is None else f"{v:.3f}" for v in vals])
    widths = [max(len(l[i]) for l in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(l, widths)).rstrip() for l in lines) + "\n"


def run_convergence(cfg: ExperimentConfig) -> RunOutcome:
    out = prepare_out(cfg.out)
    tasks = [(cfg, m, p, a, pt, s) for m, p in cfg.grid for a in cfg.aggregations
             for pt in cfg.partitions for s in cfg.seeds]
    log.info("convergence: %d runs of %d rounds", len(tasks), cfg.rounds)
    results = _map(_convergence_task, tasks, cfg.jobs)
    failures = sum(res[0]["status"] != "ok" for res in results)
    rows = [{k: str(r[k]) for k in CONVERGENCE_COLUMNS} for res in results for r in res]
    summary = summarize_convergence(rows)
    paths = {"csv": out / "convergence.csv", "summary": out / "convergence_summary.txt",
             "plot": out / "plot_convergence.py"}
    write_csv(paths["csv"], CONVERGENCE_COLUMNS, rows)
    paths["summary"].write_text(summary)
    paths["plot"].write_text(PLOT_SCRIPT.format(csv=paths["csv"].name))
    if failures:
        errors = [res[0]["status"] for res in results if res[0]["status"] != "ok"]
        (out / "convergence_errors.txt").write_text("\n".join(errors) + "\n")
    return RunOutcome(rows, summary, failures, paths)


def run_attack_demo(cfg: ExperimentConfig) -> RunOutcome:
    """Attack one sample and write original, raw and brightness-adjusted pixmaps."""
    out = prepare_out(cfg.out)
    seed = cfg.seeds[0]
    idx, image, result, report = attack_cell(cfg, cfg.demo_dataset, cfg.demo_method, cfg.demo_p,
                                             seed, cfg.demo_index)
    ext = "pgm" if image.shape[0] == 1 else "ppm"
    orig_u8, rec_u8 = quantize(image), quantize(result.reconstruction)
    adjusted = shift_brightness(rec_u8, report.argmax_offset, report.wrap)
    paths = {"original": out / f"original.{ext}", "reconstruction": out / f"reconstruction.{ext}",
             "adjusted": out / f"adjusted.{ext}", "report": out / "report.json"}
    write_pnm(paths["original"], orig_u8)
    write_pnm(paths["reconstruction"], rec_u8)
    write_pnm(paths["adjusted"], adjusted)
    doc = {
        "dataset": cfg.demo_dataset, "method": cfg.demo_method, "p": cfg.demo_p, "seed": seed,
        "sample_index": idx, "true_label": None, "inferred_label": result.label,
        "label_inferred": result.label_inferred, "attack_iterations": result.iterations,
        "stop_reason": result.stop_reason, "best_loss": result.best_loss,
        "mse": report.mse, "raw_ssim": report.raw_ssim,
        "max_adjusted_ssim": report.max_adjusted_ssim, "argmax_offset": report.argmax_offset,
        "ssim_by_offset": dict(zip(map(str, report.offsets), report.ssims)),
        "config_hash": cfg.config_hash(),
    }
    _, test = datasets_for(cfg, cfg.demo_dataset)
    doc["true_label"] = int(test.labels[idx])
    paths["report"].write_text(json.dumps(doc, indent=2) + "\n")
    summary = (f"{cfg.demo_dataset} sample {idx} {cfg.demo_method} p={cfg.demo_p:g}: "
               f"raw SSIM {report.raw_ssim:.3f}, max adjusted SSIM {report.max_adjusted_ssim:.3f} "
               f"at offset {report.argmax_offset}\n")
    return RunOutcome([doc], summary, 0, paths)


RUNNERS = {
    "threshold-sweep": run_threshold_sweep,
    "convergence": run_convergence,
    "attack-demo": run_attack_demo,
}
