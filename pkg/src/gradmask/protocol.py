"""Federated rounds: partition data, train clients, obfuscate, aggregate, evaluate."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregationSpec, aggregate
from .bundle import ParameterBundle
from .data import Dataset
from .nn import Graph, ModelConfig, OptimizerSpec, build_model, default_cnn, evaluate, train_epochs
from .obfuscation import ObfuscationSpec, obfuscate

TRACE_COLUMNS = ("round", "accuracy", "loss", "wall_ms")


class ClientError(RuntimeError):
    def __init__(self, client: int, cause: Exception):
        super().__init__(f"client {client}: {cause}")
        self.client = client
        self.__cause__ = cause


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "iid"
    beta: float = 0.5
    min_shard: int = 1
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        if self.kind not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.min_shard < 1:
            raise ValueError("min_shard must be >= 1")

    @property
    def label(self) -> str:
        return "iid" if self.kind == "iid" else f"dirichlet({self.beta:g})"


@dataclass(frozen=True)
class RoundConfig:
    rounds: int = 25
    epochs: int = 1
    clients: int = 10
    optimizer: OptimizerSpec = OptimizerSpec()
    obfuscation: ObfuscationSpec = ObfuscationSpec()
    aggregation: AggregationSpec = AggregationSpec()
    batch_size: int = 32
    seed: int = 0
    exempt_batchnorm: bool = True  # False masks BatchNorm too (failure-mode reproduction)

    def __post_init__(self):
        if self.rounds < 1 or self.epochs < 1 or self.clients < 1:
            raise ValueError("rounds, epochs and clients must all be >= 1")


@dataclass
class RoundMetrics:
    round: int
    masked_fraction: float
    fallback_coords: int
    wall_ms: float


@dataclass
class TrainingTrace:
    accuracy: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    final: ParameterBundle | None = None

    def __len__(self) -> int:
        return len(self.accuracy)

    def rows(self, timing: bool = True):
        for r, (a, l, w) in enumerate(zip(self.accuracy, self.loss, self.wall_ms), start=1):
            yield {"round": r, "accuracy": f"{a:.6f}", "loss": f"{l:.6f}",
                   "wall_ms": f"{w:.1f}" if timing else "0"}

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows(timing))
        return buf.getvalue()


def partition(labels, spec: PartitionSpec, n: int) -> list[np.ndarray]:
    """Split sample indices into ``n`` disjoint shards covering every index.

    ``iid`` deals a class-stratified shuffle round-robin, so shard sizes differ
    by at most one and each shard mirrors the global class mix. ``dirichlet``
    splits every class across clients with proportions drawn from
    Dir(beta, ..., beta); draws leaving a shard below ``min_shard`` are redrawn.
    """
    labels = np.asarray(labels)
    if n < 1:
        raise ValueError("need at least one client")
    if len(labels) < n * spec.min_shard:
        raise ValueError(f"{len(labels)} samples cannot give {n} shards of >= {spec.min_shard}")
    rng = np.random.default_rng(spec.seed)
    classes = np.unique(labels)
    if spec.kind == "iid":
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in classes])
        shards = [order[i::n] for i in range(n)]
        return [np.sort(s) for s in shards]
    for _ in range(spec.max_retries):
        parts: list[list] = [[] for _ in range(n)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(n, spec.beta))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for i, chunk in enumerate(np.split(idx, cuts)):
                parts[i].append(chunk)
        shards = [np.sort(np.concatenate(p)) for p in parts]
        if min(len(s) for s in shards) >= spec.min_shard:
            return shards
    raise ValueError(f"no Dirichlet draw met min_shard={spec.min_shard} in {spec.max_retries} tries")


def client_update(graph: Graph, central: ParameterBundle, shard: Dataset, cfg: RoundConfig,
                  round_idx: int, client: int) -> ParameterBundle:
    """One client's contribution: train from the central model, then obfuscate."""
    trained = train_epochs(graph, central, shard.images, shard.labels, cfg.optimizer,
                           epochs=cfg.epochs, batch_size=cfg.batch_size,
                           seed=(cfg.seed, round_idx, client))
    return obfuscate(trained, cfg.obfuscation, round_idx, client,
                     respect_exemption=cfg.exempt_batchnorm)


def run_round(graph: Graph, central: ParameterBundle, shards: list, cfg: RoundConfig,
              round_idx: int = 0) -> tuple[ParameterBundle, RoundMetrics]:
    """Fan the central model out to every client and aggregate what comes back."""
    if not central.is_dense():
        raise ValueError("central model must be dense")
    start = time.perf_counter()
    submissions = []
    for i, shard in enumerate(shards):
        try:
            submissions.append(client_update(graph, central, shard, cfg, round_idx, i))
        except Exception as exc:
            raise ClientError(i, exc) from exc
    stack_nan = np.stack([np.isnan(s.flatten()) for s in submissions])
    weights = [len(s) for s in shards] if cfg.aggregation.weighted else None
    new = aggregate(submissions, cfg.aggregation, fallback=central, weights=weights)
    metrics = RoundMetrics(
        round=round_idx,
        masked_fraction=float(stack_nan.mean()),
        fallback_coords=int(stack_nan.all(axis=0).sum()),
        wall_ms=(time.perf_counter() - start) * 1000.0,
    )
    return new, metrics


def run_training(train: Dataset, test: Dataset, cfg: RoundConfig, partition_spec: PartitionSpec,
                 model: ModelConfig | None = None, on_round=None) -> TrainingTrace:
    """Full federated run; records central test accuracy and loss after every round."""
    if model is None:
        model = default_cnn(train.shape, train.num_classes, cfg.seed)
    graph, central = build_model(model)
    shard_idx = partition(train.labels, partition_spec, cfg.clients)
    shards = [train.subset(s) for s in shard_idx]
    trace = TrainingTrace()
    for r in range(cfg.rounds):
        start = time.perf_counter()
        central, _ = run_round(graph, central, shards, cfg, r)
        acc, loss = evaluate(graph, central, test.images, test.labels)
        trace.accuracy.append(acc)
        trace.loss.append(loss)
        trace.wall_ms.append((time.perf_counter() - start) * 1000.0)
        if on_round is not None:
            on_round(r, acc, loss)
    trace.final = central
    return trace
