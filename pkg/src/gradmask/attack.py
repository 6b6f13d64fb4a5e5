"""iDLG gradient inversion: recover a training image from one intercepted gradient."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bundle import ParameterBundle
from .nn import Adam, Graph, loss_and_gradients, matching_objective
from .obfuscation import ObfuscationSpec, obfuscate


class LabelInferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    lr: float = 0.03
    weight_decay: float = 0.01
    checkpoint_interval: int = 30
    max_iterations: int = 3000
    seed: int = 0
    rel_tol: float = 1e-6
    nan_policy: str = "drop"  # how masked (NaN) gradient entries enter the objective

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.nan_policy not in ("drop", "zero"):
            raise ValueError(f"unknown nan_policy {self.nan_policy!r}")


@dataclass
class GradientCapture:
    grads: ParameterBundle
    params: ParameterBundle
    obfuscation: ObfuscationSpec = field(default_factory=ObfuscationSpec)


@dataclass
class AttackResult:
    reconstruction: np.ndarray
    label: int | None
    label_inferred: bool
    loss_trace: list
    checkpoints: list
    iterations: int
    stop_reason: str
    best_loss: float
    soft_label: np.ndarray | None = None


def capture_gradient(graph: Graph, params: ParameterBundle, image, label: int,
                     obf: ObfuscationSpec = ObfuscationSpec(), round_idx: int = 0, client: int = 0) -> GradientCapture:
    """Single-sample gradient as seen on the wire, after the client's obfuscation."""
    image = np.asarray(image, dtype=np.float64)
    _, grads = loss_and_gradients(graph, params, image[None], [label])
    return GradientCapture(obfuscate(grads, obf, round_idx, client), params.copy(), obf)


def infer_label(graph: Graph, capture: GradientCapture) -> int:
    """Read the label off the sign of the classifier's weight-gradient rows.

    With one sample and non-negative penultimate activations, only the true
    class has a negative row sum. NaN entries are skipped.
    """
    rows = capture.grads[f"{graph.head.name}.weight"]
    live = ~np.isnan(rows).all(axis=1)
    sums = np.where(live, np.nansum(rows, axis=1), 0.0)
    candidates = np.flatnonzero(live & (sums < 0))
    if candidates.size == 0:
        raise LabelInferenceError("label inference failed: no row with a negative gradient sum")
    return int(candidates[np.argmin(sums[candidates])])


def run_attack(graph: Graph, capture: GradientCapture, cfg: AttackConfig = AttackConfig(),
               init_image=None) -> AttackResult:
    """Optimise a dummy image until its gradient matches the capture.

    Adam (lr and coupled weight decay from ``cfg``) drives the dummy input.
    The label comes from :func:`infer_label`; if that fails a soft label is
    optimised jointly. Every ``checkpoint_interval`` iterations the matching
    loss is recorded, and the run stops once two checkpoints in a row fail to
    go below their predecessor. The lowest-loss iterate is returned.
    """
    if capture.params.nan_count():
        raise ValueError("captured model parameters must be dense")
    rng = np.random.default_rng(cfg.seed)
    if init_image is None:
        x = rng.uniform(0.0, 1.0, graph.input_shape)
    else:
        x = np.array(init_image, dtype=np.float64).reshape(graph.input_shape)
    values = {"x": x}
    try:
        label = infer_label(graph, capture)
        inferred = True
    except LabelInferenceError:
        label, inferred = None, False
        values["y"] = rng.standard_normal(graph.num_classes)

    opt = Adam(lr=cfg.lr, weight_decay=cfg.weight_decay)
    best_loss, best_x, best_y = np.inf, x.copy(), values.get("y")
    trace, checkpoints = [], []
    stall, it, reason = 0, 0, "max_iter"
    for it in range(cfg.max_iterations):
        loss, gx, gy = matching_objective(graph, capture.params, values["x"], capture.grads,
                                          label=label, label_logits=values.get("y"),
                                          nan_policy=cfg.nan_policy)
        if not (np.isfinite(loss) and np.isfinite(gx).all()):
            break
        trace.append(loss)
        if loss < best_loss:
            best_loss, best_x = loss, values["x"].copy()
            if "y" in values:
                best_y = values["y"].copy()
        if it % cfg.checkpoint_interval == 0:
            if checkpoints:
                prev = checkpoints[-1]
                stall = stall + 1 if not loss < prev - cfg.rel_tol * abs(prev) else 0
            checkpoints.append(loss)
            if stall >= 2:
                reason = "converged"
                break
        grads = {"x": gx}
        if gy is not None:
            grads["y"] = gy
        opt.step(values, grads)
    soft = None
    if best_y is not None:
        e = np.exp(best_y - best_y.max())
        soft = e / e.sum()
        label = int(np.argmax(soft))
    return AttackResult(
        reconstruction=best_x,
        label=label,
        label_inferred=inferred,
        loss_trace=trace,
        checkpoints=checkpoints,
        iterations=len(trace),
        stop_reason=reason,
        best_loss=float(best_loss),
        soft_label=soft,
    )
