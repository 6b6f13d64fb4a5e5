"""Small CNN / MLP models over the autodiff core.

A model is a :class:`Graph` (static layer chain with shape checking) plus a
:class:`ParameterBundle` holding its values. BatchNorm entries carry the
``mask_exempt`` tag so masking can skip them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bundle import MASK_EXEMPT, MASKABLE, Entry, ParameterBundle

LAYER_KINDS = ("dense", "conv", "relu", "pool", "batchnorm", "flatten")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class GraphError(ValueError):
    """Shape or input error, with the offending node name when known."""

    def __init__(self, message: str, node: str | None = None):
        super().__init__(f"{node}: {message}" if node else message)
        self.node = node


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0  # output features (dense) or output channels (conv)
    kernel: int = 3
    padding: str = "same"
    tag: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        tag = self.tag
        if tag is None:
            tag = MASK_EXEMPT if self.kind == "batchnorm" else MASKABLE
        if self.kind == "batchnorm" and tag != MASK_EXEMPT:
            raise ValueError("batchnorm layers are always mask_exempt")
        object.__setattr__(self, "tag", tag)


@dataclass(frozen=True)
class ModelConfig:
    """Input shape (C, H, W), class count and hidden layers.

    The classifier head (flatten if needed, then dense to ``num_classes``) is
    appended automatically.
    """

    input_shape: tuple
    num_classes: int
    layers: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))


def default_cnn(input_shape=(1, 28, 28), num_classes: int = 10, seed: int = 0) -> ModelConfig:
    """conv(8)+BN+ReLU+pool, conv(16)+BN+ReLU+pool, dense head."""
    layers = (
        LayerSpec("conv", 8, 3), LayerSpec("batchnorm"), LayerSpec("relu"), LayerSpec("pool"),
        LayerSpec("conv", 16, 3), LayerSpec("batchnorm"), LayerSpec("relu"), LayerSpec("pool"),
    )
    return ModelConfig(tuple(input_shape), num_classes, layers, seed)


def dense_model(input_shape, num_classes: int, hidden=(), seed: int = 0) -> ModelConfig:
    layers = []
    for h in hidden:
        layers += [LayerSpec("dense", h), LayerSpec("relu")]
    return ModelConfig(tuple(input_shape), num_classes, tuple(layers), seed)


@dataclass(frozen=True)
class Node:
    name: str
    spec: LayerSpec
    in_shape: tuple
    out_shape: tuple
    params: tuple = ()  # ((param name, shape), ...)


@dataclass
class Graph:
    """Static layer chain. Shapes exclude the batch dimension."""

    config: ModelConfig
    nodes: list = field(default_factory=list)

    @property
    def input_shape(self) -> tuple:
        return self.config.input_shape

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def head(self) -> Node:
        return self.nodes[-1]

    def param_names(self) -> list[str]:
        return [p for n in self.nodes for p, _ in n.params]

    # -- evaluation -----------------------------------------------------------
    def apply(self, params: dict, x: Tensor, train: bool = False, batch_stats: dict | None = None) -> Tensor:
        """Run the chain on ``x`` (N, *input_shape).

        ``params`` maps names to tensors. With ``train=True`` BatchNorm uses
        batch statistics and, if ``batch_stats`` is a dict, records
        ``(mean, unbiased var)`` per BatchNorm node into it. Otherwise it uses
        the running statistics from ``params``.
        """
        h = x
        for node in self.nodes:
            k = node.spec.kind
            if k == "dense":
                h = ad.add(ad.matmul(h, params[f"{node.name}.weight"].T), params[f"{node.name}.bias"])
            elif k == "conv":
                pad = node.spec.kernel // 2 if node.spec.padding == "same" else 0
                h = ad.conv2d(h, params[f"{node.name}.weight"], params[f"{node.name}.bias"], pad)
            elif k == "relu":
                h = ad.relu(h)
            elif k == "pool":
                h = ad.avg_pool2(h)
            elif k == "flatten":
                h = ad.reshape(h, (h.shape[0], -1))
            elif k == "batchnorm":
                h = _batchnorm(node, h, params, train, batch_stats)
        return h


def _batchnorm(node: Node, h: Tensor, params: dict, train: bool, batch_stats) -> Tensor:
    c = node.in_shape[0]
    bshape = (1, c, 1, 1) if len(node.in_shape) == 3 else (1, c)
    axes = (0, 2, 3) if len(node.in_shape) == 3 else (0,)
    gamma = ad.reshape(params[f"{node.name}.weight"], bshape)
    beta = ad.reshape(params[f"{node.name}.bias"], bshape)
    if train:
        mu = ad.mean(h, axis=axes, keepdims=True)
        centered = h - mu
        var = ad.mean(centered * centered, axis=axes, keepdims=True)
        if batch_stats is not None:
            count = h.size // c
            unbiased = var.data.reshape(c) * (count / max(count - 1, 1))
            batch_stats[node.name] = (mu.data.reshape(c).copy(), unbiased)
        return centered * (ad.rsqrt(var + BN_EPS) * gamma) + beta
    rm = params[f"{node.name}.running_mean"]
    rv = params[f"{node.name}.running_var"]
    # obfuscated aggregates can leave a negative variance behind
    rv_data = np.maximum(rv.data, 0.0)
    if rv.requires_grad:
        rv = ad.add(rv, Tensor(rv_data - rv.data))
    else:
        rv = Tensor(rv_data)
    mu = ad.reshape(rm, bshape)
    scale = ad.rsqrt(ad.reshape(rv, bshape) + BN_EPS) * gamma
    return (h - mu) * scale + beta


def build_model(config: ModelConfig) -> tuple[Graph, ParameterBundle]:
    """Compile ``config`` into a graph and freshly initialised parameters.

    Weights use He (fan-in) normal initialisation, biases start at zero, and
    BatchNorm starts at scale 1 / shift 0 / mean 0 / var 1. Deterministic in
    ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    shape = config.input_shape
    if len(shape) not in (1, 3):
        raise GraphError(f"input shape {shape} must be (features,) or (C, H, W)", "input")
    graph = Graph(config)
    entries: list[Entry] = []
    head = [LayerSpec("flatten"), LayerSpec("dense", config.num_classes)]
    counters: dict[str, int] = {}
    for spec in list(config.layers) + head:
        if spec.kind == "flatten" and len(shape) == 1:
            continue
        counters[spec.kind] = counters.get(spec.kind, 0) + 1
        name = {"dense": "fc", "conv": "conv", "batchnorm": "bn", "relu": "relu",
                "pool": "pool", "flatten": "flatten"}[spec.kind] + str(counters[spec.kind])
        in_shape = shape
        params: list[tuple[str, tuple]] = []
        if spec.kind == "dense":
            if len(shape) != 1:
                raise GraphError(f"dense layer needs flat input, got {shape}", name)
            fan_in = shape[0]
            w = rng.standard_normal((spec.units, fan_in)) * np.sqrt(2.0 / fan_in)
            entries += [Entry(f"{name}.weight", w, spec.tag),
                        Entry(f"{name}.bias", np.zeros(spec.units), spec.tag)]
            params = [(f"{name}.weight", w.shape), (f"{name}.bias", (spec.units,))]
            shape = (spec.units,)
        elif spec.kind == "conv":
            if len(shape) != 3:
                raise GraphError(f"conv layer needs (C, H, W) input, got {shape}", name)
            c, h, w_ = shape
            k = spec.kernel
            pad = k // 2 if spec.padding == "same" else 0
            if spec.padding == "same" and k % 2 == 0:
                raise GraphError("same padding needs an odd kernel", name)
            ho, wo = h + 2 * pad - k + 1, w_ + 2 * pad - k + 1
            if ho < 1 or wo < 1:
                raise GraphError(f"kernel {k} too large for input {shape}", name)
            fan_in = c * k * k
            wt = rng.standard_normal((spec.units, c, k, k)) * np.sqrt(2.0 / fan_in)
            entries += [Entry(f"{name}.weight", wt, spec.tag),
                        Entry(f"{name}.bias", np.zeros(spec.units), spec.tag)]
            params = [(f"{name}.weight", wt.shape), (f"{name}.bias", (spec.units,))]
            shape = (spec.units, ho, wo)
        elif spec.kind == "pool":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise GraphError(f"2x2 pooling needs even spatial dims, got {shape}", name)
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "batchnorm":
            c = shape[0]
            for suffix, init in (("weight", np.ones(c)), ("bias", np.zeros(c)),
                                 ("running_mean", np.zeros(c)), ("running_var", np.ones(c))):
                entries.append(Entry(f"{name}.{suffix}", init, MASK_EXEMPT))
                params.append((f"{name}.{suffix}", (c,)))
        graph.nodes.append(Node(name, spec, in_shape, shape, tuple(params)))
    return graph, ParameterBundle(entries)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def _check_dense(params: ParameterBundle):
    for e in params:
        if np.isnan(e.value).any():
            raise GraphError("parameter contains NaN; densify masked bundles before forward", e.name)


def _check_input(graph: Graph, x: np.ndarray):
    x = np.asarray(x)
    if x.shape[1:] != graph.input_shape:
        raise GraphError(f"input shape {x.shape[1:]} != expected {graph.input_shape}", "input")
    if np.isnan(x).any():
        raise GraphError("input contains NaN", "input")


def param_tensors(params: ParameterBundle, dtype=np.float64, requires_grad: bool = False) -> dict:
    return {
        e.name: Tensor(e.value.astype(dtype, copy=True),
                       requires_grad=requires_grad and e.trainable)
        for e in params
    }


def forward(graph: Graph, params: ParameterBundle, x, train: bool = False, dtype=np.float64) -> np.ndarray:
    """Logits for a batch ``x``; BatchNorm uses running statistics unless ``train``."""
    _check_dense(params)
    _check_input(graph, x)
    with ad.no_grad():
        out = graph.apply(param_tensors(params, dtype), Tensor(np.asarray(x, dtype=dtype)), train=train)
    return out.data


def predict(graph: Graph, params: ParameterBundle, x, batch_size: int = 500, dtype=np.float32) -> np.ndarray:
    x = np.asarray(x)
    _check_dense(params)
    tensors = param_tensors(params, dtype)
    outs = []
    with ad.no_grad():
        for i in range(0, len(x), batch_size):
            xb = Tensor(x[i:i + batch_size].astype(dtype))
            outs.append(graph.apply(tensors, xb).data)
    return np.concatenate(outs) if outs else np.zeros((0, graph.num_classes), dtype=dtype)


def evaluate(graph: Graph, params: ParameterBundle, images, labels, dtype=np.float32) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) with running statistics."""
    logits = predict(graph, params, images, dtype=dtype).astype(np.float64)
    labels = np.asarray(labels)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(len(labels)), labels]))
    acc = float(np.mean(logits.argmax(axis=1) == labels))
    return acc, loss


def _labels_checked(graph: Graph, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= graph.num_classes):
        raise GraphError(f"label out of range [0, {graph.num_classes})", graph.head.name)
    return labels


def _loss_grads(graph, params, images, labels, train, dtype, batch_stats=None):
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    _check_dense(params)
    _check_input(graph, images)
    labels = _labels_checked(graph, labels)
    tensors = param_tensors(params, dtype, requires_grad=True)
    x = Tensor(images.astype(dtype, copy=False))
    logits = graph.apply(tensors, x, train=train, batch_stats=batch_stats)
    loss = ad.softmax_cross_entropy(logits, ad.one_hot(labels, graph.num_classes, dtype))
    names = [e.name for e in params if e.trainable]
    grads = ad.grad(loss, [tensors[n] for n in names])
    gmap = {n: g.data for n, g in zip(names, grads)}
    bundle = params.map(lambda e: gmap[e.name].astype(np.float64) if e.name in gmap else np.zeros_like(e.value))
    return float(loss.data), bundle


def loss_and_gradients(graph: Graph, params: ParameterBundle, images, labels,
                       train: bool = False, dtype=np.float64) -> tuple[float, ParameterBundle]:
    """Mean cross-entropy over the batch and its gradient bundle.

    Running-statistics entries get zero gradient. ``train`` selects batch
    statistics for BatchNorm instead of the stored running statistics.
    """
    return _loss_grads(graph, params, images, labels, train, dtype)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


class Adam:
    """Adam with coupled L2 weight decay (decay term added to the gradient)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, values: dict, grads: dict) -> None:
        """In-place update of ``values[name]`` for every name in ``grads``."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = values[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class SGD:
    def __init__(self, lr=0.01, weight_decay=0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, values: dict, grads: dict) -> None:
        for name, g in grads.items():
            if self.weight_decay:
                g = g + self.weight_decay * values[name]
            values[name] -= self.lr * g


def make_optimizer(spec: OptimizerSpec):
    if spec.kind == "adam":
        return Adam(spec.lr, spec.beta1, spec.beta2, spec.eps, spec.weight_decay)
    return SGD(spec.lr, spec.weight_decay)


def train_epochs(graph: Graph, params: ParameterBundle, images, labels, optimizer: OptimizerSpec,
                 epochs: int = 1, batch_size: int = 32, seed=0, dtype=np.float32) -> ParameterBundle:
    """Run ``epochs`` passes of minibatch training on one data shard.

    Gradients are computed at ``dtype``; the parameters themselves and the
    optimizer state stay float64. BatchNorm running statistics follow the
    batch statistics with momentum 0.1. ``seed`` (an int or a tuple of ints)
    drives the per-epoch shuffle.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    images = np.asarray(images)
    labels = _labels_checked(graph, labels)
    if len(images) == 0:
        raise ValueError("empty data shard")
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    _check_dense(params)
    rng = np.random.default_rng(seed)
    opt = make_optimizer(optimizer)
    values = {e.name: e.value.copy() for e in params}
    trainable = params.trainable_names()
    bn_nodes = [n.name for n in graph.nodes if n.spec.kind == "batchnorm"]
    xs = images.astype(dtype, copy=False)
    for _ in range(epochs):
        order = rng.permutation(len(xs))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            tensors = {n: Tensor(v.astype(dtype), requires_grad=n in trainable)
                       for n, v in values.items()}
            stats: dict = {}
            logits = graph.apply(tensors, Tensor(xs[idx]), train=True, batch_stats=stats)
            loss = ad.softmax_cross_entropy(logits, ad.one_hot(labels[idx], graph.num_classes, dtype))
            grads = ad.grad(loss, [tensors[n] for n in trainable])
            opt.step(values, {n: g.data.astype(np.float64) for n, g in zip(trainable, grads)})
            for bn in bn_nodes:
                mu, var = stats[bn]
                rm, rv = values[f"{bn}.running_mean"], values[f"{bn}.running_var"]
                rm *= 1.0 - BN_MOMENTUM
                rm += BN_MOMENTUM * mu
                rv *= 1.0 - BN_MOMENTUM
                rv += BN_MOMENTUM * var
    return params.replace(values)


# ---------------------------------------------------------------------------
# gradient matching (second order)
# ---------------------------------------------------------------------------

def matching_objective(graph: Graph, params: ParameterBundle, dummy_input, target_grads: ParameterBundle,
                       label: int | None = None, label_logits=None,
                       nan_policy: str = "drop") -> tuple[float, np.ndarray, np.ndarray | None]:
    """Gradient-matching loss ``sum ||dL(F(x', W), y')/dW - G||^2`` and its input gradients.

    Coordinates where ``target_grads`` is NaN are left out of the sum
    (``nan_policy="drop"``) or matched against zero (``"zero"``). The
    label is either a fixed class index or, when ``label`` is None, a soft
    label ``softmax(label_logits)`` that is differentiated as well. BatchNorm
    runs on the stored running statistics. Returns
    ``(loss, d loss/d x', d loss/d label_logits or None)``.
    """
    dummy_input = np.asarray(dummy_input, dtype=np.float64)
    if dummy_input.shape != graph.input_shape:
        raise GraphError(f"dummy input shape {dummy_input.shape} != {graph.input_shape}", "input")
    if np.isnan(dummy_input).any():
        raise GraphError("dummy input contains NaN", "input")
    if nan_policy not in ("drop", "zero"):
        raise ValueError(f"unknown nan_policy {nan_policy!r}")
    if not params.is_aligned(target_grads):
        raise GraphError("target gradients are not aligned with the parameters", "params")
    _check_dense(params)
    tensors = param_tensors(params, np.float64, requires_grad=True)
    x = Tensor(dummy_input[None].copy(), requires_grad=True)
    logits = graph.apply(tensors, x, train=False)
    lab = None
    if label is None:
        lab = Tensor(np.asarray(label_logits, dtype=np.float64).reshape(1, graph.num_classes), requires_grad=True)
        target = ad.softmax(lab, axis=1)
    else:
        target = Tensor(ad.one_hot(_labels_checked(graph, [label]), graph.num_classes))
    loss = ad.softmax_cross_entropy(logits, target)
    names = params.trainable_names()
    dummy_grads = ad.grad(loss, [tensors[n] for n in names], create_graph=True)
    total = None
    for name, g in zip(names, dummy_grads):
        G = target_grads[name]
        valid = ~np.isnan(G)
        diff = g - Tensor(np.where(valid, G, 0.0))
        if nan_policy == "drop" and not valid.all():
            diff = diff * Tensor(valid.astype(np.float64))
        term = ad.sum_(diff * diff)
        total = term if total is None else total + term
    wrt = [x] if lab is None else [x, lab]
    if not total.requires_grad:
        return float(total.data), np.zeros_like(dummy_input), (None if lab is None else np.zeros(graph.num_classes))
    grads = ad.grad(total, wrt)
    gx = grads[0].data[0]
    gl = grads[1].data[0] if lab is not None else None
    return float(total.data), gx, gl


def input_gradient_of_matching_loss(graph: Graph, params: ParameterBundle, dummy_input, label: int,
                                    target_grads: ParameterBundle) -> np.ndarray:
    """Gradient of the matching loss with respect to the dummy input."""
    return matching_objective(graph, params, dummy_input, target_grads, label=label)[1]
