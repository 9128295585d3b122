"""Edge-pooling graph convolution network with hand-written backprop.

Pipeline per forward pass:

1. every connected ordered pair (v, u) gets an edge vector
   ``e_vu = relu(We @ [lat_vu / max_lat, x_u, x_v] + be)``
2. edge pooling folds incident edges into nodes:
   ``h_v = relu(sum_u Wp @ [x_v, x_u, e_vu] + bp)``
3. stacked GCN layers, ``h' = act(A_hat @ h @ W.T + b)``, where ``A_hat`` is
   the symmetrically normalised latency affinity plus self-loops; the last
   layer emits logits.

Everything is float64 numpy so finite differences can check the gradients.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np
from scipy.linalg import block_diag

from geoplacer.cluster import ClusterGraph, FeatureConfig, FeatureMatrix, embed_features

CHECKPOINT_MAGIC = b"HULKGNN\0"
CHECKPOINT_VERSION = 1
LOG_CLAMP = 1e-12

# edge_dim 16 and two GCN layers (hidden -> hidden -> classes); hidden 410 puts
# the default model at ~188k trainable parameters for the 10-region vocabulary.
DEFAULT_EDGE_DIM = 16
DEFAULT_HIDDEN_DIM = 410


class GnnError(ValueError):
    """Dimension mismatches, bad labels and corrupt checkpoints."""


@dataclass
class EdgeEmbed:
    weight: np.ndarray  # edge_dim x (1 + 2 * node_dim)
    bias: np.ndarray


@dataclass
class EdgePool:
    weight: np.ndarray  # hidden x (2 * node_dim + edge_dim)
    bias: np.ndarray


@dataclass
class GcnLayer:
    weight: np.ndarray  # out x in
    bias: np.ndarray
    relu: bool = True


@dataclass
class GnnModel:
    features: FeatureConfig
    edge: EdgeEmbed
    pool: EdgePool
    layers: list[GcnLayer]
    seed: int = 0

    @property
    def node_dim(self) -> int:
        return (self.edge.weight.shape[1] - 1) // 2

    @property
    def edge_dim(self) -> int:
        return self.edge.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> Iterator[tuple[str, np.ndarray]]:
        """Trainable arrays in declaration (and checkpoint) order."""
        yield "edge.weight", self.edge.weight
        yield "edge.bias", self.edge.bias
        yield "pool.weight", self.pool.weight
        yield "pool.bias", self.pool.bias
        for i, layer in enumerate(self.layers):
            yield f"gcn{i}.weight", layer.weight
            yield f"gcn{i}.bias", layer.bias

    @property
    def param_count(self) -> int:
        return sum(p.size for _, p in self.params())

    def copy(self) -> GnnModel:
        return GnnModel(
            self.features,
            EdgeEmbed(self.edge.weight.copy(), self.edge.bias.copy()),
            EdgePool(self.pool.weight.copy(), self.pool.bias.copy()),
            [GcnLayer(l.weight.copy(), l.bias.copy(), l.relu) for l in self.layers],
            self.seed,
        )


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def build_model(
    features: FeatureConfig,
    num_classes: int,
    *,
    edge_dim: int = DEFAULT_EDGE_DIM,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
    gcn_hidden: tuple[int, ...] | None = None,
    seed: int = 0,
) -> GnnModel:
    """Glorot-uniform weights from ``seed``, zero biases.

    ``gcn_hidden`` lists the widths of the hidden GCN layers; the default is a
    single hidden layer of ``hidden_dim``, i.e. two GCN layers in total.
    """
    if num_classes < 1 or edge_dim < 1 or hidden_dim < 1:
        raise GnnError("dimensions must be positive")
    if gcn_hidden is None:
        gcn_hidden = (hidden_dim,)
    rng = np.random.default_rng(seed)
    d = features.dim
    edge = EdgeEmbed(_glorot(rng, edge_dim, 1 + 2 * d), np.zeros(edge_dim))
    pool = EdgePool(_glorot(rng, hidden_dim, 2 * d + edge_dim), np.zeros(hidden_dim))
    layers = []
    dims = [hidden_dim, *gcn_hidden, num_classes]
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        layers.append(GcnLayer(_glorot(rng, fan_out, fan_in), np.zeros(fan_out), relu=not last))
    return GnnModel(features, edge, pool, layers, seed)


@dataclass(frozen=True)
class GraphTensors:
    """Index structures derived once per graph (or per stack of graphs)."""

    src: np.ndarray  # v of each ordered connected pair (v, u)
    dst: np.ndarray  # u
    latency: np.ndarray  # latency of each pair / graph max latency
    incidence: np.ndarray  # n x E, 1 where the pair's source is the row node
    adjacency: np.ndarray  # binary, n x n
    norm_adj: np.ndarray  # D^-1/2 (S + I) D^-1/2, S = latency affinity

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]


def affinity(g: ClusterGraph) -> np.ndarray:
    """Connected pairs weighted by ``min_latency / latency`` (1 for the fastest link)."""
    mask = np.asarray(g.mask)
    if not mask.any():
        return np.zeros(mask.shape)
    w = np.asarray(g.weights)
    return np.where(mask, w[mask].min() / np.where(mask, w, 1.0), 0.0)


def graph_tensors(g: ClusterGraph) -> GraphTensors:
    mask = np.asarray(g.mask)
    n = mask.shape[0]
    src, dst = np.nonzero(mask)
    max_lat = g.max_latency or 1.0
    lat = np.asarray(g.weights)[src, dst] / max_lat
    inc = np.zeros((n, len(src)))
    inc[src, np.arange(len(src))] = 1.0
    s_hat = affinity(g) + np.eye(n)
    inv_sqrt = 1.0 / np.sqrt(s_hat.sum(axis=1))
    return GraphTensors(
        src, dst, lat, inc, mask.astype(float), s_hat * inv_sqrt[:, None] * inv_sqrt[None, :]
    )


def stack_tensors(parts: list[GraphTensors]) -> GraphTensors:
    """Disjoint union; each component keeps its own latency scaling."""
    offsets = np.cumsum([0] + [p.n for p in parts])
    return GraphTensors(
        np.concatenate([p.src + o for p, o in zip(parts, offsets)]),
        np.concatenate([p.dst + o for p, o in zip(parts, offsets)]),
        np.concatenate([p.latency for p in parts]),
        block_diag(*[p.incidence for p in parts]),
        block_diag(*[p.adjacency for p in parts]),
        block_diag(*[p.norm_adj for p in parts]),
    )


def _check_dims(model: GnnModel, x: np.ndarray, gt: GraphTensors) -> None:
    if x.ndim != 2 or x.shape[1] != model.node_dim:
        raise GnnError(f"feature width {x.shape[-1]} does not match model node_dim {model.node_dim}")
    if x.shape[0] != gt.n:
        raise GnnError(f"{x.shape[0]} feature rows for a {gt.n}-node graph")


def _relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def _edge_inputs(x: np.ndarray, gt: GraphTensors) -> np.ndarray:
    return np.concatenate([gt.latency[:, None], x[gt.dst], x[gt.src]], axis=1)


def embed_edges(g: ClusterGraph | GraphTensors, x: np.ndarray, edge: EdgeEmbed) -> np.ndarray:
    """Edge vectors for every connected ordered pair, one row per pair (src, dst order)."""
    gt = g if isinstance(g, GraphTensors) else graph_tensors(g)
    if edge.weight.shape[1] != 1 + 2 * x.shape[1]:
        raise GnnError("edge embedding weight does not match feature width")
    return _relu(_edge_inputs(x, gt) @ edge.weight.T + edge.bias)


def _pool_inputs(x: np.ndarray, edge_feats: np.ndarray, gt: GraphTensors) -> np.ndarray:
    # sum over u in N(v) of [x_v, x_u, e_vu], computed per node
    deg = gt.adjacency.sum(axis=1)
    return np.concatenate(
        [deg[:, None] * x, gt.adjacency @ x, gt.incidence @ edge_feats], axis=1
    )


def edge_pool_forward(
    x: np.ndarray, edge_feats: np.ndarray, pool: EdgePool, g: ClusterGraph | GraphTensors
) -> np.ndarray:
    """Node rows ``relu(sum_u Wp [x_v, x_u, e_vu] + bp)``; the bias sits outside the sum."""
    gt = g if isinstance(g, GraphTensors) else graph_tensors(g)
    if pool.weight.shape[1] != 2 * x.shape[1] + edge_feats.shape[1]:
        raise GnnError("edge pool weight does not match input width")
    return _relu(_pool_inputs(x, edge_feats, gt) @ pool.weight.T + pool.bias)


def gcn_forward(h: np.ndarray, g: ClusterGraph | GraphTensors, layers: list[GcnLayer]) -> np.ndarray:
    gt = g if isinstance(g, GraphTensors) else graph_tensors(g)
    for layer in layers:
        if layer.weight.shape[1] != h.shape[1]:
            raise GnnError("GCN layer dims do not chain")
        pre = gt.norm_adj @ h @ layer.weight.T + layer.bias
        h = _relu(pre) if layer.relu else pre
    return h


@dataclass
class _Cache:
    gt: GraphTensors
    edge_in: np.ndarray
    edge_pre: np.ndarray
    pool_in: np.ndarray
    pool_pre: np.ndarray
    gcn_agg: list[np.ndarray] = field(default_factory=list)
    gcn_pre: list[np.ndarray] = field(default_factory=list)


def _forward(model: GnnModel, gt: GraphTensors, x: np.ndarray) -> tuple[np.ndarray, _Cache]:
    _check_dims(model, x, gt)
    edge_in = _edge_inputs(x, gt)
    edge_pre = edge_in @ model.edge.weight.T + model.edge.bias
    e = _relu(edge_pre)
    pool_in = _pool_inputs(x, e, gt)
    pool_pre = pool_in @ model.pool.weight.T + model.pool.bias
    h = _relu(pool_pre)
    cache = _Cache(gt, edge_in, edge_pre, pool_in, pool_pre)
    for layer in model.layers:
        agg = gt.norm_adj @ h
        pre = agg @ layer.weight.T + layer.bias
        cache.gcn_agg.append(agg)
        cache.gcn_pre.append(pre)
        h = _relu(pre) if layer.relu else pre
    return h, cache


def logits(model: GnnModel, g: ClusterGraph | GraphTensors, x: np.ndarray) -> np.ndarray:
    gt = g if isinstance(g, GraphTensors) else graph_tensors(g)
    return _forward(model, gt, np.asarray(x, dtype=float))[0]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def predict(
    model: GnnModel, g: ClusterGraph | GraphTensors, x: np.ndarray | FeatureMatrix | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-node class distribution and argmax label (ties go to the lowest class)."""
    if x is None:
        if not isinstance(g, ClusterGraph):
            raise GnnError("features required when passing precomputed tensors")
        x = embed_features(g, model.features)
    if isinstance(x, FeatureMatrix):
        x = x.values
    probs = softmax(logits(model, g, x))
    return probs, probs.argmax(axis=1)


def _check_labels(num_classes: int, labels: np.ndarray, mask: np.ndarray) -> None:
    if not mask.any():
        raise GnnError("empty label mask")
    chosen = labels[mask]
    if chosen.min() < 0 or chosen.max() >= num_classes:
        raise GnnError(f"label outside [0, {num_classes}) for a {num_classes}-class model")


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Mean of -log p(true class) over masked nodes, log argument clamped at 1e-12."""
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    _check_labels(probs.shape[1], labels, mask)
    rows = np.flatnonzero(mask)
    picked = probs[rows, labels[rows]]
    return float(-np.log(np.maximum(picked, LOG_CLAMP)).mean())


def accuracy(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    return float((probs.argmax(axis=1)[mask] == np.asarray(labels)[mask]).mean())


def _backward(
    model: GnnModel, cache: _Cache, probs: np.ndarray, labels: np.ndarray, mask: np.ndarray
) -> dict[str, np.ndarray]:
    rows = np.flatnonzero(mask)
    dz = np.zeros_like(probs)
    dz[rows] = probs[rows]
    dz[rows, labels[rows]] -= 1.0
    # the clamp is flat below 1e-12, so those rows contribute nothing
    dz[rows[probs[rows, labels[rows]] <= LOG_CLAMP]] = 0.0
    dz /= len(rows)

    grads: dict[str, np.ndarray] = {}
    gt = cache.gt
    dh = dz
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        dpre = dh * (cache.gcn_pre[i] > 0) if layer.relu else dh
        grads[f"gcn{i}.weight"] = dpre.T @ cache.gcn_agg[i]
        grads[f"gcn{i}.bias"] = dpre.sum(axis=0)
        dh = gt.norm_adj.T @ (dpre @ layer.weight)

    dpool = dh * (cache.pool_pre > 0)
    grads["pool.weight"] = dpool.T @ cache.pool_in
    grads["pool.bias"] = dpool.sum(axis=0)
    d = model.node_dim
    # only the pooled edge block depends on trainable upstream weights
    d_edge_sum = dpool @ model.pool.weight[:, 2 * d :]
    d_edge = gt.incidence.T @ d_edge_sum
    d_edge_pre = d_edge * (cache.edge_pre > 0)
    grads["edge.weight"] = d_edge_pre.T @ cache.edge_in
    grads["edge.bias"] = d_edge_pre.sum(axis=0)
    return grads


def loss_and_grads(
    model: GnnModel,
    g: ClusterGraph | GraphTensors,
    x: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray,
) -> tuple[float, float, dict[str, np.ndarray]]:
    """Masked mean cross-entropy, labelled-node accuracy and gradients for every weight."""
    gt = g if isinstance(g, GraphTensors) else graph_tensors(g)
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    z, cache = _forward(model, gt, np.asarray(x, dtype=float))
    probs = softmax(z)
    loss = cross_entropy_loss(probs, labels, mask)
    return loss, accuracy(probs, labels, mask), _backward(model, cache, probs, labels, mask)


def backward(model, g, x, labels, mask) -> dict[str, np.ndarray]:
    return loss_and_grads(model, g, x, labels, mask)[2]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    steps: int = 50
    seed: int = 0
    optimizer: str = "adam"  # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise GnnError("learning_rate must be positive")
        if self.steps < 0:
            raise GnnError("steps must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise GnnError(f"unknown optimizer {self.optimizer!r}")


class Adam:
    """Bias-corrected Adam over a model's parameter arrays (updated in place)."""

    def __init__(self, model: GnnModel, cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in model.params()}
        self.v = {name: np.zeros_like(p) for name, p in model.params()}

    def step(self, model: GnnModel, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        lr_t = c.learning_rate * np.sqrt(1 - c.beta2**self.t) / (1 - c.beta1**self.t)
        for name, p in model.params():
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            p -= lr_t * self.m[name] / (np.sqrt(self.v[name]) + c.eps)


def sgd_step(model: GnnModel, grads: dict[str, np.ndarray], lr: float) -> None:
    for name, p in model.params():
        p -= lr * grads[name]


def train(
    model: GnnModel,
    g: ClusterGraph | GraphTensors,
    x: np.ndarray | FeatureMatrix,
    labels: np.ndarray,
    mask: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
) -> tuple[GnnModel, list[tuple[float, float]]]:
    """Full-batch training. Returns the updated copy and a per-step
    (loss, accuracy) trace measured before each update."""
    gt = g if isinstance(g, GraphTensors) else graph_tensors(g)
    if isinstance(x, FeatureMatrix):
        x = x.values
    model = model.copy()
    opt = Adam(model, cfg) if cfg.optimizer == "adam" else None
    trace = []
    for _ in range(cfg.steps):
        loss, acc, grads = loss_and_grads(model, gt, x, labels, mask)
        trace.append((loss, acc))
        if opt is None:
            sgd_step(model, grads, cfg.learning_rate)
        else:
            opt.step(model, grads)
    return model, trace


def evaluate(model, g, x, labels, mask) -> tuple[float, float]:
    if isinstance(x, FeatureMatrix):
        x = x.values
    probs, _ = predict(model, g, x)
    return cross_entropy_loss(probs, labels, mask), accuracy(probs, labels, mask)


# -- checkpoints -------------------------------------------------------------
#
# magic | u32 version | u32 node_dim, edge_dim, pool_dim, n_gcn | u32 out_dim * n_gcn
# | u64 seed | u32 len + utf-8 JSON feature config | f64 weights (declaration order)


def save_model(model: GnnModel) -> bytes:
    dims = [model.node_dim, model.edge_dim, model.pool.weight.shape[0], len(model.layers)]
    dims += [l.weight.shape[0] for l in model.layers]
    head = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    head += struct.pack(f"<{len(dims)}I", *dims)
    head += struct.pack("<Q", model.seed)
    feat = json.dumps(model.features.to_dict(), sort_keys=True).encode("utf-8")
    head += struct.pack("<I", len(feat)) + feat
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for _, p in model.params())
    return head + body


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise GnnError("truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(data: bytes) -> GnnModel:
    r = _Reader(data)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise GnnError("not a model checkpoint")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise GnnError(f"unsupported checkpoint version {version}")
    node_dim, edge_dim, pool_dim, n_gcn = r.unpack("<4I")
    outs = r.unpack(f"<{n_gcn}I")
    (seed,) = r.unpack("<Q")
    (flen,) = r.unpack("<I")
    try:
        features = FeatureConfig.from_dict(json.loads(r.take(flen).decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise GnnError(f"corrupt feature config: {exc}") from exc
    if features.dim != node_dim or n_gcn == 0:
        raise GnnError("corrupt checkpoint dimensions")

    def arr(*shape: int) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(r.take(8 * count), dtype="<f8").astype(float).reshape(shape)

    edge = EdgeEmbed(arr(edge_dim, 1 + 2 * node_dim), arr(edge_dim))
    pool = EdgePool(arr(pool_dim, 2 * node_dim + edge_dim), arr(pool_dim))
    layers = []
    fan_in = pool_dim
    for i, out in enumerate(outs):
        layers.append(GcnLayer(arr(out, fan_in), arr(out), relu=i < n_gcn - 1))
        fan_in = out
    if r.pos != len(data):
        raise GnnError("trailing bytes in checkpoint")
    return GnnModel(features, edge, pool, layers, seed)


def with_features(model: GnnModel, features: FeatureConfig) -> GnnModel:
    if features.dim != model.node_dim:
        raise GnnError("feature config width does not match model")
    return replace(model, features=features)
