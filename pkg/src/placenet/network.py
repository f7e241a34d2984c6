"""Place-type-parameterized message passing with an analytic backward pass.

One layer maps node embeddings h to

    out[s] = LeakyReLU( W[p] @ sum_{u in nbr(s)} alpha[cat(s), cat(u)] * h[u]
                        + B[p] @ h[s] )

where W and B are maps keyed by place-type p (the "map weights" that let the
same architecture specialize per spatial domain) and alpha is a learned
category-pair association shared across place-types within a layer. The model
stacks layers over a fixed KNN graph, max-pools node embeddings, and applies a
linear classifier. Gradients for W, B, alpha, classifier, and the input
embedding are accumulated in closed form (reverse mode), so training needs no
autodiff framework and every entry is checkable against finite differences.

All math is float64. Parameters are treated as immutable; ``sgd_step`` returns
a new parameter tree and leaves untouched tensors aliased, which makes freeze
contracts (bit-identical tensors) trivial to audit.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from placenet.data import MultiCategoryPointSet
from placenet.errors import NumericalError
from placenet.graph import KnnGraph

# Sentinel place-type key for models trained without place-type distinction.
ALL_PLACE_TYPES = -1


@dataclass(frozen=True)
class LayerParams:
    """One layer's parameters: per-place-type W/B maps plus shared alpha."""

    W: dict[int, np.ndarray]
    B: dict[int, np.ndarray]
    alpha: np.ndarray
    leaky_slope: float = 0.01

    def __post_init__(self) -> None:
        if set(self.W) != set(self.B):
            raise ValueError("W and B must have identical place-type key sets")
        for key, w in self.W.items():
            if w.shape != self.B[key].shape:
                raise ValueError(f"W/B shape mismatch for place-type {key}")

    @property
    def out_dim(self) -> int:
        return next(iter(self.W.values())).shape[0]

    @property
    def in_dim(self) -> int:
        return next(iter(self.W.values())).shape[1]


@dataclass(frozen=True)
class ModelParams:
    """Full model: input embedding, message-passing layers, linear classifier."""

    embedding: np.ndarray
    layers: tuple[LayerParams, ...]
    classifier_w: np.ndarray
    classifier_b: np.ndarray
    num_categories: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        dim = self.embedding.shape[0]
        for i, layer in enumerate(self.layers):
            if layer.in_dim != dim:
                raise ValueError(f"layer {i} input dim {layer.in_dim} != {dim}")
            dim = layer.out_dim
        if self.classifier_w.shape[1] != dim:
            raise ValueError(
                f"classifier input dim {self.classifier_w.shape[1]} != {dim}"
            )
        if self.classifier_b.shape != (self.classifier_w.shape[0],):
            raise ValueError("classifier bias shape mismatch")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_classes(self) -> int:
        return self.classifier_b.shape[0]

    @property
    def place_type_keys(self) -> tuple[int, ...]:
        return tuple(sorted(self.layers[0].W)) if self.layers else ()

    def forward_key(self, place_type: int) -> int:
        """Resolve the W/B map key used for a sample of the given place-type."""
        if not self.layers:
            return place_type
        if place_type in self.layers[0].W:
            return place_type
        if ALL_PLACE_TYPES in self.layers[0].W:
            return ALL_PLACE_TYPES
        raise KeyError(
            f"no weights for place-type {place_type} (keys: {self.place_type_keys})"
        )


@dataclass(frozen=True)
class ForwardTrace:
    """Everything the backward pass (and explanations) need from one forward."""

    features: np.ndarray          # (n, F) raw node features
    h: tuple[np.ndarray, ...]     # h[0]..h[N], per-layer node embeddings
    pre: tuple[np.ndarray, ...]   # pre-activations per layer
    msg: tuple[np.ndarray, ...]   # neighbor-message sums per layer
    pooled: np.ndarray            # (d,) coordinate-wise max of h[N]
    winners: np.ndarray           # (d,) node index winning each pooled coord
    logits: np.ndarray            # (K,)
    probs: np.ndarray             # (K,) softmax of logits


@dataclass(frozen=True)
class LayerGrads:
    dW: dict[int, np.ndarray]
    dB: dict[int, np.ndarray]
    d_alpha: np.ndarray | None


@dataclass(frozen=True)
class Gradients:
    """Same shape-tree as ModelParams; absent entries mean 'no update'."""

    embedding: np.ndarray | None
    layers: tuple[LayerGrads, ...]
    classifier_w: np.ndarray | None
    classifier_b: np.ndarray | None


def init_model(
    rng: np.random.Generator,
    num_categories: int,
    num_classes: int,
    num_layers: int,
    hidden_dim: int,
    place_type_keys: tuple[int, ...],
    leaky_slope: float = 0.01,
) -> ModelParams:
    """Seeded initialization: uniform +-sqrt(1/fan_in) matrices, alpha all-ones.

    The draw order is fixed (embedding, then per layer W/B per sorted key) so
    identical seeds give identical models regardless of key labels.
    """
    input_dim = num_categories + 2

    def uniform(shape):
        bound = float(np.sqrt(1.0 / shape[1]))
        return rng.uniform(-bound, bound, size=shape)

    embedding = uniform((hidden_dim, input_dim))
    layers = []
    for _ in range(num_layers):
        W, B = {}, {}
        for key in sorted(place_type_keys):
            W[key] = uniform((hidden_dim, hidden_dim))
            B[key] = uniform((hidden_dim, hidden_dim))
        alpha = np.ones((num_categories, num_categories), dtype=np.float64)
        layers.append(LayerParams(W, B, alpha, leaky_slope))
    classifier_w = uniform((num_classes, hidden_dim))
    classifier_b = np.zeros(num_classes, dtype=np.float64)
    return ModelParams(embedding, tuple(layers), classifier_w, classifier_b, num_categories)


def node_input_features(sample: MultiCategoryPointSet, num_categories: int) -> np.ndarray:
    """Raw node features: one-hot category plus box-normalized coordinates.

    Coordinates are divided by the bounding-rectangle width/height so entries
    lie in [0, 1]; a degenerate (zero-extent) axis normalizes to 0.
    """
    n = sample.num_points
    feats = np.zeros((n, num_categories + 2), dtype=np.float64)
    feats[np.arange(n), sample.categories] = 1.0
    extent = sample.locations.max(axis=0)  # min corner is the origin
    scale = np.where(extent > 0, extent, 1.0)
    feats[:, num_categories:] = sample.locations / scale
    return feats


def _leaky(pre: np.ndarray, slope: float) -> np.ndarray:
    return np.where(pre > 0, pre, slope * pre)


def _leaky_grad(pre: np.ndarray, slope: float) -> np.ndarray:
    return np.where(pre > 0, 1.0, slope)


def _layer_forward(
    h_in: np.ndarray,
    graph: KnnGraph,
    categories: np.ndarray,
    params: LayerParams,
    place_type: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if place_type not in params.W:
        raise KeyError(
            f"unknown place-type key {place_type} (have {sorted(params.W)})"
        )
    if h_in.shape != (graph.num_nodes, params.in_dim):
        raise ValueError(
            f"h_in shape {h_in.shape} incompatible with "
            f"(num_nodes={graph.num_nodes}, in_dim={params.in_dim})"
        )
    W = params.W[place_type]
    B = params.B[place_type]
    msg = np.zeros_like(h_in)
    src, dst = graph.edge_src, graph.edge_dst
    if src.size:
        coeff = params.alpha[categories[src], categories[dst]]
        np.add.at(msg, src, coeff[:, None] * h_in[dst])
    pre = msg @ W.T + h_in @ B.T
    return _leaky(pre, params.leaky_slope), pre, msg


def layer_forward(
    h_in: np.ndarray,
    graph: KnnGraph,
    categories: np.ndarray,
    params: LayerParams,
    place_type: int,
) -> np.ndarray:
    """Apply one message-passing layer; returns the (n, out_dim) activations."""
    out, _, _ = _layer_forward(h_in, graph, categories, params, place_type)
    return out


def model_forward(
    sample: MultiCategoryPointSet,
    graph: KnnGraph,
    params: ModelParams,
    place_type: int,
) -> ForwardTrace:
    """Full forward pass: embedding, layers, max-pool, classifier, softmax.

    Max-pool ties go to the lowest node index. Because samples store points in
    canonical order, the output is exactly invariant to the order points were
    originally supplied in.
    """
    feats = node_input_features(sample, params.num_categories)
    h = [feats @ params.embedding.T]
    pres, msgs = [], []
    for layer in params.layers:
        out, pre, msg = _layer_forward(h[-1], graph, sample.categories, layer, place_type)
        h.append(out)
        pres.append(pre)
        msgs.append(msg)
    winners = np.argmax(h[-1], axis=0)  # first occurrence = lowest index
    pooled = h[-1][winners, np.arange(h[-1].shape[1])]
    logits = params.classifier_w @ pooled + params.classifier_b
    shifted = logits - logits.max()
    expl = np.exp(shifted)
    probs = expl / expl.sum()
    return ForwardTrace(
        feats, tuple(h), tuple(pres), tuple(msgs), pooled, winners, logits, probs
    )


def cross_entropy(trace: ForwardTrace, label: int) -> float:
    """Stable -log p(label) computed from the logits."""
    shifted = trace.logits - trace.logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


def loss_and_gradients(
    sample: MultiCategoryPointSet,
    graph: KnnGraph,
    params: ModelParams,
    place_type: int,
    label: int,
    with_trace: bool = False,
):
    """Cross-entropy loss and exact reverse-mode gradients for one sample.

    Per layer, with dpre the loss gradient at the pre-activation:
    dW accumulates dpre outer the neighbor-message sum, dB accumulates dpre
    outer the node's own input, and d_alpha[c, c'] accumulates, over every
    edge (s, u) with those categories, the dot of the W-projected dpre[s]
    with h[u]. Gradients for a category pair shared by many edges sum.

    Returns (loss, gradients), or (loss, gradients, trace) with ``with_trace``.
    """
    trace = model_forward(sample, graph, params, place_type)
    loss = cross_entropy(trace, label)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss on sample {sample.sample_id!r}")

    dlogits = trace.probs.copy()
    dlogits[label] -= 1.0
    d_classifier_w = np.outer(dlogits, trace.pooled)
    d_classifier_b = dlogits.copy()
    dpooled = params.classifier_w.T @ dlogits

    dh = np.zeros_like(trace.h[-1])
    dh[trace.winners, np.arange(dh.shape[1])] = dpooled

    categories = sample.categories
    src, dst = graph.edge_src, graph.edge_dst
    layer_grads: list[LayerGrads] = []
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        key = place_type
        W = layer.W[key]
        B = layer.B[key]
        h_in = trace.h[i]
        dpre = dh * _leaky_grad(trace.pre[i], layer.leaky_slope)
        dW = dpre.T @ trace.msg[i]
        dB = dpre.T @ h_in
        dmsg = dpre @ W
        dh_prev = dpre @ B
        d_alpha = np.zeros_like(layer.alpha)
        if src.size:
            coeff = layer.alpha[categories[src], categories[dst]]
            np.add.at(dh_prev, dst, coeff[:, None] * dmsg[src])
            contrib = np.einsum("ej,ej->e", dmsg[src], h_in[dst])
            np.add.at(d_alpha, (categories[src], categories[dst]), contrib)
        layer_grads.append(LayerGrads({key: dW}, {key: dB}, d_alpha))
        dh = dh_prev

    d_embedding = dh.T @ trace.features
    grads = Gradients(
        d_embedding, tuple(reversed(layer_grads)), d_classifier_w, d_classifier_b
    )
    if with_trace:
        return loss, grads, trace
    return loss, grads


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    """One SGD update: p' = p - lr * g, exactly.

    Only tensors with a gradient present are replaced; everything else is the
    same array object, so frozen parameters stay bit-identical by construction.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if len(grads.layers) != len(params.layers):
        raise ValueError("gradient/parameter layer count mismatch")

    new_layers = []
    for layer, lg in zip(params.layers, grads.layers):
        W = dict(layer.W)
        B = dict(layer.B)
        for key, g in lg.dW.items():
            if W[key].shape != g.shape:
                raise ValueError(f"dW shape mismatch for key {key}")
            W[key] = W[key] - lr * g
        for key, g in lg.dB.items():
            if B[key].shape != g.shape:
                raise ValueError(f"dB shape mismatch for key {key}")
            B[key] = B[key] - lr * g
        alpha = layer.alpha if lg.d_alpha is None else layer.alpha - lr * lg.d_alpha
        new_layers.append(LayerParams(W, B, alpha, layer.leaky_slope))

    embedding = (
        params.embedding
        if grads.embedding is None
        else params.embedding - lr * grads.embedding
    )
    classifier_w = (
        params.classifier_w
        if grads.classifier_w is None
        else params.classifier_w - lr * grads.classifier_w
    )
    classifier_b = (
        params.classifier_b
        if grads.classifier_b is None
        else params.classifier_b - lr * grads.classifier_b
    )
    return ModelParams(
        embedding, tuple(new_layers), classifier_w, classifier_b, params.num_categories
    )


def pooled_layer_rep(trace: ForwardTrace, layer_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate-wise max over nodes of h[layer_index], with winner indices."""
    h = trace.h[layer_index]
    winners = np.argmax(h, axis=0)
    return h[winners, np.arange(h.shape[1])], winners


def embedding_grad_for_rep(
    trace: ForwardTrace, winners: np.ndarray, drep: np.ndarray
) -> np.ndarray:
    """Gradient of a function of the pooled layer-0 rep w.r.t. the embedding."""
    return drep[:, None] * trace.features[winners]


def rekey_model(params: ModelParams, old_key: int, new_key: int) -> ModelParams:
    """Relabel one place-type key in every layer's W/B maps (tensors aliased)."""
    new_layers = []
    for layer in params.layers:
        W = {(new_key if k == old_key else k): v for k, v in layer.W.items()}
        B = {(new_key if k == old_key else k): v for k, v in layer.B.items()}
        new_layers.append(LayerParams(W, B, layer.alpha, layer.leaky_slope))
    return ModelParams(
        params.embedding,
        tuple(new_layers),
        params.classifier_w,
        params.classifier_b,
        params.num_categories,
    )


def save_model(params: ModelParams, path: str, meta: dict | None = None) -> None:
    """Serialize to an .npz container; float64 tensors round-trip bit-exactly."""
    arrays = {
        "embedding": params.embedding,
        "classifier_w": params.classifier_w,
        "classifier_b": params.classifier_b,
    }
    for i, layer in enumerate(params.layers):
        arrays[f"layer{i}_alpha"] = layer.alpha
        for key in sorted(layer.W):
            arrays[f"layer{i}_W_{key}"] = layer.W[key]
            arrays[f"layer{i}_B_{key}"] = layer.B[key]
    header = {
        "num_layers": params.num_layers,
        "num_categories": params.num_categories,
        "place_type_keys": [int(k) for k in params.place_type_keys],
        "leaky_slopes": [layer.leaky_slope for layer in params.layers],
        "meta": meta or {},
    }
    arrays["header"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path: str) -> tuple[ModelParams, dict]:
    """Inverse of save_model; returns (params, meta)."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode("utf-8"))
        layers = []
        for i in range(header["num_layers"]):
            W = {
                key: data[f"layer{i}_W_{key}"] for key in header["place_type_keys"]
            }
            B = {
                key: data[f"layer{i}_B_{key}"] for key in header["place_type_keys"]
            }
            layers.append(
                LayerParams(W, B, data[f"layer{i}_alpha"], header["leaky_slopes"][i])
            )
        params = ModelParams(
            data["embedding"],
            tuple(layers),
            data["classifier_w"],
            data["classifier_b"],
            header["num_categories"],
        )
    return params, header["meta"]
