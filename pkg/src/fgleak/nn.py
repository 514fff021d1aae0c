"""GNN stacks (GCN / GAT / GraphSAGE) with an MLP head, trained by plain SGD.

Everything is float64 numpy with explicit forward caches and hand-written
backward passes, so gradients can be verified against finite differences.

The model is: ``gnn_layers`` graph layers (ReLU between them, identity after
the last), a hidden fully-connected layer with bias and ReLU, and a final
fully-connected layer with no bias. The input to that final layer is exposed
on the forward trace as ``fc_input`` together with its per-sample sums, which
is the quantity the inference attack consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ModelError, NumericError, TrainingError
from .graphs import Graph, normalize_adjacency

ARCHS = ("gcn", "gat", "graphsage")

LEAKY_SLOPE = 0.2  # attention logit activation slope


@dataclass
class ModelConfig:
    """Shape of a GNN-plus-head classifier."""

    arch: str = "gcn"
    gnn_layers: int = 2
    hidden_dim: int = 64
    in_dim: int = 32
    out_dim: int = 5
    final_bias: bool = False   # sensitivity knob; the default head has no output bias

    def __post_init__(self) -> None:
        self.arch = self.arch.lower()
        if self.arch == "sage":
            self.arch = "graphsage"
        if self.arch not in ARCHS:
            raise ModelError(f"unknown architecture {self.arch!r}")
        if self.gnn_layers < 1:
            raise ModelError("need at least one GNN layer")
        if self.out_dim < 2:
            raise ModelError("out_dim must be >= 2")
        if self.hidden_dim < 1 or self.in_dim < 1:
            raise ModelError("hidden_dim and in_dim must be positive")


@dataclass
class ModelParams:
    """Named-tensor container for all trainable parameters."""

    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float((v ** 2).sum()) for v in self.tensors.values())))

    def scale(self, factor: float) -> "ModelParams":
        return ModelParams({k: v * factor for k, v in self.tensors.items()})

    def subtract(self, other: "ModelParams") -> "ModelParams":
        return ModelParams({k: v - other.tensors[k] for k, v in self.tensors.items()})

    def allfinite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()))


@dataclass
class ForwardTrace:
    """Observable outputs of one forward pass.

    ``fc_input`` is the (K, M) matrix entering the final fully-connected
    layer; ``fc_input_sums`` holds each row's sum over the M input units and
    ``sum_mean`` their mean.
    """

    logits: np.ndarray
    probs: np.ndarray
    fc_input: np.ndarray
    fc_input_sums: np.ndarray
    sum_mean: float


def weighted_sum(params_list: list[ModelParams], weights: list[float]) -> ModelParams:
    out = {k: np.zeros_like(v) for k, v in params_list[0].tensors.items()}
    for p, w in zip(params_list, weights):
        for k in out:
            out[k] += w * p.tensors[k]
    return ModelParams(out)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


def _bias(rng: np.random.Generator, fan_in: int, size: int, scale: float = 1.0) -> np.ndarray:
    s = scale / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=size)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Seeded Glorot-uniform weights, U(+-1/sqrt(fan_in)) biases."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    dim_in = cfg.in_dim
    for layer in range(cfg.gnn_layers):
        dim_out = cfg.hidden_dim
        prefix = f"gnn{layer}"
        if cfg.arch == "graphsage":
            tensors[f"{prefix}.self_weight"] = _glorot(rng, dim_in, dim_out)
            tensors[f"{prefix}.neigh_weight"] = _glorot(rng, dim_in, dim_out)
        else:
            tensors[f"{prefix}.weight"] = _glorot(rng, dim_in, dim_out)
            if cfg.arch == "gat":
                s = np.sqrt(6.0 / (2 * dim_out + 1))
                tensors[f"{prefix}.att"] = rng.uniform(-s, s, size=2 * dim_out)
        tensors[f"{prefix}.bias"] = _bias(rng, dim_in, dim_out)
        dim_in = dim_out
    tensors["fc_hidden.weight"] = _glorot(rng, dim_in, cfg.hidden_dim)
    # a norm-clipped model's embeddings collapse onto this bias; its scale
    # sets the clip threshold at which that happens
    tensors["fc_hidden.bias"] = _bias(rng, dim_in, cfg.hidden_dim, scale=0.3)
    tensors["fc_out.weight"] = _glorot(rng, cfg.hidden_dim, cfg.out_dim)
    if cfg.final_bias:
        tensors["fc_out.bias"] = np.zeros(cfg.out_dim)
    return ModelParams(tensors)


@dataclass
class GraphContext:
    """Precomputed aggregation structure for one (graph, arch) pair."""

    adj: sp.csr_matrix | None            # gcn / graphsage operator
    gat_ctr: np.ndarray | None = None    # attending node per support entry
    gat_nbr: np.ndarray | None = None    # attended node per support entry


def build_context(g: Graph, cfg: ModelConfig) -> GraphContext:
    if cfg.arch == "gat":
        support = normalize_adjacency(g, "gat").tocoo()
        order = np.lexsort((support.col, support.row))
        return GraphContext(adj=None,
                            gat_ctr=support.row[order].astype(np.int64),
                            gat_nbr=support.col[order].astype(np.int64))
    return GraphContext(adj=normalize_adjacency(g, cfg.arch))


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _segment_sum(values: np.ndarray, segments: np.ndarray, n: int) -> np.ndarray:
    """Sum ``values`` (1-D or 2-D) into ``n`` groups; bincount beats ufunc.at."""
    if values.ndim == 1:
        return np.bincount(segments, weights=values, minlength=n)
    out = np.empty((n, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(segments, weights=values[:, j], minlength=n)
    return out


def _segment_softmax(scores: np.ndarray, segments: np.ndarray, n: int) -> np.ndarray:
    """Softmax of ``scores`` within groups given by ``segments`` (values 0..n-1)."""
    seg_max = np.full(n, -np.inf)
    np.maximum.at(seg_max, segments, scores)
    shifted = np.exp(scores - seg_max[segments])
    denom = _segment_sum(shifted, segments, n)
    return shifted / denom[segments]


class _Cache:
    """Per-layer intermediates retained for the backward pass."""

    def __init__(self) -> None:
        self.layer_inputs: list[np.ndarray] = []
        self.pre_acts: list[np.ndarray] = []
        self.gat: list[dict[str, np.ndarray]] = []
        self.gnn_out: np.ndarray | None = None
        self.fc_hidden_pre: np.ndarray | None = None
        self.fc_input: np.ndarray | None = None
        self.logits: np.ndarray | None = None
        self.probs: np.ndarray | None = None
        # link-prediction extras
        self.pair_idx: np.ndarray | None = None
        self.node_embed: np.ndarray | None = None


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {where}")


def _gnn_layer_forward(params: ModelParams, cfg: ModelConfig, layer: int,
                       h: np.ndarray, ctx: GraphContext, cache: _Cache) -> np.ndarray:
    prefix = f"gnn{layer}"
    bias = params.tensors[f"{prefix}.bias"]
    if cfg.arch == "gcn":
        z = ctx.adj @ (h @ params.tensors[f"{prefix}.weight"]) + bias
    elif cfg.arch == "graphsage":
        z = (h @ params.tensors[f"{prefix}.self_weight"]
             + (ctx.adj @ h) @ params.tensors[f"{prefix}.neigh_weight"] + bias)
    else:  # gat
        weight = params.tensors[f"{prefix}.weight"]
        att = params.tensors[f"{prefix}.att"]
        dim = weight.shape[1]
        transformed = h @ weight
        src_score = transformed @ att[:dim]
        dst_score = transformed @ att[dim:]
        ctr, nbr = ctx.gat_ctr, ctx.gat_nbr
        pre = src_score[ctr] + dst_score[nbr]
        act = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
        alpha = _segment_softmax(act, ctr, h.shape[0])
        z = _segment_sum(alpha[:, None] * transformed[nbr], ctr, h.shape[0])
        z = z + bias
        cache.gat.append({"transformed": transformed, "pre": pre, "alpha": alpha})
    _check_finite(z, f"gnn layer {layer}")
    return z


def _gnn_layer_backward(params: ModelParams, cfg: ModelConfig, layer: int,
                        dz: np.ndarray, ctx: GraphContext, cache: _Cache,
                        grads: dict[str, np.ndarray]) -> np.ndarray:
    prefix = f"gnn{layer}"
    h = cache.layer_inputs[layer]
    grads[f"{prefix}.bias"] = dz.sum(axis=0)
    if cfg.arch == "gcn":
        agg = ctx.adj @ h
        grads[f"{prefix}.weight"] = agg.T @ dz
        return ctx.adj.T @ (dz @ params.tensors[f"{prefix}.weight"].T)
    if cfg.arch == "graphsage":
        agg = ctx.adj @ h
        grads[f"{prefix}.self_weight"] = h.T @ dz
        grads[f"{prefix}.neigh_weight"] = agg.T @ dz
        return (dz @ params.tensors[f"{prefix}.self_weight"].T
                + ctx.adj.T @ (dz @ params.tensors[f"{prefix}.neigh_weight"].T))
    # gat
    weight = params.tensors[f"{prefix}.weight"]
    att = params.tensors[f"{prefix}.att"]
    dim = weight.shape[1]
    saved = cache.gat[layer]
    transformed, pre, alpha = saved["transformed"], saved["pre"], saved["alpha"]
    ctr, nbr = ctx.gat_ctr, ctx.gat_nbr
    n = h.shape[0]

    dalpha = np.einsum("ef,ef->e", dz[ctr], transformed[nbr])
    inner = _segment_sum(alpha * dalpha, ctr, n)
    dact = alpha * (dalpha - inner[ctr])
    dpre = dact * np.where(pre > 0, 1.0, LEAKY_SLOPE)

    dsrc = _segment_sum(dpre, ctr, n)
    ddst = _segment_sum(dpre, nbr, n)

    dtransformed = _segment_sum(alpha[:, None] * dz[ctr], nbr, n)
    dtransformed += dsrc[:, None] * att[:dim][None, :]
    dtransformed += ddst[:, None] * att[dim:][None, :]

    datt = np.concatenate([transformed.T @ dsrc, transformed.T @ ddst])
    grads[f"{prefix}.att"] = datt
    grads[f"{prefix}.weight"] = h.T @ dtransformed
    return dtransformed @ weight.T


def _gnn_stack_forward(params: ModelParams, cfg: ModelConfig, g: Graph,
                       ctx: GraphContext, cache: _Cache) -> np.ndarray:
    h = g.features
    for layer in range(cfg.gnn_layers):
        cache.layer_inputs.append(h)
        z = _gnn_layer_forward(params, cfg, layer, h, ctx, cache)
        cache.pre_acts.append(z)
        h = np.maximum(z, 0.0) if layer < cfg.gnn_layers - 1 else z
    cache.gnn_out = h
    return h


def _gnn_stack_backward(params: ModelParams, cfg: ModelConfig, d_out: np.ndarray,
                        ctx: GraphContext, cache: _Cache,
                        grads: dict[str, np.ndarray]) -> None:
    dh = d_out
    for layer in reversed(range(cfg.gnn_layers)):
        if layer < cfg.gnn_layers - 1:
            dz = dh * (cache.pre_acts[layer] > 0)
        else:
            dz = dh
        dh = _gnn_layer_backward(params, cfg, layer, dz, ctx, cache, grads)


def _head_forward(params: ModelParams, head_in: np.ndarray, cache: _Cache) -> None:
    pre = head_in @ params.tensors["fc_hidden.weight"] + params.tensors["fc_hidden.bias"]
    fc_input = np.maximum(pre, 0.0)
    logits = fc_input @ params.tensors["fc_out.weight"]
    if "fc_out.bias" in params.tensors:
        logits = logits + params.tensors["fc_out.bias"]
    _check_finite(logits, "fc head")
    cache.fc_hidden_pre = pre
    cache.fc_input = fc_input
    cache.logits = logits
    cache.probs = _softmax(logits)


def _head_backward(params: ModelParams, head_in: np.ndarray, dlogits: np.ndarray,
                   cache: _Cache, grads: dict[str, np.ndarray]) -> np.ndarray:
    grads["fc_out.weight"] = cache.fc_input.T @ dlogits
    if "fc_out.bias" in params.tensors:
        grads["fc_out.bias"] = dlogits.sum(axis=0)
    dfc_input = dlogits @ params.tensors["fc_out.weight"].T
    dpre = dfc_input * (cache.fc_hidden_pre > 0)
    grads["fc_hidden.weight"] = head_in.T @ dpre
    grads["fc_hidden.bias"] = dpre.sum(axis=0)
    return dpre @ params.tensors["fc_hidden.weight"].T


def _trace_from_cache(cache: _Cache) -> ForwardTrace:
    sums = cache.fc_input.sum(axis=1)
    return ForwardTrace(
        logits=cache.logits,
        probs=cache.probs,
        fc_input=cache.fc_input,
        fc_input_sums=sums,
        sum_mean=float(sums.mean()),
    )


def _node_forward(params: ModelParams, cfg: ModelConfig, g: Graph,
                  ctx: GraphContext | None) -> tuple[_Cache, GraphContext]:
    if g.feature_dim != cfg.in_dim:
        raise ModelError(f"graph feature dim {g.feature_dim} != model in_dim {cfg.in_dim}")
    if ctx is None:
        ctx = build_context(g, cfg)
    cache = _Cache()
    h = _gnn_stack_forward(params, cfg, g, ctx, cache)
    _head_forward(params, h, cache)
    return cache, ctx


def forward_pass(params: ModelParams, cfg: ModelConfig, g: Graph,
                 ctx: GraphContext | None = None) -> ForwardTrace:
    """Full forward pass over every node of ``g``."""
    cache, _ = _node_forward(params, cfg, g, ctx)
    return _trace_from_cache(cache)


def _cross_entropy(probs: np.ndarray, logits: np.ndarray, targets: np.ndarray) -> float:
    # computed from logits via log-sum-exp for accuracy near one-hot probs
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(targets)), targets].mean())


def compute_loss_and_gradients(
    params: ModelParams, cfg: ModelConfig, g: Graph, mask: np.ndarray,
    ctx: GraphContext | None = None,
) -> tuple[float, ModelParams]:
    """Mean cross-entropy over masked nodes and gradients for every tensor."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise TrainingError("mask selects no nodes")
    cache, ctx = _node_forward(params, cfg, g, ctx)
    idx = np.flatnonzero(mask)
    loss = _cross_entropy(cache.probs[idx], cache.logits[idx], g.labels[idx])

    dlogits = np.zeros_like(cache.logits)
    dlogits[idx] = cache.probs[idx]
    dlogits[idx, g.labels[idx]] -= 1.0
    dlogits /= count

    grads: dict[str, np.ndarray] = {}
    d_head_in = _head_backward(params, cache.gnn_out, dlogits, cache, grads)
    _gnn_stack_backward(params, cfg, d_head_in, ctx, cache, grads)
    return loss, ModelParams({k: grads[k] for k in params.tensors})


def apply_sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    """Plain SGD: w <- w - lr * g."""
    return ModelParams({k: v - lr * grads.tensors[k] for k, v in params.tensors.items()})


def predict(params: ModelParams, cfg: ModelConfig, g: Graph,
            ctx: GraphContext | None = None) -> np.ndarray:
    return forward_pass(params, cfg, g, ctx).probs.argmax(axis=1)


def accuracy(params: ModelParams, cfg: ModelConfig, g: Graph, mask: np.ndarray,
             ctx: GraphContext | None = None) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise TrainingError("mask selects no nodes")
    pred = predict(params, cfg, g, ctx)
    return float((pred[mask] == g.labels[mask]).mean())


def _pairs_array(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ModelError("pairs must be (u, v, label) triples")
    return arr


def _link_forward(params: ModelParams, cfg: ModelConfig, g: Graph, pairs,
                  ctx: GraphContext | None) -> tuple[_Cache, GraphContext, np.ndarray]:
    if cfg.out_dim != 2:
        raise ModelError("link prediction requires out_dim == 2")
    arr = _pairs_array(pairs)
    if len(arr) and (arr[:, :2].min() < 0 or arr[:, :2].max() >= g.n):
        raise ModelError("pair endpoint outside graph")
    if ctx is None:
        ctx = build_context(g, cfg)
    cache = _Cache()
    h = _gnn_stack_forward(params, cfg, g, ctx, cache)
    cache.node_embed = h
    cache.pair_idx = arr
    head_in = h[arr[:, 0]] * h[arr[:, 1]]     # per-pair Hadamard product
    _head_forward(params, head_in, cache)
    return cache, ctx, arr


def link_pair_forward(params: ModelParams, cfg: ModelConfig, g: Graph, pairs,
                      ctx: GraphContext | None = None) -> ForwardTrace:
    """Forward pass for (u, v, label) pairs; trace rows are indexed by pairs."""
    cache, _, _ = _link_forward(params, cfg, g, pairs, ctx)
    return _trace_from_cache(cache)


def link_loss_and_gradients(
    params: ModelParams, cfg: ModelConfig, g: Graph, pairs,
    ctx: GraphContext | None = None,
) -> tuple[float, ModelParams]:
    """Mean cross-entropy over pair labels and gradients for every tensor."""
    cache, ctx, arr = _link_forward(params, cfg, g, pairs, ctx)
    if len(arr) == 0:
        raise TrainingError("no pairs supplied")
    targets = arr[:, 2]
    loss = _cross_entropy(cache.probs, cache.logits, targets)

    dlogits = cache.probs.copy()
    dlogits[np.arange(len(arr)), targets] -= 1.0
    dlogits /= len(arr)

    grads: dict[str, np.ndarray] = {}
    head_in = cache.node_embed[arr[:, 0]] * cache.node_embed[arr[:, 1]]
    d_head_in = _head_backward(params, head_in, dlogits, cache, grads)
    d_embed = np.zeros_like(cache.node_embed)
    np.add.at(d_embed, arr[:, 0], d_head_in * cache.node_embed[arr[:, 1]])
    np.add.at(d_embed, arr[:, 1], d_head_in * cache.node_embed[arr[:, 0]])
    _gnn_stack_backward(params, cfg, d_embed, ctx, cache, grads)
    return loss, ModelParams({k: grads[k] for k in params.tensors})


def params_to_json(params: ModelParams) -> str:
    """Serialize to the documented flat named-tensor JSON layout."""
    payload = {
        name: {"shape": list(t.shape), "data": t.ravel().tolist()}
        for name, t in params.tensors.items()
    }
    return json.dumps({"tensors": payload}, indent=1)


def params_from_json(text: str) -> ModelParams:
    raw = json.loads(text)
    tensors = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in raw["tensors"].items()
    }
    return ModelParams(tensors)


def save_params(params: ModelParams, path: str | Path) -> None:
    Path(path).write_text(params_to_json(params))


def load_params(path: str | Path) -> ModelParams:
    return params_from_json(Path(path).read_text())
