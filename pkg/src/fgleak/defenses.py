"""Client-side defenses: randomized response on labels and a DP-SGD-style
local trainer with degree bounding, per-node gradient clipping and Gaussian
noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DefenseError
from .federation import ClientState, ClientUpdate
from .graphs import Graph
from .nn import (
    ModelConfig,
    ModelParams,
    apply_sgd_step,
    build_context,
    compute_loss_and_gradients,
)


@dataclass
class DefenseConfig:
    """At most one defense family is active per experiment arm."""

    label_dp_epsilon: float | None = None
    dp_clip_norm: float | None = None
    dp_noise_multiplier: float | None = None
    max_out_degree: int | None = None

    def validate(self) -> None:
        label_dp = self.label_dp_epsilon is not None
        dp_gnn = any(v is not None for v in
                     (self.dp_clip_norm, self.dp_noise_multiplier, self.max_out_degree))
        if label_dp and dp_gnn:
            raise DefenseError("enable either label DP or DP training, not both")
        if label_dp and self.label_dp_epsilon <= 0:
            raise DefenseError("label_dp_epsilon must be positive")
        if dp_gnn:
            if self.dp_clip_norm is None or self.dp_noise_multiplier is None:
                raise DefenseError("DP training needs dp_clip_norm and dp_noise_multiplier")
            if self.dp_clip_norm <= 0:
                raise DefenseError("dp_clip_norm must be positive")
            if self.dp_noise_multiplier < 0:
                raise DefenseError("dp_noise_multiplier must be >= 0")
            if self.max_out_degree is not None and self.max_out_degree < 1:
                raise DefenseError("max_out_degree must be >= 1")


def keep_probability(epsilon: float, num_classes: int) -> float:
    """k-ary randomized response probability of keeping the true label."""
    e = np.exp(epsilon)
    return float(e / (e + num_classes - 1))


def label_dp_randomize(labels: np.ndarray, num_classes: int, epsilon: float,
                       seed: int) -> np.ndarray:
    """k-ary randomized response: keep w.p. e^eps/(e^eps+L-1), else uniform other."""
    if num_classes < 2:
        raise DefenseError("randomized response needs at least 2 classes")
    if epsilon <= 0:
        raise DefenseError("epsilon must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    keep = rng.random(labels.shape) < keep_probability(epsilon, num_classes)
    offsets = rng.integers(1, num_classes, size=labels.shape)
    return np.where(keep, labels, (labels + offsets) % num_classes)


def apply_label_dp(g: Graph, epsilon: float, seed: int) -> Graph:
    """Copy of ``g`` with randomized-response labels on every node."""
    noised = label_dp_randomize(g.labels, g.num_classes, epsilon, seed)
    return Graph(n=g.n, features=g.features, edges=g.edges, labels=noised,
                 num_classes=g.num_classes, train_mask=g.train_mask)


def bound_degrees(g: Graph, max_out_degree: int, seed: int) -> Graph:
    """Subsample each node's neighbor list so every degree is <= max_out_degree.

    Each node keeps a seeded sample of its incident edges; an edge survives
    only if both endpoints kept it.
    """
    if max_out_degree < 1:
        raise DefenseError("max_out_degree must be >= 1")
    if len(g.edges) == 0:
        return g
    rng = np.random.default_rng(seed)
    incident: list[list[int]] = [[] for _ in range(g.n)]
    for e, (a, b) in enumerate(g.edges):
        incident[int(a)].append(e)
        incident[int(b)].append(e)
    kept_by = np.zeros((len(g.edges), 2), dtype=bool)
    for node in range(g.n):
        edges_here = incident[node]
        if len(edges_here) > max_out_degree:
            chosen = rng.choice(len(edges_here), size=max_out_degree, replace=False)
            edges_here = [edges_here[i] for i in sorted(chosen)]
        for e in edges_here:
            side = 0 if int(g.edges[e, 0]) == node else 1
            kept_by[e, side] = True
    surviving = g.edges[kept_by.all(axis=1)]
    return Graph(n=g.n, features=g.features, edges=surviving, labels=g.labels,
                 num_classes=g.num_classes, train_mask=g.train_mask)


def _clip_to_norm(grads: ModelParams, clip_norm: float) -> ModelParams:
    norm = grads.global_norm()
    return grads.scale(1.0 / max(1.0, norm / clip_norm))


def dp_gnn_local_train(init: ModelParams, client: ClientState, cfg: ModelConfig,
                       defense: DefenseConfig, seed: int) -> ClientUpdate:
    """Local training with degree bounding, per-node clipping and Gaussian noise.

    Per epoch: subsample neighbor lists (seeded), take each training node's
    individual cross-entropy gradient, clip it to ``dp_clip_norm``, average
    the clipped gradients, add N(0, (sigma * clip)^2) noise scaled by 1/K so
    that sigma = 0 with inactive clipping reproduces the plain trainer
    exactly, then apply one SGD step.
    """
    defense.validate()
    if defense.dp_clip_norm is None or defense.dp_noise_multiplier is None:
        raise DefenseError("DP training needs dp_clip_norm and dp_noise_multiplier")
    rng = np.random.default_rng(seed)
    train_idx = np.flatnonzero(client.graph.train_mask)
    k = len(train_idx)
    params = init.copy()
    sigma = defense.dp_noise_multiplier
    clip = defense.dp_clip_norm
    for _ in range(client.epochs):
        graph = client.graph
        if defense.max_out_degree is not None:
            graph = bound_degrees(graph, defense.max_out_degree,
                                  int(rng.integers(0, 2 ** 31)))
        ctx = build_context(graph, cfg)
        summed = {name: np.zeros_like(t) for name, t in params.tensors.items()}
        mask = np.zeros(graph.n, dtype=bool)
        for node in train_idx:
            mask[node] = True
            _, node_grads = compute_loss_and_gradients(params, cfg, graph, mask, ctx)
            mask[node] = False
            clipped = _clip_to_norm(node_grads, clip)
            for name in summed:
                summed[name] += clipped.tensors[name]
        for name, t in summed.items():
            noise = rng.normal(0.0, sigma * clip, size=t.shape) if sigma > 0 else 0.0
            summed[name] = (t + noise) / k
        params = apply_sgd_step(params, ModelParams(summed), client.lr)
    return ClientUpdate(trained_params=params, delta=init.subtract(params),
                        epochs=client.epochs)


def make_dp_local_train(defense: DefenseConfig, base_seed: int):
    """Round-aware local_train callable for the federation loop."""
    def local_train(init: ModelParams, client: ClientState, cfg: ModelConfig,
                    round_idx: int) -> ClientUpdate:
        seed = int(np.random.SeedSequence(
            entropy=(base_seed, client.id, round_idx)).generate_state(1)[0])
        return dp_gnn_local_train(init, client, cfg, defense, seed)
    return local_train
