"""FedAvg orchestration: client local training, aggregation, round loop.

The round loop exposes two hook points (pre-round broadcast and
post-aggregation) through which a malicious server can be simulated without
touching the training path; with no hooks installed the loop is vanilla
FedAvg with full participation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AggregationError, TrainingError
from .graphs import Graph
from .nn import (
    GraphContext,
    ModelConfig,
    ModelParams,
    accuracy,
    apply_sgd_step,
    build_context,
    compute_loss_and_gradients,
    init_params,
    weighted_sum,
)


@dataclass
class ClientState:
    """One client's private data and local-training settings.

    ``num_train`` (the paper-side sample count) is derivable here but is never
    handed to the attack path, which sees only model deltas.
    """

    id: int
    graph: Graph
    weight: float = 1.0
    epochs: int = 5
    lr: float = 0.05

    @property
    def num_train(self) -> int:
        return self.graph.num_train


@dataclass
class ClientUpdate:
    """What a client uploads after one round of local training."""

    trained_params: ModelParams
    delta: ModelParams          # initial - trained, exactly
    epochs: int


@dataclass
class RoundLog:
    round_idx: int
    params_before: ModelParams
    params_after: ModelParams
    client_losses: list[float]
    client_accuracies: list[float]

    def to_record(self) -> dict:
        """JSON-lines friendly summary (params reported by global norm)."""
        return {
            "round": self.round_idx,
            "norm_before": self.params_before.global_norm(),
            "norm_after": self.params_after.global_norm(),
            "client_losses": self.client_losses,
            "client_accuracies": self.client_accuracies,
        }


@dataclass
class RoundHooks:
    """Server-side interception points for the round loop.

    ``pre_round(r, params) -> params`` returns what is broadcast;
    ``post_aggregation(r, aggregated, updates, broadcast) -> params`` returns
    what becomes the next global model. No-op hooks must leave a round
    byte-identical to a hook-free round.
    """

    pre_round: Callable[[int, ModelParams], ModelParams] | None = None
    post_aggregation: Callable[[int, ModelParams, list[ClientUpdate], ModelParams], ModelParams] | None = None


LocalTrainFn = Callable[[ModelParams, "ClientState", ModelConfig, int], ClientUpdate]


def client_local_train(init: ModelParams, client: ClientState,
                       cfg: ModelConfig, ctx: GraphContext | None = None) -> ClientUpdate:
    """E full-batch SGD epochs on the client's train mask."""
    if client.num_train == 0:
        raise TrainingError(f"client {client.id} has no training nodes")
    if ctx is None:
        ctx = build_context(client.graph, cfg)
    params = init.copy()
    for _ in range(client.epochs):
        _, grads = compute_loss_and_gradients(params, cfg, client.graph,
                                              client.graph.train_mask, ctx)
        params = apply_sgd_step(params, grads, client.lr)
    return ClientUpdate(trained_params=params, delta=init.subtract(params),
                        epochs=client.epochs)


def aggregate_models(updates: list[ClientUpdate], weights: list[float]) -> ModelParams:
    """Weighted sum of the clients' trained parameters."""
    if not updates:
        raise AggregationError("no client updates to aggregate")
    if len(updates) != len(weights):
        raise AggregationError("one weight per update required")
    total = float(np.sum(weights))
    if abs(total - 1.0) > 1e-9:
        raise AggregationError(f"weights sum to {total}, expected 1")
    return weighted_sum([u.trained_params for u in updates], list(weights))


def uniform_weights(n: int) -> list[float]:
    return [1.0 / n] * n


def size_weights(clients: list[ClientState]) -> list[float]:
    sizes = np.array([c.graph.n for c in clients], dtype=np.float64)
    return list(sizes / sizes.sum())


def run_training(
    clients: list[ClientState],
    cfg: ModelConfig,
    rounds: int,
    seed: int,
    hooks: RoundHooks | None = None,
    local_train: LocalTrainFn | None = None,
    init: ModelParams | None = None,
) -> tuple[ModelParams, list[RoundLog]]:
    """Run ``rounds`` of broadcast / local train / aggregate.

    Deterministic for fixed inputs; rounds are numbered from 1. A custom
    ``local_train(init, client, cfg, round_idx)`` replaces the plain trainer
    (used for DP defenses). ``rounds == 0`` returns the initial model.
    """
    if not clients:
        raise TrainingError("no clients")
    weights = [c.weight for c in clients]
    if abs(sum(weights) - 1.0) > 1e-9:
        raise AggregationError(f"client weights sum to {sum(weights)}, expected 1")

    global_params = init.copy() if init is not None else init_params(cfg, seed)
    contexts = [build_context(c.graph, cfg) for c in clients]
    logs: list[RoundLog] = []

    for r in range(1, rounds + 1):
        before = global_params
        broadcast = hooks.pre_round(r, global_params) if hooks and hooks.pre_round else global_params

        updates: list[ClientUpdate] = []
        losses: list[float] = []
        accs: list[float] = []
        for client, ctx in zip(clients, contexts):
            if local_train is not None:
                update = local_train(broadcast, client, cfg, r)
            else:
                update = client_local_train(broadcast, client, cfg, ctx)
            updates.append(update)
            loss, _ = compute_loss_and_gradients(update.trained_params, cfg,
                                                 client.graph, client.graph.train_mask, ctx)
            losses.append(loss)
            accs.append(accuracy(update.trained_params, cfg, client.graph,
                                 client.graph.train_mask, ctx))

        aggregated = aggregate_models(updates, weights)
        if hooks and hooks.post_aggregation:
            global_params = hooks.post_aggregation(r, aggregated, updates, broadcast)
        else:
            global_params = aggregated
        logs.append(RoundLog(round_idx=r, params_before=before,
                             params_after=global_params,
                             client_losses=losses, client_accuracies=accs))
    return global_params, logs


def round_logs_to_jsonl(logs: list[RoundLog]) -> str:
    import json
    return "\n".join(json.dumps(log.to_record()) for log in logs) + ("\n" if logs else "")
