"""Server-side label-distribution inference with global-model clipping.

The attack exploits an identity of the cross-entropy gradient at the final
fully-connected layer: summing a client's accumulated weight delta along the
input dimension relates the per-class gradient mass to the client's label
counts, up to per-sample variation in the fc-input sums. Clipping the global
model to a tiny norm before broadcasting collapses that variation (the
hidden-layer biases dominate every embedding), which makes the recovered
counts essentially exact. Statistics the server cannot observe are estimated
by pushing attacker-generated dummy data through the clipped model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AllClampedError, DegenerateEmbeddingError, InferenceError
from .federation import ClientUpdate, RoundHooks
from .graphs import Graph
from .nn import ForwardTrace, ModelConfig, ModelParams, forward_pass, link_pair_forward

MIN_MEAN_SUM = 1e-30


@dataclass
class AttackConfig:
    """Attack-side knobs of the malicious server."""

    clip_threshold: float = 0.01
    dummy_count: int = 1000
    dummy_std: float = 0.001
    rounds: frozenset[int] = frozenset()
    restore_after_attack: bool = True

    def __post_init__(self) -> None:
        if self.clip_threshold <= 0:
            raise InferenceError("clip_threshold must be positive")
        if self.dummy_count < 1:
            raise InferenceError("dummy_count must be >= 1")
        self.rounds = frozenset(int(r) for r in self.rounds)


@dataclass
class AttackStats:
    """Dummy-data forward statistics feeding the count inference."""

    probs: np.ndarray             # (K_d, L) post-softmax
    fc_input_sums: np.ndarray     # (K_d,) per-sample sums over fc input units
    sum_mean: float               # mean of fc_input_sums
    weighted_prob_sums: np.ndarray  # (L,) sum_k probs[k, l] * fc_input_sums[k]

    @classmethod
    def from_trace(cls, trace: ForwardTrace) -> "AttackStats":
        return cls(
            probs=trace.probs,
            fc_input_sums=trace.fc_input_sums,
            sum_mean=trace.sum_mean,
            weighted_prob_sums=trace.probs.T @ trace.fc_input_sums,
        )


@dataclass
class InferredDistribution:
    """Raw per-class count estimates and their clamped normalization."""

    raw_counts: np.ndarray    # may contain negatives
    distribution: np.ndarray  # nonnegative, sums to 1


def clip_global_model(params: ModelParams, threshold: float) -> ModelParams:
    """Scale all parameters jointly so the global l2 norm is min(norm, threshold)."""
    norm = params.global_norm()
    return params.scale(1.0 / max(1.0, norm / threshold))


def make_dummy_graph(feature_dim: int, n_dummy: int, std: float,
                     num_classes: int, seed: int) -> Graph:
    """Edgeless graph of iid N(0, std^2) feature rows; labels are placeholders."""
    if n_dummy < 1:
        raise InferenceError("need at least one dummy node")
    rng = np.random.default_rng(seed)
    return Graph(
        n=n_dummy,
        features=rng.normal(0.0, std, size=(n_dummy, feature_dim)),
        edges=np.zeros((0, 2), dtype=np.int64),
        labels=np.zeros(n_dummy, dtype=np.int64),
        num_classes=max(num_classes, 2),
        train_mask=np.ones(n_dummy, dtype=bool),
    )


def make_dummy_pairs(n_dummy: int, count: int) -> np.ndarray:
    """Deterministic (u, v, label) triples over dummy nodes; labels are unused."""
    u = np.arange(count, dtype=np.int64) % n_dummy
    v = (u + 1) % n_dummy
    labels = np.arange(count, dtype=np.int64) % 2
    return np.stack([u, v, labels], axis=1)


def extract_attack_stats(clipped: ModelParams, cfg: ModelConfig,
                         dummy: Graph) -> AttackStats:
    """One forward pass of the dummy data through the clipped model."""
    return AttackStats.from_trace(forward_pass(clipped, cfg, dummy))


def extract_link_attack_stats(clipped: ModelParams, cfg: ModelConfig,
                              dummy: Graph, pairs: np.ndarray) -> AttackStats:
    """Dummy statistics for the link-prediction variant (pair-indexed rows)."""
    return AttackStats.from_trace(link_pair_forward(clipped, cfg, dummy, pairs))


def infer_label_distribution(stats: AttackStats, delta_fc: np.ndarray,
                             epochs: int, lr: float) -> InferredDistribution:
    """Recover a client's label distribution from its final-FC weight delta.

    ``delta_fc`` is the raw (initial - trained) final-FC weight difference;
    dividing by ``lr`` converts it to the accumulated gradient, whose
    column sums divided by ``epochs`` approximate the average per-epoch
    gradient mass per class. The unknown true sample count enters both terms
    linearly, so it is replaced by the dummy count; normalization removes it.
    Negative count estimates are clamped to zero before normalizing.
    """
    if epochs < 1:
        raise InferenceError("epochs must be >= 1")
    if lr <= 0:
        raise InferenceError("lr must be positive")
    mean_sum = stats.sum_mean
    if abs(mean_sum) <= MIN_MEAN_SUM:
        raise DegenerateEmbeddingError(
            "mean fc-input sum is ~0 (insufficient clipping or pathological model)")
    k_dummy = len(stats.fc_input_sums)
    grad_col_sums = delta_fc.sum(axis=0) / lr
    raw = (stats.weighted_prob_sums - k_dummy * grad_col_sums / epochs) / mean_sum
    clamped = np.maximum(raw, 0.0)
    total = clamped.sum()
    if total <= 0:
        raise AllClampedError("all inferred counts were clamped to zero")
    return InferredDistribution(raw_counts=raw, distribution=clamped / total)


def infer_graph_density(stats: AttackStats, delta_fc: np.ndarray,
                        epochs: int, lr: float) -> InferredDistribution:
    """Link-prediction variant: distribution over {non-edge, edge}.

    Identical math with two classes; entry 1 of the result is the inferred
    fraction of positive pairs in the client's link-training set.
    """
    if delta_fc.shape[1] != 2 or stats.probs.shape[1] != 2:
        raise InferenceError("graph-density inference requires exactly 2 output units")
    return infer_label_distribution(stats, delta_fc, epochs, lr)


def compute_err(fc_input_sums: np.ndarray) -> float:
    """Mean absolute deviation of the per-sample fc-input sums."""
    sums = np.asarray(fc_input_sums, dtype=np.float64)
    if sums.size == 0:
        raise InferenceError("need at least one sample")
    return float(np.abs(sums - sums.mean()).mean())


@dataclass
class AttackRecord:
    """Outcome of attacking one client in one round."""

    round_idx: int
    client_id: int
    result: InferredDistribution | None
    error: str | None = None


class AttackSchedule:
    """Hooks implementing the malicious-server schedule for the round loop.

    On an attack round: save the pre-round global model, broadcast its clipped
    version, collect dummy statistics from the clipped model, infer each
    client's label distribution from its uploaded delta, and (if configured)
    replace the aggregated result with the saved model so the clipped round
    leaves no trace in training. Non-attack rounds are untouched.
    """

    def __init__(self, atk: AttackConfig, model_cfg: ModelConfig,
                 feature_dim: int, lr: float, seed: int):
        self.atk = atk
        self.model_cfg = model_cfg
        self.feature_dim = feature_dim
        self.lr = lr
        self.seed = seed
        self.records: list[AttackRecord] = []
        self.round_stats: dict[int, AttackStats] = {}
        self._saved: dict[int, ModelParams] = {}

    def hooks(self) -> RoundHooks:
        return RoundHooks(pre_round=self._pre_round,
                          post_aggregation=self._post_aggregation)

    def _pre_round(self, round_idx: int, params: ModelParams) -> ModelParams:
        if round_idx not in self.atk.rounds:
            return params
        self._saved[round_idx] = params
        clipped = clip_global_model(params, self.atk.clip_threshold)
        dummy = make_dummy_graph(self.feature_dim, self.atk.dummy_count,
                                 self.atk.dummy_std, self.model_cfg.out_dim,
                                 seed=self.seed + round_idx)
        self.round_stats[round_idx] = extract_attack_stats(clipped, self.model_cfg, dummy)
        return clipped

    def _post_aggregation(self, round_idx: int, aggregated: ModelParams,
                          updates: list[ClientUpdate],
                          broadcast: ModelParams) -> ModelParams:
        if round_idx not in self.atk.rounds:
            return aggregated
        stats = self.round_stats[round_idx]
        for client_id, update in enumerate(updates):
            try:
                result = infer_label_distribution(
                    stats, update.delta.tensors["fc_out.weight"],
                    update.epochs, self.lr)
                self.records.append(AttackRecord(round_idx, client_id, result))
            except InferenceError as exc:  # one degenerate client must not stop the rest
                self.records.append(AttackRecord(round_idx, client_id, None, str(exc)))
        if self.atk.restore_after_attack:
            return self._saved[round_idx]
        return aggregated


def write_distributions_csv(records: list[AttackRecord],
                            true_distributions: dict[int, np.ndarray],
                            path: str | Path) -> None:
    """Serialize attack outcomes: round, client, class, inferred_prob, true_prob."""
    with Path(path).open("w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "client", "class", "inferred_prob", "true_prob"])
        for rec in records:
            if rec.result is None:
                continue
            truth = true_distributions.get(rec.client_id)
            for cls, prob in enumerate(rec.result.distribution):
                true_p = "" if truth is None else repr(float(truth[cls]))
                writer.writerow([rec.round_idx, rec.client_id, cls, repr(float(prob)), true_p])
