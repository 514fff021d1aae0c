"""Graph containers, CSV ingestion, synthetic generation and partitioning.

A :class:`Graph` is the unit of client-private data: node features, an
undirected edge set, integer labels and a train mask. Graphs are stored as
plain numpy arrays and are treated as immutable by every consumer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import GraphFormatError, GraphGenerationError, PartitionError

NODES_FILE = "nodes.csv"
EDGES_FILE = "edges.csv"

LABEL_PROPAGATION_MAX_ITERS = 50


@dataclass
class Graph:
    """An undirected, node-labeled feature graph.

    Edges are stored deduplicated as pairs (a, b) with a < b; self-loops are
    never stored. ``train_mask`` marks the nodes whose labels participate in
    local training (and whose histogram an attacker tries to recover).
    """

    n: int
    features: np.ndarray          # (n, f) float64
    edges: np.ndarray             # (m, 2) int64, each row a < b
    labels: np.ndarray            # (n,) int64 in [0, num_classes)
    num_classes: int
    train_mask: np.ndarray        # (n,) bool

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_train(self) -> int:
        return int(self.train_mask.sum())

    def train_label_counts(self) -> np.ndarray:
        """Histogram of the training nodes' labels, length num_classes."""
        return np.bincount(self.labels[self.train_mask], minlength=self.num_classes)

    def validate(self) -> None:
        if self.features.shape != (self.n, self.features.shape[1]):
            raise GraphFormatError("feature matrix row count does not match node count")
        if self.labels.shape != (self.n,):
            raise GraphFormatError("label vector length does not match node count")
        if self.train_mask.shape != (self.n,):
            raise GraphFormatError("train mask length does not match node count")
        if self.num_classes < 2:
            raise GraphFormatError("a graph needs at least 2 classes")
        if self.n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise GraphFormatError("label outside [0, num_classes)")
        if len(self.edges):
            if self.edges.min() < 0 or self.edges.max() >= self.n:
                raise GraphFormatError("edge endpoint outside [0, n)")
            if (self.edges[:, 0] >= self.edges[:, 1]).any():
                raise GraphFormatError("edges must be stored with a < b")
            dedup = {(int(a), int(b)) for a, b in self.edges}
            if len(dedup) != len(self.edges):
                raise GraphFormatError("duplicate edges present")


@dataclass
class Partition:
    """Node-disjoint induced subgraphs, one per client."""

    client_graphs: list[Graph]
    client_nodes: list[np.ndarray]        # original node ids per client
    client_label_counts: np.ndarray       # (N, L) train-node histograms
    fallback_round_robin: bool = False    # set when community detection found too few communities

    @property
    def num_clients(self) -> int:
        return len(self.client_graphs)


def _canonical_edges(pairs: np.ndarray) -> np.ndarray:
    """Drop self-loops, orient a < b, deduplicate; deterministic order."""
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.asarray(pairs, dtype=np.int64)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    stacked = np.stack([lo, hi], axis=1)
    if len(stacked) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(stacked, axis=0)


def load_graph(dir_path: str | Path) -> Graph:
    """Load a graph from ``nodes.csv`` + ``edges.csv`` in ``dir_path``.

    Node ids in the file are remapped to 0..n-1 preserving file order.
    Duplicate/reversed edges are merged and self-loops dropped. Raises
    :class:`GraphFormatError` naming the offending file and line.
    """
    dir_path = Path(dir_path)
    nodes_path = dir_path / NODES_FILE
    edges_path = dir_path / EDGES_FILE
    for p in (nodes_path, edges_path):
        if not p.is_file():
            raise GraphFormatError(f"missing file {p.name}", path=str(p))

    ids: list[str] = []
    labels: list[int] = []
    rows: list[list[float]] = []
    feat_dim: int | None = None
    with nodes_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2 or header[0] != "id" or header[1] != "label":
            raise GraphFormatError("nodes header must be id,label,f0,...", path=str(nodes_path), line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if feat_dim is None:
                feat_dim = len(row) - 2
            if len(row) - 2 != feat_dim:
                raise GraphFormatError(
                    f"ragged feature row: expected {feat_dim} features, got {len(row) - 2}",
                    path=str(nodes_path), line=lineno)
            try:
                label = int(row[1])
            except ValueError:
                raise GraphFormatError(f"non-integer label {row[1]!r}", path=str(nodes_path), line=lineno)
            if label < 0:
                raise GraphFormatError(f"label {label} outside [0, L)", path=str(nodes_path), line=lineno)
            try:
                feats = [float(v) for v in row[2:]]
            except ValueError:
                raise GraphFormatError("non-numeric feature value", path=str(nodes_path), line=lineno)
            ids.append(row[0])
            labels.append(label)
            rows.append(feats)
    if not ids:
        raise GraphFormatError("nodes file has no data rows", path=str(nodes_path))
    if len(set(ids)) != len(ids):
        raise GraphFormatError("duplicate node ids", path=str(nodes_path))

    id_map = {node_id: i for i, node_id in enumerate(ids)}
    n = len(ids)
    pairs: list[tuple[int, int]] = []
    with edges_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["src", "dst"]:
            raise GraphFormatError("edges header must be src,dst", path=str(edges_path), line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise GraphFormatError("edge rows must have exactly src,dst", path=str(edges_path), line=lineno)
            for v in row:
                if v not in id_map:
                    raise GraphFormatError(f"dangling edge endpoint {v!r}", path=str(edges_path), line=lineno)
            pairs.append((id_map[row[0]], id_map[row[1]]))

    edges = _canonical_edges(np.array(pairs, dtype=np.int64).reshape(-1, 2))
    labels_arr = np.array(labels, dtype=np.int64)
    g = Graph(
        n=n,
        features=np.array(rows, dtype=np.float64),
        edges=edges,
        labels=labels_arr,
        num_classes=int(labels_arr.max()) + 1 if n else 2,
        train_mask=np.ones(n, dtype=bool),
    )
    g.validate()
    return g


def save_graph(g: Graph, dir_path: str | Path) -> None:
    """Write ``nodes.csv`` + ``edges.csv``; inverse of :func:`load_graph`.

    Floats are written with repr so a round-trip is exact.
    """
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    with (dir_path / NODES_FILE).open("w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label"] + [f"f{i}" for i in range(g.feature_dim)])
        for i in range(g.n):
            writer.writerow([i, int(g.labels[i])] + [repr(float(v)) for v in g.features[i]])
    with (dir_path / EDGES_FILE).open("w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["src", "dst"])
        for a, b in g.edges:
            writer.writerow([int(a), int(b)])


def generate_synthetic(
    n: int,
    num_classes: int,
    feature_dim: int,
    label_probs: np.ndarray,
    homophily: float,
    avg_degree: float,
    seed: int,
    train_frac: float = 1.0,
    community_size: int = 50,
    degree_skew: float = 0.0,
) -> Graph:
    """Generate a seeded homophilous graph with Gaussian class-mean features.

    Labels are iid draws from ``label_probs``. Each node's features are its
    class mean (itself a standard-normal draw per class) plus unit Gaussian
    noise. Edges are sampled so the expected intra-class fraction equals
    ``homophily``; intra-class edges are drawn inside planted blocks of
    roughly ``community_size`` nodes, giving the graph genuine community
    structure for partitioning. ``degree_skew`` > 0 draws edge endpoints with
    lognormal node weights, producing hub-heavy degree distributions. Fully
    deterministic for a fixed seed.
    """
    label_probs = np.asarray(label_probs, dtype=np.float64)
    if label_probs.shape != (num_classes,):
        raise GraphGenerationError("label_probs length must equal num_classes")
    if (label_probs < 0).any():
        raise GraphGenerationError("label_probs entries must be nonnegative")
    if abs(label_probs.sum() - 1.0) > 1e-9:
        raise GraphGenerationError("label_probs must sum to 1 within 1e-9")
    if n < num_classes:
        raise GraphGenerationError("need n >= num_classes")
    if not 0.0 <= homophily <= 1.0:
        raise GraphGenerationError("homophily must lie in [0, 1]")
    if avg_degree <= 0 or avg_degree >= n:
        raise GraphGenerationError("avg_degree must lie in (0, n)")

    if community_size < 2:
        raise GraphGenerationError("community_size must be >= 2")

    rng = np.random.default_rng(seed)
    labels = rng.choice(num_classes, size=n, p=label_probs)
    class_means = rng.normal(0.0, 1.0, size=(num_classes, feature_dim))
    features = class_means[labels] + rng.normal(0.0, 1.0, size=(n, feature_dim))

    # planted blocks: split each class into chunks of ~community_size nodes
    blocks = -np.ones(n, dtype=np.int64)
    next_block = 0
    for cls in range(num_classes):
        members = np.flatnonzero(labels == cls)
        if len(members) == 0:
            continue
        n_blocks = max(1, int(round(len(members) / community_size)))
        for chunk in np.array_split(rng.permutation(members), n_blocks):
            blocks[chunk] = next_block
            next_block += 1

    node_weights = np.ones(n)
    if degree_skew > 0:
        node_weights = np.exp(degree_skew * rng.normal(0.0, 1.0, size=n))

    target_edges = int(round(n * avg_degree / 2.0))
    n_intra = rng.binomial(target_edges, homophily)
    intra = _sample_block_pairs(rng, blocks, n_intra, node_weights)
    inter = _sample_pairs(rng, labels, target_edges - n_intra, same_class=False,
                          node_weights=node_weights)
    edges = _canonical_edges(np.concatenate([intra, inter], axis=0))

    train_mask = np.ones(n, dtype=bool)
    if train_frac < 1.0:
        k = max(1, int(round(train_frac * n)))
        train_mask = np.zeros(n, dtype=bool)
        train_mask[rng.choice(n, size=k, replace=False)] = True

    g = Graph(n=n, features=features, edges=edges, labels=labels,
              num_classes=num_classes, train_mask=train_mask)
    g.validate()
    return g


def _sample_block_pairs(rng: np.random.Generator, blocks: np.ndarray,
                        count: int, node_weights: np.ndarray) -> np.ndarray:
    """Sample ``count`` distinct-endpoint pairs, each inside one block."""
    order = np.argsort(blocks, kind="stable")
    sorted_blocks = blocks[order]
    starts = np.searchsorted(sorted_blocks, np.unique(sorted_blocks), side="left")
    ends = np.append(starts[1:], len(sorted_blocks))
    sizes = ends - starts
    usable = sizes >= 2
    if not usable.any():
        raise GraphGenerationError("no block holds two nodes; cannot draw intra edges")
    starts, ends = starts[usable], ends[usable]
    weights = (ends - starts).astype(np.float64)
    weights /= weights.sum()

    pairs = np.zeros((count, 2), dtype=np.int64)
    chosen = rng.choice(len(starts), size=count, p=weights)
    for i, b in enumerate(chosen):
        members = order[starts[b]:ends[b]]
        p = node_weights[members] / node_weights[members].sum()
        a, c = rng.choice(len(members), size=2, replace=False, p=p)
        pairs[i] = members[a], members[c]
    return pairs


def _sample_pairs(rng: np.random.Generator, labels: np.ndarray, count: int,
                  same_class: bool, node_weights: np.ndarray | None = None) -> np.ndarray:
    """Rejection-sample ``count`` node pairs with(out) matching labels."""
    n = len(labels)
    p = None
    if node_weights is not None:
        p = node_weights / node_weights.sum()
    out = np.zeros((0, 2), dtype=np.int64)
    guard = 0
    while len(out) < count:
        batch = max(4 * (count - len(out)), 64)
        a = rng.choice(n, size=batch, p=p)
        b = rng.choice(n, size=batch, p=p)
        ok = a != b
        same = labels[a] == labels[b]
        ok &= same if same_class else ~same
        out = np.concatenate([out, np.stack([a[ok], b[ok]], axis=1)], axis=0)
        guard += 1
        if guard > 200:
            raise GraphGenerationError(
                "could not sample requested edge mix; class structure too degenerate")
    return out[:count]


def label_propagation_communities(g: Graph, seed: int) -> list[np.ndarray]:
    """Synchronous label propagation, lowest-label tie-breaking, capped iterations.

    Initial community labels are a seeded permutation of node ids. Returns
    communities sorted by size descending (ties by smallest member id).
    """
    rng = np.random.default_rng(seed)
    comm = rng.permutation(g.n).astype(np.int64)

    neighbors: list[np.ndarray] = [np.zeros(0, dtype=np.int64)] * g.n
    if len(g.edges):
        adj = sp.coo_matrix(
            (np.ones(2 * len(g.edges)),
             (np.concatenate([g.edges[:, 0], g.edges[:, 1]]),
              np.concatenate([g.edges[:, 1], g.edges[:, 0]]))),
            shape=(g.n, g.n)).tocsr()
        neighbors = [adj.indices[adj.indptr[i]:adj.indptr[i + 1]] for i in range(g.n)]

    for _ in range(LABEL_PROPAGATION_MAX_ITERS):
        new = comm.copy()
        for i in range(g.n):
            nbrs = neighbors[i]
            if len(nbrs) == 0:
                continue
            cand = comm[nbrs]
            values, counts = np.unique(cand, return_counts=True)
            best = values[counts == counts.max()].min()
            new[i] = best
        if np.array_equal(new, comm):
            break
        comm = new

    groups: dict[int, list[int]] = {}
    for i, c in enumerate(comm):
        groups.setdefault(int(c), []).append(i)
    members = [np.array(sorted(v), dtype=np.int64) for v in groups.values()]
    members.sort(key=lambda m: (-len(m), int(m[0])))
    return members


def induced_subgraph(g: Graph, nodes: np.ndarray) -> Graph:
    """Induced subgraph over ``nodes`` (sorted original ids), ids remapped."""
    nodes = np.asarray(sorted(int(v) for v in nodes), dtype=np.int64)
    index = -np.ones(g.n, dtype=np.int64)
    index[nodes] = np.arange(len(nodes))
    if len(g.edges):
        keep = (index[g.edges[:, 0]] >= 0) & (index[g.edges[:, 1]] >= 0)
        sub_edges = _canonical_edges(index[g.edges[keep]])
    else:
        sub_edges = np.zeros((0, 2), dtype=np.int64)
    return Graph(
        n=len(nodes),
        features=g.features[nodes].copy(),
        edges=sub_edges,
        labels=g.labels[nodes].copy(),
        num_classes=g.num_classes,
        train_mask=g.train_mask[nodes].copy(),
    )


def partition_graph(g: Graph, num_clients: int, seed: int) -> Partition:
    """Split ``g`` into node-disjoint client subgraphs via community detection.

    Communities (synchronous label propagation) are sorted by size and
    assigned greedily to the currently-smallest client. If fewer communities
    than clients are found, falls back to seeded round-robin node assignment
    and flags it on the result.
    """
    if num_clients < 1:
        raise PartitionError("need at least one client")
    if g.num_train < num_clients:
        raise PartitionError(
            f"graph has {g.num_train} training nodes but {num_clients} clients requested")

    fallback = False
    communities = label_propagation_communities(g, seed)
    if len(communities) < num_clients:
        fallback = True
        order = np.random.default_rng(seed).permutation(g.n)
        buckets: list[list[int]] = [[] for _ in range(num_clients)]
        for pos, node in enumerate(order):
            buckets[pos % num_clients].append(int(node))
        assignments = [np.array(sorted(b), dtype=np.int64) for b in buckets]
    else:
        sizes = np.zeros(num_clients, dtype=np.int64)
        buckets = [[] for _ in range(num_clients)]
        for comm in communities:
            target = int(np.argmin(sizes))
            buckets[target].extend(int(v) for v in comm)
            sizes[target] += len(comm)
        assignments = [np.array(sorted(b), dtype=np.int64) for b in buckets]

    client_graphs = [induced_subgraph(g, nodes) for nodes in assignments]
    counts = np.stack([cg.train_label_counts() for cg in client_graphs], axis=0)
    return Partition(
        client_graphs=client_graphs,
        client_nodes=assignments,
        client_label_counts=counts,
        fallback_round_robin=fallback,
    )


def normalize_adjacency(g: Graph, arch: str) -> sp.csr_matrix:
    """Per-architecture n x n aggregation operator as a CSR matrix.

    gcn       -> D^{-1/2} (A + I) D^{-1/2}  (symmetric renormalization)
    graphsage -> row-normalized A, no self-loops (zero rows for isolated nodes)
    gat       -> binary A + I support pattern (coefficients computed in-layer)
    """
    arch = arch.lower()
    n = g.n
    if len(g.edges):
        src = np.concatenate([g.edges[:, 0], g.edges[:, 1]])
        dst = np.concatenate([g.edges[:, 1], g.edges[:, 0]])
        adj = sp.coo_matrix((np.ones(len(src)), (src, dst)), shape=(n, n)).tocsr()
    else:
        adj = sp.csr_matrix((n, n))

    if arch == "gcn":
        with_self = adj + sp.identity(n, format="csr")
        deg = np.asarray(with_self.sum(axis=1)).ravel()
        inv_sqrt = 1.0 / np.sqrt(deg)
        d = sp.diags(inv_sqrt)
        return (d @ with_self @ d).tocsr()
    if arch == "graphsage":
        deg = np.asarray(adj.sum(axis=1)).ravel()
        scale = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return (sp.diags(scale) @ adj).tocsr()
    if arch == "gat":
        return (adj + sp.identity(n, format="csr")).tocsr()
    raise GraphFormatError(f"unknown architecture {arch!r}")
