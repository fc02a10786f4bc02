"""Temporal biomarker graphs and a graph-convolution encoder.

One node per (biomarker, visit). Edges join consecutive visits of the same
biomarker and different biomarkers measured at the same visit. Several
patients are batched by stacking their nodes under a block-diagonal
normalized adjacency; a pooling matrix then takes the per-patient mean.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .numerics import ConfigurationError, DimensionError, Tensor
from .numerics.module import Linear, Module, uniform_init
from .preprocess import minmax_normalize

READOUT_DIM = 64


class GraphError(ValueError):
    pass


class Biomarker(str, enum.Enum):
    HBA1C = "hba1c"
    RETINAL_THICKNESS = "retinal_thickness"
    VEGF = "vegf"

    @property
    def index(self) -> int:
        return list(Biomarker).index(self)


@dataclass
class BiomarkerSeries:
    biomarker: Biomarker
    months: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.biomarker = Biomarker(self.biomarker)
        self.months = np.asarray(self.months, dtype=np.float64).ravel()
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.months.size < 1 or self.months.size != self.values.size:
            raise GraphError(f"{self.biomarker.value}: need matching, non-empty months/values")
        if np.any(np.diff(self.months) <= 0):
            raise GraphError(f"{self.biomarker.value}: timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise GraphError(f"{self.biomarker.value}: non-finite values")


@dataclass
class TemporalGraph:
    features: np.ndarray
    adjacency: np.ndarray
    index: dict[tuple[str, float], int] = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    def permuted(self, perm: Sequence[int]) -> "TemporalGraph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return TemporalGraph(self.features[perm], self.adjacency[np.ix_(perm, perm)],
                             {k: int(inv[v]) for k, v in self.index.items()})


ValueRanges = Mapping[Biomarker | str, tuple[float, float]]

# fixed clinical ranges; keep trajectories comparable across patients
DEFAULT_VALUE_RANGES: dict[Biomarker, tuple[float, float]] = {
    Biomarker.HBA1C: (3.0, 16.0),
    Biomarker.RETINAL_THICKNESS: (150.0, 320.0),
    Biomarker.VEGF: (0.0, 300.0),
}


def _normalize(values: np.ndarray, bounds: tuple[float, float] | None) -> np.ndarray:
    if bounds is None:
        return minmax_normalize(values)
    lo, hi = bounds
    if hi <= lo:
        return np.zeros_like(values)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def node_features(series: Sequence[BiomarkerSeries], time_scale: float,
                  value_ranges: ValueRanges | None) -> tuple[np.ndarray, list[tuple[Biomarker, float]]]:
    n_kinds = len(Biomarker)
    rows, keys = [], []
    ranges = {Biomarker(k): v for k, v in (value_ranges or {}).items()}
    for s in series:
        norm = _normalize(s.values, ranges.get(s.biomarker))
        for t, v in zip(s.months, norm):
            onehot = np.zeros(n_kinds)
            onehot[s.biomarker.index] = 1.0
            rows.append(np.concatenate([[v, t / time_scale], onehot]))
            keys.append((s.biomarker, float(t)))
    return np.array(rows), keys


def chain_and_visit_edges(keys: Sequence[tuple[Biomarker, float]]) -> list[tuple[int, int]]:
    """Consecutive visits within a biomarker, plus same-month cross-biomarker pairs."""
    edges = []
    by_marker: dict[Biomarker, list[tuple[float, int]]] = {}
    by_time: dict[float, list[int]] = {}
    for i, (marker, t) in enumerate(keys):
        by_marker.setdefault(marker, []).append((t, i))
        by_time.setdefault(t, []).append(i)
    for chain in by_marker.values():
        chain.sort()
        edges.extend((a, b) for (_, a), (_, b) in zip(chain, chain[1:]))
    for nodes in by_time.values():
        edges.extend((a, b) for i, a in enumerate(nodes) for b in nodes[i + 1:])
    return edges


EdgeRule = Callable[[Sequence[tuple[Biomarker, float]]], list[tuple[int, int]]]


def build_graph(series: Sequence[BiomarkerSeries], time_scale: float = 60.0,
                value_ranges: ValueRanges | None = None,
                edge_rule: EdgeRule = chain_and_visit_edges) -> TemporalGraph:
    """Node features are ``[normalized value, month / time_scale, one-hot marker]``.

    ``value_ranges`` fixes the min/max per biomarker (e.g. cohort-wide); when
    a marker is missing from it, that series is min-max scaled on its own.
    """
    if not series:
        raise GraphError("build_graph needs at least one biomarker series")
    if time_scale <= 0:
        raise GraphError("time_scale must be positive")
    feats, keys = node_features(series, time_scale, value_ranges)
    n = len(keys)
    adj = np.zeros((n, n))
    for a, b in edge_rule(keys):
        if a != b:
            adj[a, b] = adj[b, a] = 1.0
    index = {(m.value, t): i for i, (m, t) in enumerate(keys)}
    return TemporalGraph(feats, adj, index)


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise GraphError("adjacency must be square")
    if np.any(adj < 0) or not np.allclose(adj, adj.T):
        raise GraphError("adjacency must be symmetric and non-negative")
    a_hat = adj + np.eye(adj.shape[0])
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return d[:, None] * a_hat * d[None, :]


@dataclass
class GraphBatch:
    """Several graphs stacked for one forward pass."""

    features: np.ndarray
    a_norm: np.ndarray
    pool: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.pool.shape[0]


def canonical_order(graph: TemporalGraph) -> np.ndarray:
    """Node order sorted by feature rows, so relabelled copies of one graph
    are summed in the same order (bit-identical readout)."""
    f = graph.features
    return np.lexsort(f.T[::-1]) if f.size else np.arange(graph.num_nodes)


def batch_graphs(graphs: Sequence[TemporalGraph]) -> GraphBatch:
    if not graphs:
        raise GraphError("empty graph batch")
    sizes = [g.num_nodes for g in graphs]
    if min(sizes) < 1:
        raise GraphError("readout needs at least one node per graph")
    graphs = [g.permuted(canonical_order(g)) for g in graphs]
    total = sum(sizes)
    a = np.zeros((total, total))
    pool = np.zeros((len(graphs), total))
    offset = 0
    for i, g in enumerate(graphs):
        n = g.num_nodes
        a[offset:offset + n, offset:offset + n] = normalize_adjacency(g.adjacency)
        pool[i, offset:offset + n] = 1.0 / n
        offset += n
    return GraphBatch(np.concatenate([g.features for g in graphs]), a, pool)


@dataclass(frozen=True)
class GcnConfig:
    in_dim: int = 2 + len(Biomarker)
    hidden: tuple[int, ...] = (32, 32, 32)
    out_dim: int = READOUT_DIM

    def __post_init__(self):
        if len(self.hidden) < 1 or min(self.hidden) < 1:
            raise ConfigurationError("GCN needs at least one layer of positive width")
        if self.out_dim != READOUT_DIM:
            raise ConfigurationError(f"graph readout width is fixed at {READOUT_DIM}")

    @property
    def num_layers(self) -> int:
        return len(self.hidden)

    def param_count(self) -> int:
        widths = (self.in_dim,) + self.hidden
        return sum(a * b for a, b in zip(widths, widths[1:])) + Linear.count(self.hidden[-1], self.out_dim)


class GraphEncoder(Module):
    """L propagation steps H <- ReLU(A_hat H W), then mean readout and projection."""

    def __init__(self, cfg: GcnConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        widths = (cfg.in_dim,) + cfg.hidden
        self.weights = [self.param(f"W{i}", uniform_init(rng, (a, b), a, np.sqrt(2)))
                        for i, (a, b) in enumerate(zip(widths, widths[1:]))]
        self.readout_proj = self.child("readout", Linear(cfg.hidden[-1], cfg.out_dim, rng))

    def propagate(self, features, a_norm) -> Tensor:
        h = features if isinstance(features, Tensor) else Tensor(features)
        if h.shape[-1] != self.cfg.in_dim:
            raise ConfigurationError(f"node width {h.shape[-1]} != GCN input {self.cfg.in_dim}")
        a = Tensor(a_norm)
        for w in self.weights:
            h = (a @ (h @ w)).relu()
        return h

    def readout(self, h: Tensor, pool: np.ndarray) -> Tensor:
        if h.shape[0] < 1:
            raise GraphError("readout over zero nodes")
        return self.readout_proj(Tensor(pool) @ h)

    def __call__(self, batch: GraphBatch) -> Tensor:
        return self.readout(self.propagate(batch.features, batch.a_norm), batch.pool)


def gcn_forward(graph: TemporalGraph, encoder: GraphEncoder) -> Tensor:
    return encoder.propagate(graph.features, normalize_adjacency(graph.adjacency))


def readout(h: Tensor, encoder: GraphEncoder) -> Tensor:
    """Mean over node rows, projected to 64."""
    if h.ndim != 2 or h.shape[0] < 1:
        raise GraphError("readout needs a non-empty [nodes, width] matrix")
    if h.shape[1] != encoder.cfg.hidden[-1]:
        raise DimensionError(f"node width {h.shape[1]} != {encoder.cfg.hidden[-1]}")
    pool = np.full((1, h.shape[0]), 1.0 / h.shape[0])
    return encoder.readout(h, pool).reshape(encoder.cfg.out_dim)
