"""Region-pair correlation matrices and the kNN graphs built from them.

Three correlations are derived from the raw inputs:

* accessibility (AC): cosine similarity of the origin / destination
  distributions implied by trip counts;
* vicinity (VC): cosine similarity of neighbourhood indicator vectors;
* functionality (FC): cosine similarity of knowledge-graph region vectors.

Cosine is undefined for zero vectors. Such rows get similarity 0 with
everything (including themselves) and are reported in ``degenerate``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractError
from .ingest import AdjacencySet, RegionRegistry, TripRecord, _write

KINDS = ("AC_o", "AC_d", "AC", "VC", "FC")


@dataclass
class CorrelationMatrix:
    values: np.ndarray
    kind: str
    degenerate: np.ndarray  # rows whose underlying vector was zero

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown correlation kind {self.kind!r}")

    @property
    def n(self) -> int:
        return self.values.shape[0]


class ODDistributions(NamedTuple):
    p_o: np.ndarray  # row i: distribution over origins of trips ending at i
    p_d: np.ndarray  # row i: distribution over destinations of trips leaving i
    empty_o: np.ndarray  # no incoming trips
    empty_d: np.ndarray  # no outgoing trips


@dataclass
class RegionGraph:
    """Directed kNN graph; ``neighbors[i]`` are i's out-neighbours, best first."""

    n: int
    k: int
    neighbors: list[np.ndarray]
    weights: list[np.ndarray]

    def edges(self) -> list[tuple[int, int, float]]:
        return [(i, int(j), float(w)) for i in range(self.n) for j, w in zip(self.neighbors[i], self.weights[i])]

    def attention_mask(self) -> np.ndarray:
        """Boolean N x N mask: row i admits its out-neighbours and itself."""
        mask = np.eye(self.n, dtype=bool)
        for i, nb in enumerate(self.neighbors):
            mask[i, nb] = True
        return mask


def cooccurrence_counts(trips: Sequence[TripRecord], n: int) -> np.ndarray:
    counts = np.zeros((n, n), dtype=np.int64)
    for t in trips:
        counts[t.origin, t.destination] += t.count
    return counts


def _row_normalise(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mass = m.sum(axis=1, keepdims=True).astype(np.float64)
    empty = mass[:, 0] == 0
    out = np.divide(m, mass, out=np.zeros(m.shape, dtype=np.float64), where=~empty[:, None])
    return out, empty


def od_distributions(counts: np.ndarray) -> ODDistributions:
    counts = np.asarray(counts)
    p_d, empty_d = _row_normalise(counts)
    p_o, empty_o = _row_normalise(counts.T)
    return ODDistributions(p_o, p_d, empty_o, empty_d)


def cosine_similarity(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise row cosine similarity and the mask of zero rows."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    unit = np.divide(x, norms[:, None], out=np.zeros_like(x), where=~zero[:, None])
    sim = unit @ unit.T
    sim = np.clip(0.5 * (sim + sim.T), -1.0, 1.0)
    idx = np.flatnonzero(~zero)
    sim[idx, idx] = 1.0
    return sim, zero


def accessibility_correlation(p_o: np.ndarray, p_d: np.ndarray, alpha: float = 0.5) -> CorrelationMatrix:
    """``alpha * AC_o + (1 - alpha) * AC_d``; diagonal is 1 wherever either row has mass."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    ac_o, zero_o = cosine_similarity(p_o)
    ac_d, zero_d = cosine_similarity(p_d)
    ac = alpha * ac_o + (1.0 - alpha) * ac_d
    degenerate = zero_o & zero_d
    live = np.flatnonzero(~degenerate)
    ac[live, live] = 1.0
    return CorrelationMatrix(ac, "AC", degenerate)


def accessibility_parts(p_o: np.ndarray, p_d: np.ndarray) -> tuple[CorrelationMatrix, CorrelationMatrix]:
    ac_o, zero_o = cosine_similarity(p_o)
    ac_d, zero_d = cosine_similarity(p_d)
    return CorrelationMatrix(ac_o, "AC_o", zero_o), CorrelationMatrix(ac_d, "AC_d", zero_d)


def neighborhood_vectors(adj: AdjacencySet) -> np.ndarray:
    """Binary N x N indicator of each region's neighbours, self-bit set."""
    return (adj.to_matrix() | np.eye(adj.n, dtype=bool)).astype(np.float64)


def vicinity_correlation(adj: AdjacencySet) -> CorrelationMatrix:
    sim, zero = cosine_similarity(neighborhood_vectors(adj))
    return CorrelationMatrix(sim, "VC", zero)


def functionality_correlation(region_vectors: np.ndarray) -> CorrelationMatrix:
    sim, zero = cosine_similarity(region_vectors)
    return CorrelationMatrix(sim, "FC", zero)


def knn_graph(corr: CorrelationMatrix | np.ndarray, k: int) -> RegionGraph:
    """Keep each node's ``k`` most correlated peers with positive similarity.

    Ties go to the lower region index.
    """
    values = corr.values if isinstance(corr, CorrelationMatrix) else np.asarray(corr)
    n = values.shape[0]
    if k < 1:
        raise ContractError(f"k must be at least 1, got {k}")
    if k >= n:
        raise ContractError(f"k={k} must be smaller than the region count {n}")
    neighbors, weights = [], []
    idx = np.arange(n)
    for i in range(n):
        row = values[i]
        cand = idx[(idx != i) & (row > 0)]
        # lexsort: last key is primary
        order = np.lexsort((cand, -row[cand]))[:k]
        chosen = cand[order]
        neighbors.append(chosen)
        weights.append(row[chosen].copy())
    return RegionGraph(n, k, neighbors, weights)


def write_correlation(path, corr: CorrelationMatrix, registry: RegionRegistry) -> None:
    ids, v = registry.ids, corr.values
    rows = ((ids[i], ids[j], repr(float(v[i, j]))) for i in range(corr.n) for j in range(i, corr.n))
    _write(path, ["region_a", "region_b", "value"], rows)


def write_graph(path, graph: RegionGraph, registry: RegionRegistry) -> None:
    ids = registry.ids
    _write(path, ["source", "target", "weight"], ((ids[i], ids[j], repr(w)) for i, j, w in graph.edges()))


def read_correlation(path, registry: RegionRegistry, kind: str) -> CorrelationMatrix:
    import csv

    n = registry.n
    v = np.zeros((n, n))
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            i, j = registry.index(row["region_a"]), registry.index(row["region_b"])
            v[i, j] = v[j, i] = float(row["value"])
    return CorrelationMatrix(v, kind, np.diag(v) == 0)
