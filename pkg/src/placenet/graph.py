"""Directed KNN neighborhoods over a point set's locations.

Each node's neighbor list is its k nearest other nodes by Euclidean distance,
optionally filtered by a maximum neighbor distance (cutoff), ordered by
(distance ascending, index ascending). The graph is built once per sample in
coordinate space; message passing iterates a node's own neighbor list.

Exhaustive O(n^2) construction for n <= 2048; a KD-tree accelerates candidate
search above that, with distances recomputed locally so ordering and
tie-breaking are identical to the exhaustive path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

_BRUTE_FORCE_MAX = 2048


@dataclass(frozen=True)
class KnnGraph:
    """Immutable per-sample neighbor structure.

    ``neighbors[s]`` is an int64 array of node indices sorted by
    (distance to s ascending, index ascending), excluding s itself.
    ``edge_src``/``edge_dst`` are the flattened (s, u) pairs for vectorized
    message passing.
    """

    num_nodes: int
    neighbors: tuple[np.ndarray, ...]
    k: int
    cutoff: float | None
    edge_src: np.ndarray
    edge_dst: np.ndarray

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.shape[0])


def _finalize(neighbors: list[np.ndarray], k: int, cutoff: float | None) -> KnnGraph:
    n = len(neighbors)
    neighbors = tuple(np.ascontiguousarray(nb, dtype=np.int64) for nb in neighbors)
    for nb in neighbors:
        nb.setflags(write=False)
    counts = [nb.shape[0] for nb in neighbors]
    edge_src = np.repeat(np.arange(n, dtype=np.int64), counts)
    edge_dst = (
        np.concatenate(neighbors) if edge_src.size else np.empty(0, dtype=np.int64)
    )
    edge_src.setflags(write=False)
    edge_dst.setflags(write=False)
    return KnnGraph(n, neighbors, k, cutoff, edge_src, edge_dst)


def _select(d2_row: np.ndarray, self_idx: int, candidates: np.ndarray,
            k: int, cutoff2: float | None) -> np.ndarray:
    # candidates partially ordered; re-sort by (squared distance, index)
    mask = candidates != self_idx
    cand = candidates[mask]
    d2 = d2_row[mask]
    order = np.lexsort((cand, d2))
    cand = cand[order][:k]
    if cutoff2 is not None:
        d2 = d2[order][:k]
        cand = cand[d2 <= cutoff2]
    return cand


def build_knn_graph(points, k: int, cutoff: float | None = None) -> KnnGraph:
    """Build the k-nearest-neighbor graph over 2-D locations.

    ``points`` is an (n, 2) array-like of coordinates. Ties in distance are
    broken by lower index, so identical input yields identical ordering.
    """
    locs = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
    if locs.ndim != 2 or locs.shape[1] != 2:
        raise ValueError(f"points must have shape (n, 2), got {locs.shape}")
    n = locs.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 points, got {n}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if cutoff is not None and not cutoff > 0:
        raise ValueError(f"cutoff must be > 0, got {cutoff}")

    cutoff2 = None if cutoff is None else float(cutoff) * float(cutoff)
    k_eff = min(k, n - 1)

    if n <= _BRUTE_FORCE_MAX:
        diff = locs[:, None, :] - locs[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        all_idx = np.arange(n, dtype=np.int64)
        neighbors = [_select(d2[s], s, all_idx, k_eff, cutoff2) for s in range(n)]
        return _finalize(neighbors, k, cutoff)

    tree = cKDTree(locs)
    # query k_eff+1 since the query point itself is in the tree
    dists, _ = tree.query(locs, k=k_eff + 1)
    neighbors = []
    for s in range(n):
        radius = float(dists[s, -1])
        if cutoff is not None:
            radius = min(radius, float(cutoff))
        # inflate to be safe against kd-tree rounding at the boundary
        cand = np.asarray(
            tree.query_ball_point(locs[s], radius * (1.0 + 1e-12) + 1e-300),
            dtype=np.int64,
        )
        d2 = np.einsum("ij,ij->i", locs[cand] - locs[s], locs[cand] - locs[s])
        neighbors.append(_select(d2, s, cand, k_eff, cutoff2))
    return _finalize(neighbors, k, cutoff)
