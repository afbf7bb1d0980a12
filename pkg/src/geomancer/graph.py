"""Neighbor graphs, local-PCA tangent frames and the scalar graph Laplacian."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ._validation import check_points

__all__ = [
    "NeighborGraph",
    "TangentFrames",
    "InsufficientNeighborsError",
    "DisconnectedGraphError",
    "build_knn_graph",
    "estimate_tangent_frames",
    "scalar_laplacian",
    "laplacian_eigenmaps_embed",
    "sign_fix_columns",
]

# Above this many points the kNN search goes through a k-d tree.
BRUTE_FORCE_MAX_POINTS = 4000


class InsufficientNeighborsError(ValueError):
    """A node has fewer neighbors than the requested tangent dimension."""


class DisconnectedGraphError(ValueError):
    """The neighbor graph has more than one connected component."""


@dataclass(frozen=True)
class NeighborGraph:
    """Symmetric, loop-free graph stored as sorted CSR adjacency lists."""

    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_edges(cls, n_nodes: int, rows, cols) -> "NeighborGraph":
        """Symmetric closure of the (undirected) edges ``rows[e] -- cols[e]``."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if np.any(rows == cols):
            raise ValueError("self-loops are not allowed")
        data = np.ones(2 * len(rows), dtype=np.int8)
        adj = sp.coo_matrix(
            (data, (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
            shape=(n_nodes, n_nodes),
        ).tocsr()
        adj.sum_duplicates()
        adj.sort_indices()
        graph = cls(adj.indptr.astype(np.int64), adj.indices.astype(np.int64))
        if np.any(graph.degrees == 0):
            node = int(np.flatnonzero(graph.degrees == 0)[0])
            raise ValueError(f"node {node} has no neighbors")
        return graph

    @classmethod
    def from_adjacency(cls, adjacency) -> "NeighborGraph":
        """Build from per-node neighbor lists (symmetrized)."""
        rows = [i for i, nbrs in enumerate(adjacency) for _ in nbrs]
        cols = [j for nbrs in adjacency for j in nbrs]
        return cls.from_edges(len(adjacency), rows, cols)

    @property
    def n_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def adjacency_lists(self) -> list:
        return [self.neighbors(i).tolist() for i in range(self.n_nodes)]

    def directed_edges(self):
        """``(src, dst)`` for every directed edge, grouped by ``src``."""
        src = np.repeat(np.arange(self.n_nodes), self.degrees)
        return src, self.indices

    def edges(self):
        """Undirected edges ``(i, j)`` with ``i < j``, sorted lexicographically."""
        src, dst = self.directed_edges()
        keep = src < dst
        return src[keep], dst[keep]

    def to_sparse(self) -> sp.csr_matrix:
        data = np.ones(len(self.indices))
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n_nodes,) * 2)

    def n_components(self) -> int:
        return connected_components(self.to_sparse(), directed=False)[0]

    def permuted(self, perm) -> "NeighborGraph":
        """The same graph with node ``perm[i]`` renamed to ``i``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        rows, cols = self.edges()
        return NeighborGraph.from_edges(self.n_nodes, inv[rows], inv[cols])

    def check(self) -> None:
        """Raise AssertionError if symmetry or loop-freeness is violated."""
        adj = self.to_sparse()
        assert (adj != adj.T).nnz == 0, "adjacency is not symmetric"
        assert adj.diagonal().sum() == 0, "graph has self-loops"
        assert np.all(self.degrees >= 1), "graph has isolated nodes"


def _sq_dists(x, centers, candidates):
    # One formula for both search paths so the graphs agree bit for bit.
    diff = x[candidates] - x[centers][..., None, :]
    return (diff * diff).sum(-1)


def _knn_rows_brute(x, rows, k, chunk=256):
    t = x.shape[0]
    out = np.empty((len(rows), k), dtype=np.int64)
    everything = np.arange(t)
    for start in range(0, len(rows), chunk):
        block = rows[start:start + chunk]
        cand = np.broadcast_to(everything, (len(block), t))
        d2 = _sq_dists(x, block, cand)
        d2[np.arange(len(block)), block] = np.inf
        # stable sort on distance keeps lower indices first among ties
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:start + len(block)] = order[:, :k]
    return out


def _knn_tree(x, k, margin=4):
    t = x.shape[0]
    n_query = min(t, k + 1 + margin)
    _, cand = cKDTree(x).query(x, n_query)
    cand = np.asarray(cand, dtype=np.int64).reshape(t, n_query)
    rows = np.arange(t)
    d2 = _sq_dists(x, rows, cand)
    is_self = cand == rows[:, None]
    farthest = np.where(is_self, -np.inf, d2).max(axis=1) if n_query < t else np.full(t, np.inf)
    d2[is_self] = np.inf
    # row-wise lexicographic sort: distance first, then index
    key = np.argsort(cand, axis=1, kind="stable")
    cand = np.take_along_axis(cand, key, axis=1)
    d2 = np.take_along_axis(d2, key, axis=1)
    order = np.argsort(d2, axis=1, kind="stable")
    cand = np.take_along_axis(cand, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    result = cand[:, :k].copy()
    # If the k-th distance is not strictly below the farthest retrieved
    # candidate, a tie (or tree round-off) could hide a point: redo exactly.
    kth = d2[:, k - 1]
    unsafe = ~(kth < farthest * (1.0 - 1e-9))
    if np.any(unsafe):
        bad = np.flatnonzero(unsafe)
        result[bad] = _knn_rows_brute(x, bad, k)
    return result


def build_knn_graph(points, k_neighbors: int, method: str = "auto") -> NeighborGraph:
    """Symmetric kNN graph: ``i -- j`` if either is among the other's neighbors.

    Distances are Euclidean in the ambient space; ties are broken in favor of
    the lower index.  ``method`` is ``"brute"``, ``"tree"`` or ``"auto"``
    (brute force up to ``BRUTE_FORCE_MAX_POINTS`` points).  Both search paths
    return identical graphs.
    """
    x = check_points(points)
    t = x.shape[0]
    if int(k_neighbors) != k_neighbors or not 1 <= k_neighbors < t:
        raise ValueError(f"k_neighbors must satisfy 1 <= k_neighbors < t={t}, got {k_neighbors!r}")
    k_neighbors = int(k_neighbors)
    if method == "auto":
        method = "brute" if t <= BRUTE_FORCE_MAX_POINTS else "tree"
    if method == "brute":
        nbrs = _knn_rows_brute(x, np.arange(t), k_neighbors)
    elif method == "tree":
        nbrs = _knn_tree(x, k_neighbors)
    else:
        raise ValueError(f"unknown kNN method {method!r}")
    rows = np.repeat(np.arange(t), k_neighbors)
    return NeighborGraph.from_edges(t, rows, nbrs.ravel())


def sign_fix_columns(u: np.ndarray) -> np.ndarray:
    """Flip columns so that each one's largest-magnitude entry is positive.

    Works on a single matrix or a stack ``(..., n, k)``; ties in magnitude
    resolve to the first entry.
    """
    idx = np.argmax(np.abs(u), axis=-2)
    pivot = np.take_along_axis(u, idx[..., None, :], axis=-2)
    signs = np.where(pivot < 0, -1.0, 1.0)
    return u * signs


@dataclass
class TangentFrames:
    """Orthonormal local-PCA frames, ``frames[i]`` of shape ``(n, k)``."""

    frames: np.ndarray
    singular_values: list = field(default_factory=list, repr=False)
    degenerate_nodes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def k(self) -> int:
        return self.frames.shape[2]

    @property
    def n_points(self) -> int:
        return self.frames.shape[0]


def estimate_tangent_frames(points, graph: NeighborGraph, k: int) -> TangentFrames:
    """Top-``k`` left singular vectors of each point's neighbor offsets.

    Offsets are taken from the point itself (``x_j - x_i``), not from the
    neighborhood mean.  Points whose ``k``-th and ``k+1``-th singular values
    coincide to 1e-12 are listed in ``degenerate_nodes`` and a warning is
    issued; their frame is still returned.
    """
    x = check_points(points)
    t, n = x.shape
    if graph.n_nodes != t:
        raise ValueError(f"graph has {graph.n_nodes} nodes but there are {t} points")
    if int(k) != k or not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= n={n}, got {k!r}")
    deg = graph.degrees
    short = np.flatnonzero(deg < k)
    if len(short):
        i = int(short[0])
        raise InsufficientNeighborsError(
            f"insufficient neighbors: node {i} has {deg[i]} neighbors, needs at least k={k}"
        )

    frames = np.empty((t, n, k))
    svals = [None] * t
    degenerate = []
    for d in np.unique(deg):
        nodes = np.flatnonzero(deg == d)
        starts = graph.indptr[nodes]
        nbrs = graph.indices[starts[:, None] + np.arange(d)[None, :]]
        offsets = (x[nbrs] - x[nodes][:, None, :]).transpose(0, 2, 1)
        u, s, _ = np.linalg.svd(offsets, full_matrices=False)
        frames[nodes] = sign_fix_columns(u[:, :, :k])
        if s.shape[1] > k:
            gap = s[:, k - 1] - s[:, k]
            degenerate.extend(nodes[gap <= 1e-12].tolist())
        for node, row in zip(nodes, s):
            svals[node] = row
    degenerate = np.array(sorted(degenerate), dtype=np.int64)
    if len(degenerate):
        warnings.warn(
            f"{len(degenerate)} point(s) have a degenerate local spectrum at rank {k}; "
            f"first is node {degenerate[0]}",
            RuntimeWarning,
            stacklevel=2,
        )
    return TangentFrames(frames=frames, singular_values=svals, degenerate_nodes=degenerate)


def scalar_laplacian(graph: NeighborGraph) -> sp.csr_matrix:
    """Unnormalized graph Laplacian ``D - A``."""
    adj = graph.to_sparse()
    lap = sp.diags(graph.degrees.astype(float)) - adj
    return sp.csr_matrix(lap)


def laplacian_eigenmaps_embed(graph: NeighborGraph, d: int, seed=0, tol: float = 1e-10) -> np.ndarray:
    """Embed nodes with eigenvectors 2..d+1 of the scalar Laplacian.

    Columns have unit norm and the largest-magnitude-positive sign convention.
    Small graphs are solved densely; large ones with ARPACK.
    """
    t = graph.n_nodes
    if int(d) != d or not 1 <= d < t:
        raise ValueError(f"embedding dimension must satisfy 1 <= d < t={t}, got {d!r}")
    n_comp = graph.n_components()
    if n_comp != 1:
        raise DisconnectedGraphError(f"graph is disconnected ({n_comp} components)")
    lap = scalar_laplacian(graph)
    if t <= 2000 or d + 1 > t // 2:
        _, vecs = np.linalg.eigh(lap.toarray())
        vecs = vecs[:, 1:d + 1]
    else:
        from .spectral import smallest_eigenpairs

        result = smallest_eigenpairs(lap, d + 1, tol=tol, seed=seed)
        vecs = result.eigenvectors[:, 1:]
    vecs = vecs / np.linalg.norm(vecs, axis=0, keepdims=True)
    return sign_fix_columns(vecs)
