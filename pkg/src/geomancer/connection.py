"""Discrete parallel transport and graph connection Laplacians.

Matrix fields are flattened by column stacking: entry ``(a, b)`` of a ``k x k``
matrix goes to position ``a + k * b``.  Under that convention the transport of
a matrix ``X_j`` living at node ``j`` back to node ``i``, ``Q_ij^T X_j Q_ij``,
is the linear map ``kron(Q_ij^T, Q_ij^T)``, and this is what the off-diagonal
blocks of the second-order operator hold (with a minus sign).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order

from .graph import NeighborGraph

__all__ = [
    "FrameOverlapError",
    "ConnectionGraph",
    "SymTracelessBasis",
    "BlockSparseOperator",
    "connect_frames",
    "connect_graph",
    "symmetric_traceless_basis",
    "assemble_connection_laplacian",
    "operator_matvec",
    "orient_frames",
    "polar_factor",
]

MIN_OVERLAP = 1e-8


class FrameOverlapError(ValueError):
    """Two neighboring tangent frames are (nearly) orthogonal."""


def polar_factor(m: np.ndarray) -> np.ndarray:
    """Nearest orthogonal matrix ``U V^T`` for a matrix or a stack of them."""
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def connect_frames(u_i: np.ndarray, u_j: np.ndarray, edge=None) -> np.ndarray:
    """Transport matrix from frame ``i`` to frame ``j``.

    Returns the orthogonal polar factor of ``U_j^T U_i``.  Raises
    :class:`FrameOverlapError` when the overlap is near singular.
    """
    overlap = u_j.T @ u_i
    u, s, vt = np.linalg.svd(overlap)
    if s[-1] <= MIN_OVERLAP:
        where = f" on edge {edge}" if edge is not None else ""
        raise FrameOverlapError(
            f"frame overlap degenerate{where}: smallest singular value {s[-1]:.3e}"
        )
    return u @ vt


@dataclass
class ConnectionGraph:
    """One orthogonal ``k x k`` matrix per undirected edge ``rows[e] < cols[e]``.

    ``transport(j, i)`` is served as the transpose of the stored matrix, never
    recomputed.
    """

    rows: np.ndarray
    cols: np.ndarray
    matrices: np.ndarray
    min_overlap: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self._lookup = None

    @property
    def k(self) -> int:
        return self.matrices.shape[1]

    @property
    def n_edges(self) -> int:
        return len(self.rows)

    def _index(self):
        if self._lookup is None:
            self._lookup = {(int(i), int(j)): e for e, (i, j) in enumerate(zip(self.rows, self.cols))}
        return self._lookup

    def transport(self, i: int, j: int) -> np.ndarray:
        """``Q_ij``, mapping coordinates in frame ``i`` to frame ``j``."""
        lookup = self._index()
        if i < j:
            return self.matrices[lookup[(i, j)]]
        return self.matrices[lookup[(j, i)]].T

    def regauged(self, rotations: np.ndarray) -> "ConnectionGraph":
        """Connection after replacing every frame ``U_i`` by ``U_i R_i``."""
        r = np.asarray(rotations)
        mats = np.einsum("eba,ebc,ecd->ead", r[self.cols], self.matrices, r[self.rows])
        return ConnectionGraph(self.rows.copy(), self.cols.copy(), mats, self.min_overlap)


def connect_graph(graph: NeighborGraph, frames, chunk: int = 65536) -> ConnectionGraph:
    """Transport matrices for every edge of ``graph``.

    ``frames`` is a :class:`~geomancer.graph.TangentFrames` or an array of
    shape ``(t, n, k)``.
    """
    u = getattr(frames, "frames", frames)
    if u.shape[0] != graph.n_nodes:
        raise ValueError(f"{u.shape[0]} frames for a graph with {graph.n_nodes} nodes")
    rows, cols = graph.edges()
    k = u.shape[2]
    mats = np.empty((len(rows), k, k))
    smin = np.empty(len(rows))
    for start in range(0, len(rows), chunk):
        sl = slice(start, start + chunk)
        overlap = np.einsum("eak,eal->ekl", u[cols[sl]], u[rows[sl]])
        a, s, bt = np.linalg.svd(overlap)
        mats[sl] = a @ bt
        smin[sl] = s[:, -1]
    bad = np.flatnonzero(smin <= MIN_OVERLAP)
    if len(bad):
        e = int(bad[0])
        raise FrameOverlapError(
            f"frame overlap degenerate on edge ({rows[e]}, {cols[e]}): "
            f"smallest singular value {smin[e]:.3e}"
        )
    return ConnectionGraph(rows, cols, mats, smin)


@dataclass(frozen=True)
class SymTracelessBasis:
    """Orthonormal coordinates for symmetric, trace-free ``k x k`` matrices.

    ``matrix = sym @ trace_free`` has shape ``(k*k, k(k+1)/2 - 1)``; its
    columns are column-stacked symmetric matrices with zero trace.
    """

    k: int
    sym: np.ndarray
    trace_free: np.ndarray
    matrix: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def as_tensor(self) -> np.ndarray:
        """Basis matrices as an array ``(k, k, dim)``."""
        return self.matrix.reshape(self.k, self.k, self.dim, order="F")

    def to_coords(self, mats: np.ndarray) -> np.ndarray:
        """Coordinates of ``(..., k, k)`` matrices (orthogonal projection)."""
        return np.einsum("...ab,abd->...d", mats, self.as_tensor())

    def from_coords(self, coords: np.ndarray) -> np.ndarray:
        """Matrices ``(..., k, k)`` from coordinates ``(..., dim)``."""
        return np.einsum("abd,...d->...ab", self.as_tensor(), coords)


def symmetric_traceless_basis(k: int) -> SymTracelessBasis:
    if int(k) != k or k < 2:
        raise ValueError(f"symmetric traceless basis needs k >= 2, got {k!r}")
    k = int(k)
    cols = []
    for p in range(k):
        e = np.zeros((k, k))
        e[p, p] = 1.0
        cols.append(e.ravel(order="F"))
    for p in range(k):
        for q in range(p + 1, k):
            e = np.zeros((k, k))
            e[p, q] = e[q, p] = 1.0 / np.sqrt(2.0)
            cols.append(e.ravel(order="F"))
    sym = np.array(cols).T
    n_sym = sym.shape[1]
    # Householder reflection sending the unit identity coordinate vector to e_0;
    # the other columns span its orthogonal complement.
    ident = np.zeros(n_sym)
    ident[:k] = 1.0 / np.sqrt(k)
    v = ident.copy()
    v[0] -= 1.0
    v /= np.linalg.norm(v)
    house = np.eye(n_sym) - 2.0 * np.outer(v, v)
    trace_free = house[:, 1:]
    return SymTracelessBasis(k=k, sym=sym, trace_free=trace_free, matrix=sym @ trace_free)


class BlockSparseOperator:
    """Symmetric block-sparse matrix with ``b x b`` blocks on a graph.

    Stores the diagonal blocks and one off-diagonal block per undirected edge
    ``(rows[e], cols[e])``, ``rows < cols``; block ``(cols[e], rows[e])`` is the
    transpose.  Matrix-vector products go through a cached BSR matrix whose
    rows are accumulated in a fixed order.
    """

    def __init__(self, n_nodes, block_dim, diag, rows, cols, blocks):
        self.n_nodes = int(n_nodes)
        self.block_dim = int(block_dim)
        self.diag = np.asarray(diag, dtype=float)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.blocks = np.asarray(blocks, dtype=float)
        b = self.block_dim
        if self.diag.shape != (self.n_nodes, b, b):
            raise ValueError(f"diagonal blocks have shape {self.diag.shape}")
        if self.blocks.shape != (len(self.rows), b, b) or len(self.cols) != len(self.rows):
            raise ValueError("off-diagonal blocks do not match the edge list")
        if np.any(self.rows >= self.cols):
            raise ValueError("edges must be stored with rows < cols")
        self._bsr = None

    @property
    def shape(self):
        n = self.n_nodes * self.block_dim
        return (n, n)

    @property
    def dtype(self):
        return np.dtype(float)

    def norm_bound(self) -> float:
        """Upper bound on the 2-norm (largest Gershgorin block row sum)."""
        d = np.linalg.norm(self.diag, ord=2, axis=(1, 2))
        off = np.linalg.norm(self.blocks, ord=2, axis=(1, 2)) if len(self.blocks) else np.zeros(0)
        row_sum = d.copy()
        np.add.at(row_sum, self.rows, off)
        np.add.at(row_sum, self.cols, off)
        return float(row_sum.max())

    def tobsr(self) -> sp.bsr_matrix:
        if self._bsr is None:
            t, b = self.n_nodes, self.block_dim
            nodes = np.arange(t)
            r = np.concatenate([self.rows, self.cols, nodes])
            c = np.concatenate([self.cols, self.rows, nodes])
            order = np.lexsort((c, r))
            data = np.concatenate([self.blocks, self.blocks.transpose(0, 2, 1), self.diag])[order]
            indptr = np.searchsorted(r[order], np.arange(t + 1))
            self._bsr = sp.bsr_matrix((data, c[order], indptr), shape=self.shape)
        return self._bsr

    def toarray(self) -> np.ndarray:
        return self.tobsr().toarray()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return operator_matvec(self, x)

    def __matmul__(self, x):
        return self.tobsr() @ x

    def block(self, i: int, j: int) -> np.ndarray:
        if i == j:
            return self.diag[i]
        hit = np.flatnonzero((self.rows == min(i, j)) & (self.cols == max(i, j)))
        if not len(hit):
            return np.zeros((self.block_dim, self.block_dim))
        blk = self.blocks[hit[0]]
        return blk if i < j else blk.T

    _MAGIC = b"GMBOPv1\0"

    def save(self, path) -> None:
        """Write the binary block-CSR layout (see README, "Operator file")."""
        with open(path, "wb") as fh:
            fh.write(self._MAGIC)
            fh.write(struct.pack("<IIQQ", 1, self.block_dim, self.n_nodes, len(self.rows)))
            edges = np.stack([self.rows, self.cols], axis=1).astype("<i8")
            fh.write(edges.tobytes(order="C"))
            fh.write(self.diag.astype("<f8").tobytes(order="C"))
            fh.write(self.blocks.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "BlockSparseOperator":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:8] != cls._MAGIC:
            raise ValueError(f"{path} is not a block operator file")
        version, b, t, n_edges = struct.unpack_from("<IIQQ", raw, 8)
        if version != 1:
            raise ValueError(f"unsupported operator file version {version}")
        off = 8 + struct.calcsize("<IIQQ")
        edges = np.frombuffer(raw, "<i8", 2 * n_edges, off).reshape(n_edges, 2)
        off += edges.nbytes
        diag = np.frombuffer(raw, "<f8", t * b * b, off).reshape(t, b, b)
        off += diag.nbytes
        blocks = np.frombuffer(raw, "<f8", n_edges * b * b, off).reshape(n_edges, b, b)
        return cls(t, b, diag.copy(), edges[:, 0].copy(), edges[:, 1].copy(), blocks.copy())


def operator_matvec(op: BlockSparseOperator, x) -> np.ndarray:
    """``y = L x`` for a flattened field ``x`` of length ``n_nodes * block_dim``."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != op.shape[1]:
        raise ValueError(f"vector of length {x.shape[0]} does not match operator size {op.shape[1]}")
    return op.tobsr() @ x


def _projected_blocks(q: np.ndarray, basis: SymTracelessBasis, chunk: int = 8192) -> np.ndarray:
    p = basis.as_tensor()
    out = np.empty((len(q), basis.dim, basis.dim))
    for start in range(0, len(q), chunk):
        qs = q[start:start + chunk]
        # Q^T P_b Q for every basis matrix P_b, then coordinates in the basis
        moved = np.einsum("eji,jkb,ekl->eilb", qs, p, qs, optimize=True)
        out[start:start + chunk] = -np.einsum("ila,eilb->eab", p, moved, optimize=True)
    return out


def _check_coverage(graph: NeighborGraph, connections: ConnectionGraph):
    rows, cols = graph.edges()
    if len(rows) != connections.n_edges or not (
        np.array_equal(rows, connections.rows) and np.array_equal(cols, connections.cols)
    ):
        have = set(zip(connections.rows.tolist(), connections.cols.tolist()))
        missing = [(int(i), int(j)) for i, j in zip(rows, cols) if (i, j) not in have]
        if missing:
            raise ValueError(f"no connection for edge {missing[0]} ({len(missing)} missing)")
        raise ValueError("connection edges do not match the graph edges")


def assemble_connection_laplacian(
    graph: NeighborGraph,
    connections: ConnectionGraph,
    basis: SymTracelessBasis | None = None,
    order: int = 2,
) -> BlockSparseOperator:
    """First- or second-order graph connection Laplacian.

    ``order=1`` acts on vector fields, ``(L v)_i = sum_j v_i - Q_ij^T v_j``.
    ``order=2`` acts on matrix fields, ``(L X)_i = sum_j X_i - Q_ij^T X_j Q_ij``,
    on full column-stacked ``k x k`` matrices, or, when ``basis`` is given, on
    coordinates of symmetric trace-free matrices.  Diagonal blocks are
    ``degree * I`` in every case.
    """
    _check_coverage(graph, connections)
    q = connections.matrices
    k = connections.k
    if order == 1:
        if basis is not None:
            raise ValueError("a symmetric traceless basis only applies to order 2")
        blocks = -q.transpose(0, 2, 1)
        b = k
    elif order == 2:
        if basis is None:
            qt = q.transpose(0, 2, 1)
            blocks = -np.einsum("eab,ecd->eacbd", qt, qt).reshape(len(q), k * k, k * k)
            b = k * k
        else:
            if basis.k != k:
                raise ValueError(f"basis is for k={basis.k} but connections have k={k}")
            blocks = _projected_blocks(q, basis)
            b = basis.dim
    else:
        raise ValueError(f"order must be 1 or 2, got {order!r}")
    deg = graph.degrees.astype(float)
    diag = deg[:, None, None] * np.eye(b)[None]
    return BlockSparseOperator(graph.n_nodes, b, diag, connections.rows, connections.cols, blocks)


def orient_frames(graph: NeighborGraph, frames: np.ndarray, root: int = 0) -> np.ndarray:
    """Flip the last column of frames so transports along a BFS tree are rotations.

    Returns a new ``(t, n, k)`` array.  Only the handedness of each frame is
    changed; spans are untouched.  Nodes outside ``root``'s component keep
    their orientation.
    """
    u = np.array(getattr(frames, "frames", frames), dtype=float, copy=True)
    order, pred = breadth_first_order(graph.to_sparse(), root, directed=False, return_predecessors=True)
    for node in order[1:]:
        parent = pred[node]
        if np.linalg.det(u[node].T @ u[parent]) < 0:
            u[node][:, -1] *= -1.0
    return u
