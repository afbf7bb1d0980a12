"""Spectral gap, joint diagonalization, clustering, and the full pipeline."""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._validation import check_points
from .connection import assemble_connection_laplacian, connect_graph, symmetric_traceless_basis
from .graph import NeighborGraph, build_knn_graph, estimate_tangent_frames
from .spectral import eigenvector_to_fields, smallest_eigenpairs

__all__ = [
    "NoProductStructureWarning",
    "StageError",
    "GeomancerConfig",
    "Factorization",
    "detect_spectral_gap",
    "joint_diagonalize",
    "joint_diagonalize_batch",
    "cluster_simplex_corners",
    "cluster_simplex_corners_batch",
    "run_geomancer",
]

logger = logging.getLogger(__name__)

DENOMINATOR_FLOOR = 1e-14
MAX_STEP = 0.5


class NoProductStructureWarning(UserWarning):
    """The spectrum shows no gap; the manifold is treated as a single factor."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def detect_spectral_gap(eigenvalues, gamma="auto", min_ratio: float = 5.0):
    """Locate the spectral gap and infer the number of factors.

    In ``"auto"`` mode the gap sits after the eigenvalue with the largest
    ratio ``(lam[r+1] + eps) / (lam[r] + eps)``, ``eps = 1e-12 * lam[-1]``.
    When that ratio is below ``min_ratio`` no eigenvalue is far enough below
    its successor, a :class:`NoProductStructureWarning` is issued and
    ``(1, 0)`` is returned.  A numeric ``gamma`` puts the gap after every
    eigenvalue below it.

    Returns
    -------
    (m, gap_index)
        ``gap_index`` eigenvalues lie below the gap and ``m = gap_index + 1``.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.ndim != 1 or len(lam) < 2:
        raise ValueError("need at least two eigenvalues")
    if np.any(np.diff(lam) < -1e-12 * max(1.0, abs(lam[-1]))):
        raise ValueError("eigenvalues must be sorted ascending")
    if lam[0] < -1e-8 * max(1.0, abs(lam[-1])):
        raise ValueError(f"eigenvalues must be nonnegative, got {lam[0]:g}")
    lam = np.clip(lam, 0.0, None)

    if isinstance(gamma, str):
        if gamma != "auto":
            raise ValueError(f"gamma must be 'auto' or a number, got {gamma!r}")
        eps = max(1e-12 * lam[-1], np.finfo(float).tiny)
        ratios = (lam[1:] + eps) / (lam[:-1] + eps)
        r = int(np.argmax(ratios))
        if ratios[r] < min_ratio:
            warnings.warn(
                f"no product structure detected (largest eigenvalue ratio {ratios[r]:.3g} "
                f"< {min_ratio:g})",
                NoProductStructureWarning,
                stacklevel=2,
            )
            return 1, 0
        gap_index = r + 1
    else:
        gap_index = int(np.sum(lam < float(gamma)))
        if gap_index == 0:
            warnings.warn(
                f"no product structure detected (no eigenvalue below gamma={gamma:g})",
                NoProductStructureWarning,
                stacklevel=2,
            )
            return 1, 0
    return gap_index + 1, gap_index


def _offdiag_energy(c):
    diag = np.diagonal(c, axis1=-2, axis2=-1)
    return np.maximum((c * c).sum(axis=(-3, -2, -1)) - (diag * diag).sum(axis=(-2, -1)), 0.0)


def _polar(m):
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def _ffdiag_step(c):
    d = np.diagonal(c, axis1=-2, axis2=-1)  # (P, r, k)
    diff = d[..., None, :] - d[..., :, None]  # diff[p, q] = d_q - d_p
    num = (c * diff).sum(axis=-3)
    den = (diff * diff).sum(axis=-3)
    e = num / np.maximum(den, DENOMINATOR_FLOOR)
    norm = np.linalg.norm(e, axis=(-2, -1))
    scale = np.minimum(1.0, MAX_STEP / np.maximum(norm, np.finfo(float).tiny))
    return e * scale[:, None, None]


def _init_rotation(mats, init):
    p, r, k, _ = mats.shape
    if init == "identity":
        return np.broadcast_to(np.eye(k), (p, k, k)).copy()
    if init != "eig":
        raise ValueError(f"unknown init {init!r}")
    # fixed, generic weights so that ties between matrices are unlikely
    weights = 1.0 + (np.arange(1, r + 1) * 0.6180339887498949) % 1.0
    combo = np.einsum("r,prab->pab", weights, mats)
    _, vecs = np.linalg.eigh(combo)
    return vecs


def joint_diagonalize_batch(mats, tol: float = 1e-12, max_sweeps: int = 200, init: str = "eig"):
    """Orthogonal joint diagonalization of many independent families at once.

    Parameters
    ----------
    mats : array (P, r, k, k)
        ``P`` families of ``r`` symmetric matrices.
    tol : float
        Stop a family once a sweep lowers its off-diagonal energy by less than
        this fraction.
    max_sweeps : int
    init : {"eig", "identity"}
        Starting rotation: eigenvectors of a fixed generic combination of the
        family, or the identity.

    Returns
    -------
    rotations : (P, k, k) orthogonal ``W`` with ``W^T M W`` nearly diagonal
    diagonals : (P, r, k)
    residual : (P,) final off-diagonal energy
    converged : (P,) bool
    """
    mats = np.asarray(mats, dtype=float)
    if mats.ndim != 4 or mats.shape[-1] != mats.shape[-2]:
        raise ValueError("expected an array of shape (P, r, k, k)")
    asym = np.abs(mats - mats.swapaxes(-1, -2)).max() if mats.size else 0.0
    if asym > 1e-8:
        raise ValueError(f"matrices are not symmetric (max asymmetry {asym:.2e})")
    mats = 0.5 * (mats + mats.swapaxes(-1, -2))
    n_fam = mats.shape[0]

    w = _init_rotation(mats, init)
    c = np.einsum("pai,prab,pbj->prij", w, mats, w)
    energy = _offdiag_energy(c)
    scale = np.maximum((mats * mats).sum(axis=(1, 2, 3)), np.finfo(float).tiny)
    step = np.ones(n_fam)
    converged = energy <= 1e-30 * scale
    active = ~converged

    for _ in range(max_sweeps):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        e = _ffdiag_step(c[idx]) * step[idx, None, None]
        w_new = _polar(w[idx] @ (np.eye(w.shape[-1]) + e))
        c_new = np.einsum("pai,prab,pbj->prij", w_new, mats[idx], w_new)
        e_new = _offdiag_energy(c_new)
        old = energy[idx]
        accept = e_new <= old
        acc = idx[accept]
        w[acc], c[acc], energy[acc] = w_new[accept], c_new[accept], e_new[accept]
        rel = (old[accept] - e_new[accept]) / np.maximum(old[accept], np.finfo(float).tiny)
        done = (rel < tol) | (e_new[accept] <= 1e-30 * scale[acc])
        converged[acc[done]] = True
        active[acc[done]] = False
        step[acc] = np.minimum(1.0, 2.0 * step[acc])
        rej = idx[~accept]
        step[rej] *= 0.5
        stuck = rej[step[rej] < 1e-10]
        converged[stuck] = True
        active[stuck] = False

    diagonals = np.diagonal(c, axis1=-2, axis2=-1).copy()
    return w, diagonals, energy, converged


def joint_diagonalize(mats, tol: float = 1e-12, max_sweeps: int = 200, init: str = "eig"):
    """Jointly diagonalize a list of symmetric ``k x k`` matrices.

    Returns ``(W, diagonals, residual, converged)`` where ``diagonals`` is a
    list of length-``k`` vectors, one per input matrix.
    """
    mats = np.asarray(mats, dtype=float)
    if mats.ndim == 2:
        mats = mats[None]
    w, diags, energy, conv = joint_diagonalize_batch(mats[None], tol, max_sweeps, init)
    return w[0], list(diags[0]), float(energy[0]), bool(conv[0])


def cluster_simplex_corners_batch(psi, threshold: float = 0.5):
    """Group columns whose diagonal signatures point the same way.

    Parameters
    ----------
    psi : array (P, k, r)
        Row ``c`` of ``psi[p]`` is the signature of column ``c`` at point ``p``.
    threshold : float
        Columns are linked when their cosine similarity exceeds this; clusters
        are the transitive closure of the links.

    Returns
    -------
    labels : (P, k) int
        Cluster ids ``0, 1, ...`` numbered by first column; ``-1`` marks
        columns whose signature is (numerically) zero.
    margins : (P,)
        Smallest distance of any pairwise cosine from the threshold.
    """
    psi = np.asarray(psi, dtype=float)
    n_pts, k, _ = psi.shape
    norms = np.linalg.norm(psi, axis=-1)
    zero = norms < 1e-10 * np.maximum(norms.max(axis=1, keepdims=True), np.finfo(float).tiny)
    unit = psi / np.where(zero, 1.0, norms)[..., None]
    cos = np.einsum("pir,pjr->pij", unit, unit)
    live = ~zero[:, :, None] & ~zero[:, None, :]
    reach = (cos > threshold) & live
    reach |= np.eye(k, dtype=bool)[None]
    for _ in range(max(1, int(np.ceil(np.log2(max(k, 2)))))):
        reach = np.einsum("pij,pjl->pil", reach, reach) > 0

    first = np.argmax(reach, axis=2)  # smallest column index in each component
    labels = np.full((n_pts, k), -1, dtype=np.int64)
    for p in range(n_pts):
        seen = {}
        for col in range(k):
            if zero[p, col]:
                continue
            root = first[p, col]
            labels[p, col] = seen.setdefault(root, len(seen))

    gap = np.abs(cos - threshold)
    mask = live & ~np.eye(k, dtype=bool)[None]
    gap = np.where(mask, gap, np.inf)
    margins = gap.reshape(n_pts, -1).min(axis=1)
    return labels, margins


def cluster_simplex_corners(psi, threshold: float = 0.5):
    """Cluster the ``k`` signature vectors of one point; see the batch version.

    Returns ``(clusters, unassigned)`` as lists of column indices.
    """
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 1:
        psi = psi[:, None]
    labels, _ = cluster_simplex_corners_batch(psi[None], threshold)
    labels = labels[0]
    clusters = [np.flatnonzero(labels == c).tolist() for c in range(labels.max() + 1)]
    return clusters, np.flatnonzero(labels < 0).tolist()


@dataclass
class GeomancerConfig:
    """Hyperparameters of :func:`run_geomancer`.

    ``k_neighbors`` defaults to twice the manifold dimension.
    """

    k_neighbors: int | None = None
    n_eigenpairs: int = 10
    gamma: object = "auto"
    min_gap_ratio: float = 5.0
    eig_tol: float = 1e-7
    eig_max_iter: int | None = None
    ffdiag_tol: float = 1e-12
    ffdiag_max_sweeps: int = 200
    cluster_threshold: float = 0.5
    knn_method: str = "auto"
    seed: int = 0

    @classmethod
    def from_dict(cls, values: dict) -> "GeomancerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Factorization:
    """Per-point disentangled tangent subspaces.

    The subspace of cluster ``c`` at point ``i`` is spanned by the columns
    ``frames[i] @ rotations[i][:, labels[i] == c]``.
    """

    n_factors: int
    gap_index: int
    eigenvalues: np.ndarray
    frames: np.ndarray
    rotations: np.ndarray
    labels: np.ndarray
    offdiag_residual: np.ndarray
    ffdiag_converged: np.ndarray
    cluster_margin: np.ndarray
    residuals: np.ndarray = field(default=None, repr=False)

    @property
    def n_points(self) -> int:
        return self.frames.shape[0]

    @property
    def k(self) -> int:
        return self.frames.shape[2]

    @property
    def n_clusters(self) -> np.ndarray:
        return np.where(self.labels.max(axis=1) >= 0, self.labels.max(axis=1) + 1, 0)

    def ambient_rotations(self) -> np.ndarray:
        """``U_i W_i`` for every point, shape ``(t, n, k)``."""
        return np.einsum("tnk,tkl->tnl", self.frames, self.rotations)

    def subspaces(self, i: int) -> list:
        """Orthonormal ambient bases of the clusters at point ``i``."""
        cols = self.frames[i] @ self.rotations[i]
        lab = self.labels[i]
        return [cols[:, lab == c] for c in range(lab.max() + 1)]

    def dims(self, i: int) -> list:
        lab = self.labels[i]
        return [int(np.sum(lab == c)) for c in range(lab.max() + 1)]

    def summary(self) -> dict:
        shapes = {}
        for i in range(self.n_points):
            key = "x".join(str(d) for d in sorted(self.dims(i)))
            shapes[key] = shapes.get(key, 0) + 1
        return {
            "n_factors": int(self.n_factors),
            "gap_index": int(self.gap_index),
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "n_points": int(self.n_points),
            "k": int(self.k),
            "shape_counts": dict(sorted(shapes.items())),
            "ffdiag_converged_fraction": float(np.mean(self.ffdiag_converged)),
            "mean_offdiag_residual": float(np.mean(self.offdiag_residual)),
            "mean_cluster_margin": float(np.mean(self.cluster_margin[np.isfinite(self.cluster_margin)]))
            if np.any(np.isfinite(self.cluster_margin)) else None,
        }


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - relabel with the stage name
        raise StageError(name, exc) from exc


def run_geomancer(points, k: int, config: GeomancerConfig | None = None, graph: NeighborGraph | None = None,
                  return_intermediates: bool = False, spectrum=None):
    """Factor the tangent spaces of a sampled product manifold.

    Parameters
    ----------
    points : array (t, n)
    k : int
        Manifold dimension.
    config : GeomancerConfig, optional
    graph : NeighborGraph, optional
        Precomputed neighbor graph (e.g. from other coordinates of the same
        points); built from ``points`` when omitted.
    return_intermediates : bool
        Also return a dict with the graph, frames, connections, operator and
        spectrum.
    spectrum : SpectrumResult, optional
        Eigenpairs of the operator from an earlier run on the same input and
        config; skips assembly and the eigensolve.

    Returns
    -------
    Factorization, or ``(Factorization, dict)``
    """
    cfg = config or GeomancerConfig()
    x = _stage("input", check_points, points)
    t = x.shape[0]
    if int(k) != k or k < 2:
        raise StageError("input", ValueError(f"k must be an integer >= 2, got {k!r}"))
    k = int(k)
    k_nn = cfg.k_neighbors or 2 * k

    if graph is None:
        if not k <= k_nn < t:
            raise StageError("graph", ValueError(f"need k <= k_neighbors < t, got k={k}, "
                                                 f"k_neighbors={k_nn}, t={t}"))
        graph = _stage("graph", build_knn_graph, x, k_nn, cfg.knn_method)
    elif graph.n_nodes != t:
        raise StageError("graph", ValueError(f"graph has {graph.n_nodes} nodes for {t} points"))
    logger.info("graph: %d nodes, %d edges", t, graph.n_edges)

    frames = _stage("frames", estimate_tangent_frames, x, graph, k)
    conn = _stage("connection", connect_graph, graph, frames)
    basis = symmetric_traceless_basis(k)
    op = None
    if spectrum is None:
        op = _stage("laplacian", assemble_connection_laplacian, graph, conn, basis, 2)
        n_eig = min(cfg.n_eigenpairs, op.shape[0] - 1)
        spectrum = _stage("eigensolver", smallest_eigenpairs, op, n_eig, cfg.eig_tol, cfg.eig_max_iter, cfg.seed)
    elif spectrum.eigenvectors.shape[0] != t * basis.dim:
        raise StageError("eigensolver", ValueError("cached spectrum does not match the input size"))
    logger.info("eigenvalues: %s", np.array2string(spectrum.eigenvalues, precision=4))

    m, gap_index = _stage("gap", detect_spectral_gap, spectrum.eigenvalues, cfg.gamma, cfg.min_gap_ratio)

    u = frames.frames
    if gap_index == 0:
        rotations = np.broadcast_to(np.eye(k), (t, k, k)).copy()
        labels = np.zeros((t, k), dtype=np.int64)
        residual = np.zeros(t)
        converged = np.ones(t, dtype=bool)
        margins = np.full(t, np.inf)
    else:
        fields_ = eigenvector_to_fields(spectrum, basis, range(gap_index))  # (r, t, k, k)
        mats = fields_.transpose(1, 0, 2, 3)
        rotations, diagonals, residual, converged = _stage(
            "ffdiag", joint_diagonalize_batch, mats, cfg.ffdiag_tol, cfg.ffdiag_max_sweeps
        )
        psi = diagonals.transpose(0, 2, 1)  # (t, k, r)
        labels, margins = _stage("cluster", cluster_simplex_corners_batch, psi, cfg.cluster_threshold)

    fact = Factorization(
        n_factors=m,
        gap_index=gap_index,
        eigenvalues=spectrum.eigenvalues.copy(),
        frames=u,
        rotations=rotations,
        labels=labels,
        offdiag_residual=residual,
        ffdiag_converged=converged,
        cluster_margin=margins,
        residuals=spectrum.residuals.copy(),
    )
    if return_intermediates:
        extra = {"graph": graph, "frames": frames, "connections": conn, "basis": basis,
                 "operator": op, "spectrum": spectrum}
        return fact, extra
    return fact
