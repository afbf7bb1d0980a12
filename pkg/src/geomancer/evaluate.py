"""Accuracy of recovered subspaces against ground truth."""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from ._validation import check_orthonormal
from .connection import polar_factor
from .graph import NeighborGraph

__all__ = [
    "ErrorReport",
    "principal_angles",
    "largest_angle",
    "estimated_subspaces",
    "disentangling_error",
    "shape_accuracy",
    "chance_baseline",
    "align_to_ground_truth",
]

HALF_PI = math.pi / 2
EXACT_PERMUTATION_MAX = 8


def _angles_from(a, b):
    # cosines lose precision near 0 and sines near pi/2; use each where it is accurate
    if a.shape[-1] < b.shape[-1]:
        a, b = b, a
    cross = np.swapaxes(a, -1, -2) @ b
    cos = np.linalg.svd(cross, compute_uv=False)[..., ::-1]  # ascending -> largest angle first
    sin = np.linalg.svd(b - a @ cross, compute_uv=False)  # descending
    return np.where(cos < np.sqrt(0.5), np.arccos(np.clip(cos, 0.0, 1.0)), np.arcsin(np.clip(sin, 0.0, 1.0)))


def principal_angles(a, b) -> np.ndarray:
    """Principal angles between ``span(a)`` and ``span(b)``, largest first.

    Both inputs need orthonormal columns (checked to 1e-6).  There are
    ``min(p, q)`` angles.  Small angles come from sines and large ones from
    cosines so both ends are accurate.
    """
    a = check_orthonormal(a, name="A")
    b = check_orthonormal(b, name="B")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"bases live in different spaces ({a.shape[0]} vs {b.shape[0]})")
    return _angles_from(a, b)


def largest_angle(a, b) -> float:
    """Largest principal angle, or pi/2 when the dimensions differ."""
    if a.shape[1] != b.shape[1]:
        return HALF_PI
    return float(principal_angles(a, b)[0])


def _batched_largest_angle(a, b):
    # a, b: (N, n, d) orthonormal stacks of equal d
    return _angles_from(a, b)[:, 0]


def _best_matching(cost: np.ndarray) -> float:
    m = cost.shape[0]
    if m <= EXACT_PERMUTATION_MAX:
        best = math.inf
        for perm in itertools.permutations(range(m)):
            best = min(best, sum(cost[j, perm[j]] for j in range(m)))
        return best / m
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum()) / m


def estimated_subspaces(fact, latent_frames=None, alignment=None) -> list:
    """Per-point lists of ambient bases from a factorization.

    With ``latent_frames`` (``(t, n_z, k)``) and ``alignment`` (``(t, k, k)``)
    the subspaces are carried into latent coordinates as
    ``U_z A W[:, cluster]`` instead of ``U_x W[:, cluster]``.
    """
    out = []
    for i in range(fact.n_points):
        if alignment is None:
            cols = fact.frames[i] @ fact.rotations[i]
        else:
            cols = latent_frames[i] @ alignment[i] @ fact.rotations[i]
        lab = fact.labels[i]
        out.append([cols[:, lab == c] for c in range(lab.max() + 1)])
    return out


@dataclass
class ErrorReport:
    """Disentangling error summary; angles in radians."""

    mean_error: float
    per_point: np.ndarray = field(repr=False)
    per_point_std: float
    shape_accuracy: float
    n_excluded: int
    n_points: int
    chance_mean: float | None = None
    chance_std: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_point")
        return {key: (None if isinstance(v, float) and not math.isfinite(v) else v) for key, v in d.items()}


def _truth_lists(truth):
    bases = getattr(truth, "bases", truth)
    t = bases[0].shape[0]
    return [[b[i] for b in bases] for i in range(t)], [b.shape[2] for b in bases]


def _dims_match(est, truth_dims):
    return sorted(b.shape[1] for b in est) == sorted(truth_dims)


def disentangling_error(fact, truth, excluded=None, chance=None) -> ErrorReport:
    """Mean over points of the best-permutation mean largest principal angle.

    ``fact`` is a :class:`~geomancer.factorize.Factorization` or a per-point
    list of subspace bases (see :func:`estimated_subspaces`).  Points whose
    subspace dimensions do not match the truth are excluded from the mean but
    counted in ``shape_accuracy``; ``excluded`` (bool mask) drops further
    points, e.g. ones that could not be aligned.
    """
    est = estimated_subspaces(fact) if hasattr(fact, "labels") else fact
    truth_sets, truth_dims = _truth_lists(truth)
    if len(est) != len(truth_sets):
        raise ValueError(f"{len(est)} estimated points but {len(truth_sets)} ground-truth points")
    t = len(est)
    per_point = np.full(t, np.nan)
    good_shape = np.zeros(t, dtype=bool)
    skip = np.zeros(t, dtype=bool) if excluded is None else np.asarray(excluded, dtype=bool)
    for i in range(t):
        if not _dims_match(est[i], truth_dims):
            continue
        good_shape[i] = True
        if skip[i]:
            continue
        tr, es = truth_sets[i], est[i]
        cost = np.array([[largest_angle(a, b) for b in es] for a in tr])
        per_point[i] = _best_matching(cost)
    valid = per_point[np.isfinite(per_point)]
    mean = float(valid.mean()) if len(valid) else math.nan
    std = float(valid.std()) if len(valid) else math.nan
    c_mean, c_std = chance if chance is not None else (None, None)
    return ErrorReport(
        mean_error=mean,
        per_point=per_point,
        per_point_std=std,
        shape_accuracy=float(good_shape.mean()),
        n_excluded=int(t - len(valid)),
        n_points=t,
        chance_mean=c_mean,
        chance_std=c_std,
    )


def shape_accuracy(fact, truth_dims) -> float:
    """Fraction of points whose multiset of subspace dimensions equals ``truth_dims``."""
    target = sorted(int(d) for d in truth_dims)
    if hasattr(fact, "labels"):
        hits = [sorted(fact.dims(i)) == target for i in range(fact.n_points)]
    else:
        hits = [sorted(b.shape[1] for b in pt) == target for pt in fact]
    return float(np.mean(hits)) if hits else 0.0


def _haar_orthogonal(rng, n_samples, k):
    g = rng.standard_normal((n_samples, k, k))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]


def _split(q, dims):
    out, start = [], 0
    for d in dims:
        out.append(q[:, :, start:start + d])
        start += d
    return out


def chance_baseline(k: int, dims, n_samples: int = 10000, seed=0, rotation=None):
    """Monte-Carlo disentangling error of random subspace splits.

    Two independent Haar rotations of ``R^k`` are split into blocks of sizes
    ``dims``; each pair is scored like one point of
    :func:`disentangling_error`.  ``rotation`` optionally rotates the first
    split.  Returns ``(mean, std)`` over samples.
    """
    dims = [int(d) for d in dims]
    if sum(dims) > k or min(dims) < 1:
        raise ValueError(f"dims {dims} do not fit in dimension {k}")
    rng = np.random.default_rng(seed)
    est = _split(_haar_orthogonal(rng, n_samples, k), dims)
    tru = _split(_haar_orthogonal(rng, n_samples, k), dims)
    if rotation is not None:
        est = [np.einsum("ab,nbd->nad", rotation, e) for e in est]
    m = len(dims)
    cost = np.full((n_samples, m, m), HALF_PI)
    for j in range(m):
        for c in range(m):
            if dims[j] == dims[c]:
                cost[:, j, c] = _batched_largest_angle(tru[j], est[c])
    best = np.full(n_samples, np.inf)
    if m <= EXACT_PERMUTATION_MAX:
        for perm in itertools.permutations(range(m)):
            total = sum(cost[:, j, perm[j]] for j in range(m))
            best = np.minimum(best, total / m)
    else:
        best = np.array([_best_matching(c) for c in cost])
    return float(best.mean()), float(best.std())


def align_to_ground_truth(latent_points, latent_frames, data_points, data_frames, graph: NeighborGraph,
                          min_eig: float = 1e-10):
    """Per-point rotation taking data-frame coordinates to latent-frame coordinates.

    For point ``i`` the neighbor offsets are expressed in each frame
    (rows ``V_z``, ``V_x``), whitened by their Gram matrices, and the polar
    factor of ``(V_z^T V_z)^{-1/2} V_z^T V_x (V_x^T V_x)^{-1/2}`` is returned.
    A point whose Gram matrix has smallest eigenvalue below ``min_eig`` times
    its largest is flagged invalid and gets the identity.

    Returns
    -------
    alignment : (t, k, k)
    valid : (t,) bool
    """
    z = np.asarray(latent_points, dtype=float)
    x = np.asarray(data_points, dtype=float)
    uz = np.asarray(getattr(latent_frames, "frames", latent_frames), dtype=float)
    ux = np.asarray(getattr(data_frames, "frames", data_frames), dtype=float)
    t = graph.n_nodes
    if not (len(z) == len(x) == len(uz) == len(ux) == t):
        raise ValueError("points, frames and graph disagree on the number of points")
    if uz.shape[2] != ux.shape[2]:
        raise ValueError("latent and data frames have different dimensions")
    k = uz.shape[2]
    out = np.broadcast_to(np.eye(k), (t, k, k)).copy()
    valid = np.zeros(t, dtype=bool)
    deg = graph.degrees
    for d in np.unique(deg):
        nodes = np.flatnonzero(deg == d)
        nbrs = graph.indices[graph.indptr[nodes][:, None] + np.arange(d)[None, :]]
        vz = np.einsum("pjn,pnk->pjk", z[nbrs] - z[nodes][:, None, :], uz[nodes])
        vx = np.einsum("pjn,pnk->pjk", x[nbrs] - x[nodes][:, None, :], ux[nodes])
        gz = np.einsum("pja,pjb->pab", vz, vz)
        gx = np.einsum("pja,pjb->pab", vx, vx)
        ez, qz = np.linalg.eigh(gz)
        ex, qx = np.linalg.eigh(gx)
        ok = (ez[:, 0] > min_eig * ez[:, -1]) & (ex[:, 0] > min_eig * ex[:, -1]) & (ez[:, -1] > 0) & (ex[:, -1] > 0)
        if not np.any(ok):
            continue
        nodes, vz, vx, ez, qz, ex, qx = (a[ok] for a in (nodes, vz, vx, ez, qz, ex, qx))
        wz = np.einsum("pab,pb,pcb->pac", qz, 1.0 / np.sqrt(ez), qz)
        wx = np.einsum("pab,pb,pcb->pac", qx, 1.0 / np.sqrt(ex), qx)
        cross = np.einsum("pja,pjb->pab", vz, vx)
        out[nodes] = polar_factor(wz @ cross @ wx)
        valid[nodes] = True
    return out, valid
