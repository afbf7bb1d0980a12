"""Synthetic product manifolds with analytic tangent subspaces.

Points are drawn uniformly from spheres ``S^n`` (unit vectors in ``R^{n+1}``)
and from the rotation groups ``SO(n)`` (orthogonal matrices with determinant
+1, flattened row-major into ``R^{n*n}``).  Sampling a product concatenates the
factor coordinates, so the tangent space of each factor lives in its own block
of ambient coordinates.

All samplers use :func:`numpy.random.default_rng` (PCG64).  A product draws its
factors from a single stream, in factor order, each factor drawing its whole
batch before the next one starts.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

__all__ = [
    "Sphere",
    "SpecialOrthogonal",
    "ManifoldSpec",
    "GroundTruth",
    "parse_spec",
    "sample_sphere",
    "sample_rotation_group",
    "sample_product",
    "sphere_tangent_basis",
    "rotation_tangent_basis",
]


@dataclass(frozen=True)
class Sphere:
    """The unit sphere ``S^n`` embedded in ``R^{n+1}``."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"Sphere dimension must be an integer >= 1, got {self.n!r}")

    @property
    def dim(self) -> int:
        return self.n

    @property
    def ambient_dim(self) -> int:
        return self.n + 1

    def __str__(self) -> str:
        return f"S{self.n}"


@dataclass(frozen=True)
class SpecialOrthogonal:
    """The rotation group ``SO(n)`` embedded in ``R^{n*n}`` (row-major)."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"SO(n) needs an integer matrix size n >= 2, got {self.n!r}")

    @property
    def dim(self) -> int:
        return self.n * (self.n - 1) // 2

    @property
    def ambient_dim(self) -> int:
        return self.n * self.n

    def __str__(self) -> str:
        return f"SO{self.n}"


FactorSpec = Union[Sphere, SpecialOrthogonal]


@dataclass(frozen=True)
class ManifoldSpec:
    """Ordered list of factors making up a product manifold."""

    factors: tuple

    def __post_init__(self):
        factors = tuple(self.factors)
        if not factors:
            raise ValueError("a manifold spec needs at least one factor")
        for f in factors:
            if not isinstance(f, (Sphere, SpecialOrthogonal)):
                raise TypeError(f"unsupported factor {f!r}")
        object.__setattr__(self, "factors", factors)

    @property
    def dims(self) -> tuple:
        return tuple(f.dim for f in self.factors)

    @property
    def dim(self) -> int:
        return sum(self.dims)

    @property
    def ambient_dim(self) -> int:
        return sum(f.ambient_dim for f in self.factors)

    def __str__(self) -> str:
        return "x".join(str(f) for f in self.factors)


_TOKEN = re.compile(r"^(SO|S)(\d+)$")


def parse_spec(text: str) -> ManifoldSpec:
    """Parse the ``S2xS3xSO3`` mini-grammar into a :class:`ManifoldSpec`."""
    if not isinstance(text, str) or not text.strip():
        raise ValueError("empty manifold spec")
    factors = []
    for token in text.strip().split("x"):
        match = _TOKEN.match(token.strip())
        if match is None:
            raise ValueError(
                f"bad factor {token!r} in manifold spec {text!r}; "
                "expected tokens like 'S2' or 'SO3' joined by 'x'"
            )
        kind, size = match.group(1), int(match.group(2))
        factors.append(Sphere(size) if kind == "S" else SpecialOrthogonal(size))
    return ManifoldSpec(tuple(factors))


@dataclass
class GroundTruth:
    """Per-point orthonormal bases of each factor's tangent space.

    ``bases[j]`` has shape ``(t, ambient_dim, dims[j])``.
    """

    bases: list
    dims: tuple

    @property
    def n_points(self) -> int:
        return self.bases[0].shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.bases[0].shape[1]

    def at(self, i: int) -> list:
        """Bases of every factor at point ``i``."""
        return [b[i] for b in self.bases]


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _check_count(count) -> int:
    if int(count) != count or count < 1:
        raise ValueError(f"count must be a positive integer, got {count!r}")
    return int(count)


def sample_sphere(n: int, count: int, seed=None) -> np.ndarray:
    """Uniform samples on ``S^n``, returned as ``(count, n + 1)`` unit rows."""
    Sphere(n)
    count = _check_count(count)
    x = _rng(seed).standard_normal((count, n + 1))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def sample_rotation_group(n: int, count: int, seed=None) -> np.ndarray:
    """Haar-uniform samples of ``SO(n)``, each flattened row-major.

    QR of a Gaussian matrix with the signs of ``diag(R)`` pushed into ``Q`` is
    Haar on ``O(n)``; flipping the first column of the reflections then gives
    Haar on ``SO(n)``.
    """
    SpecialOrthogonal(n)
    count = _check_count(count)
    g = _rng(seed).standard_normal((count, n, n))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diagonal(r, axis1=1, axis2=2))
    signs[signs == 0] = 1.0
    q = q * signs[:, None, :]
    flip = np.linalg.det(q) < 0
    q[flip, :, 0] *= -1.0
    return q.reshape(count, n * n)


def sphere_tangent_basis(x: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``x^perp`` for each unit row of ``x``.

    Uses the Householder reflection that sends ``x`` to a multiple of ``e_0``;
    its remaining columns span the orthogonal complement.  Returns an array of
    shape ``(t, n + 1, n)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t, p = x.shape
    v = x.copy()
    sign = np.where(x[:, 0] >= 0, 1.0, -1.0)
    v[:, 0] += sign
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    h = np.eye(p)[None] - 2.0 * v[:, :, None] * v[:, None, :]
    return h[:, :, 1:]


def _skew_generators(n: int) -> np.ndarray:
    gens = []
    for i in range(n):
        for j in range(i + 1, n):
            a = np.zeros((n, n))
            a[i, j] = 1.0
            a[j, i] = -1.0
            gens.append(a / np.sqrt(2.0))
    return np.array(gens)


def rotation_tangent_basis(q: np.ndarray) -> np.ndarray:
    """Tangent basis of ``SO(n)`` at each flattened rotation in ``q``.

    Column ``(i, j)`` is ``Q A_ij`` flattened row-major, with ``A_ij`` the
    normalized skew generator ``(e_i e_j^T - e_j e_i^T) / sqrt(2)``, ``i < j``.
    Returns shape ``(t, n*n, n(n-1)/2)``.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    t, nn = q.shape
    n = int(round(np.sqrt(nn)))
    if n * n != nn:
        raise ValueError(f"row length {nn} is not a square")
    mats = q.reshape(t, n, n)
    gens = _skew_generators(n)
    # (t, g, n, n) -> (t, n*n, g)
    prod = np.einsum("tab,gbc->tgac", mats, gens)
    return prod.reshape(t, len(gens), nn).transpose(0, 2, 1)


def sample_product(spec, count: int, seed=None):
    """Sample a product manifold and its analytic tangent subspaces.

    Parameters
    ----------
    spec : ManifoldSpec or str
        Factors to sample, e.g. ``parse_spec("S2xS3")``.
    count : int
        Number of points.
    seed : int, Generator or None
        One stream is shared by all factors, consumed in factor order.

    Returns
    -------
    points : ndarray of shape (count, spec.ambient_dim)
    truth : GroundTruth
    """
    if isinstance(spec, str):
        spec = parse_spec(spec)
    count = _check_count(count)
    rng = _rng(seed)
    blocks, local_bases = [], []
    for factor in spec.factors:
        if isinstance(factor, Sphere):
            x = sample_sphere(factor.n, count, rng)
            local_bases.append(sphere_tangent_basis(x))
        else:
            x = sample_rotation_group(factor.n, count, rng)
            local_bases.append(rotation_tangent_basis(x))
        blocks.append(x)
    points = np.hstack(blocks)

    n_amb = spec.ambient_dim
    bases = []
    offset = 0
    for factor, local in zip(spec.factors, local_bases):
        full = np.zeros((count, n_amb, factor.dim))
        full[:, offset:offset + factor.ambient_dim, :] = local
        bases.append(full)
        offset += factor.ambient_dim
    return points, GroundTruth(bases=bases, dims=spec.dims)
