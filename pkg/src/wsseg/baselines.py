"""Unsupervised baselines given the true part count: k-means and normalized-cut clustering."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .core import PointCloud, ValidationError
from .data_io import make_rng
from .graph import AffinityGraph


@dataclass(frozen=True, eq=False)
class Clustering:
    assignment: np.ndarray
    K: int
    objective_history: List[float] = field(default_factory=list)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(features: np.ndarray, K: int, seed=0, max_iters: int = 300) -> Clustering:
    """Lloyd iterations from k-means++ seeds; stops when assignments stop changing."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if K < 1 or K > n:
        raise ValidationError(f"need 1 <= K <= N, got K={K}, N={n}")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    centers = _kmeans_pp(x, K, rng)
    assign = None
    history = []
    for _ in range(max_iters):
        d = _sq_dists(x, centers)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(K):
            members = assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                # reseed an empty cluster at the point farthest from its own centroid
                far = int(np.argmax(d[np.arange(n), assign]))
                centers[j] = x[far]
                assign = assign.copy()
                assign[far] = j
    return Clustering(assign, K, history)


def normalized_laplacian(graph: AffinityGraph) -> np.ndarray:
    """Dense D^-1/2 L D^-1/2; rows/columns of isolated vertices are left at zero."""
    d = graph.degrees
    inv = np.zeros_like(d)
    pos = d > 0
    inv[pos] = 1.0 / np.sqrt(d[pos])
    lap = graph.laplacian.toarray()
    return inv[:, None] * lap * inv[None, :]


def ncut(graph: AffinityGraph, K: int, seed=0, features: Optional[np.ndarray] = None) -> Clustering:
    """Spectral embedding from the K smallest eigenvectors, row-normalized, then k-means.

    Isolated vertices are clustered afterwards by nearest cluster centroid in ``features``.
    """
    if graph.has_negative:
        raise ValidationError("ncut needs a graph with nonnegative weights")
    n = graph.n
    if K < 1 or K > n:
        raise ValidationError(f"need 1 <= K <= N, got K={K}, N={n}")
    connected = graph.degrees > 0
    if K == 1:
        return Clustering(np.zeros(n, dtype=np.int64), 1)
    sym = normalized_laplacian(graph)
    sub = sym[np.ix_(connected, connected)]
    sub = 0.5 * (sub + sub.T)
    _, vecs = np.linalg.eigh(sub)
    emb = spectral_rows(vecs[:, :K])
    inner = kmeans(emb, K, seed)
    assign = np.zeros(n, dtype=np.int64)
    assign[connected] = inner.assignment
    if not connected.all():
        isolated = np.flatnonzero(~connected)
        warnings.warn(f"{isolated.size} isolated vertices assigned by nearest raw-feature centroid",
                      RuntimeWarning)
        if features is None:
            raise ValidationError("isolated vertices present; pass features to place them")
        f = np.asarray(features, dtype=np.float64)
        cents = np.array([f[connected][inner.assignment == j].mean(axis=0)
                          if np.any(inner.assignment == j) else np.full(f.shape[1], np.inf)
                          for j in range(K)])
        assign[isolated] = np.argmin(_sq_dists(f[isolated], cents), axis=1)
    return Clustering(assign, K, inner.objective_history)


def spectral_rows(vecs: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    out = vecs.copy()
    nz = norms[:, 0] > 0
    out[nz] /= norms[nz]
    return out


def cloud_features(cloud: PointCloud) -> np.ndarray:
    """k-means feature space: xyz, plus rgb when present."""
    return cloud.features
