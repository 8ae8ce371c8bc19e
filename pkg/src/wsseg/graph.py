"""Spatial/color k-NN affinity graphs and their Laplacians."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .core import LabelMask, PointCloud, ValidationError


@dataclass(frozen=True)
class GraphParams:
    k: int = 10
    eta: float = 1e3
    symmetrize: bool = True
    use_rgb: Optional[bool] = None  # None: use rgb whenever the cloud has it

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if not self.eta > 0:
            raise ValidationError("eta must be positive")


@dataclass(frozen=True, eq=False)
class AffinityGraph:
    """Sparse weights W (zero diagonal), degrees d = W 1 and Laplacian L = D - W."""

    weights: sp.csr_matrix

    def __post_init__(self):
        w = sp.csr_matrix(self.weights, dtype=np.float64)
        w.setdiag(0.0)
        w.eliminate_zeros()
        w.sort_indices()
        object.__setattr__(self, "weights", w)
        d = np.asarray(w.sum(axis=1)).ravel()
        object.__setattr__(self, "degrees", d)
        lap = (sp.diags(d) - w).tocsr()
        lap.sort_indices()
        object.__setattr__(self, "laplacian", lap)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def nnz(self) -> int:
        return int(self.weights.nnz)

    @property
    def has_negative(self) -> bool:
        return bool(self.weights.nnz and self.weights.data.min() < 0)

    @property
    def is_symmetric(self) -> bool:
        return (self.weights != self.weights.T).nnz == 0

    @classmethod
    def empty(cls, n: int) -> "AffinityGraph":
        return cls(sp.csr_matrix((n, n)))

    def dump(self, path) -> None:
        """Triplet text: header ``N nnz`` then ``i j w`` per stored entry."""
        coo = self.weights.tocoo()
        lines = [f"{self.n} {self.nnz}"]
        lines += [f"{i} {j} {w:.17g}" for i, j, w in zip(coo.row, coo.col, coo.data)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def _channel(cloud: PointCloud, channel: str) -> np.ndarray:
    if channel == "xyz":
        return np.asarray(cloud.xyz)
    if channel == "rgb":
        if cloud.rgb is None:
            raise ValidationError("rgb channel requested but the cloud has no rgb")
        return np.asarray(cloud.rgb)
    raise ValidationError(f"unknown channel {channel!r}")


def pairwise_distance(cloud: PointCloud, channel: str = "xyz") -> np.ndarray:
    """Dense N x N Euclidean (not squared) distances on one channel."""
    x = _channel(cloud, channel)
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _knn_matrix(dist: np.ndarray, k: int, eta: float) -> sp.csr_matrix:
    n = dist.shape[0]
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    # stable sort: equal distances resolve to the lower index
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    cols = nbrs.ravel()
    vals = np.exp(-dist[rows, cols] / eta)
    w = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return w


def knn_weights(cloud: PointCloud, params: GraphParams = GraphParams()) -> AffinityGraph:
    """k-NN graph with w_ij = exp(-p_ij / eta); xyz and rgb kernels are summed."""
    n = cloud.n
    if params.k >= n:
        raise ValidationError(f"k={params.k} must be smaller than N={n}")
    channels = ["xyz"]
    use_rgb = cloud.rgb is not None if params.use_rgb is None else params.use_rgb
    if use_rgb:
        channels.append("rgb")
    total = sp.csr_matrix((n, n))
    for ch in channels:
        w = _knn_matrix(pairwise_distance(cloud, ch), params.k, params.eta)
        if params.symmetrize:
            w = w.maximum(w.T)
        total = total + w
    return AffinityGraph(total.tocsr())


def apply_link_constraints(graph: AffinityGraph, mask: LabelMask, labels) -> AffinityGraph:
    """Overwrite every labelled pair with +1 (same class) or -1 (different class)."""
    idx = mask.indices
    if idx.size < 2:
        return graph
    labels = np.asarray(labels)[idx]
    block = np.where(labels[:, None] == labels[None, :], 1.0, -1.0)
    np.fill_diagonal(block, 0.0)
    n = graph.n
    sel = sp.csr_matrix((np.ones(idx.size), (idx, idx)), shape=(n, n))
    w = graph.weights
    # drop the old entries on labelled pairs, then add the constraint block
    keep = w - sel @ w @ sel
    ii, jj = np.meshgrid(idx, idx, indexing="ij")
    off = ~np.eye(idx.size, dtype=bool)
    cons = sp.csr_matrix((block[off], (ii[off], jj[off])), shape=(n, n))
    return AffinityGraph((keep + cons).tocsr())


def build_graph(cloud: PointCloud, params: GraphParams, mask: Optional[LabelMask] = None) -> AffinityGraph:
    g = knn_weights(cloud, params)
    if mask is not None:
        g = apply_link_constraints(g, mask, cloud.labels)
    return g
