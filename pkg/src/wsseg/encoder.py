"""PointNet-style per-point encoder with hand-written reverse-mode gradients.

Layout (widths ``d1, d2, d3, d4``)::

    x (F) -> relu(d1) -> relu(d2) -> relu(d3) -> max over points -> g (d3)
    [g, h2] (d3 + d2) -> relu(d4) -> linear(K)

Inputs are standardized per cloud: xyz minus its centroid, divided by the
largest centroid distance. rgb is passed through unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .core import PointCloud, ValidationError
from .data_io import make_rng


@dataclass(eq=False)
class EncoderParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    num_features: int
    num_classes: int
    dims: tuple = (64, 64, 128, 128)
    seed: int = 0

    def layer_shapes(self):
        d1, d2, d3, d4 = self.dims
        f, k = self.num_features, self.num_classes
        return [(f, d1), (d1, d2), (d2, d3), (d3 + d2, d4), (d4, k)]

    def arrays(self) -> List[np.ndarray]:
        """Parameters in canonical order: W1, b1, ..., W5, b5."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @property
    def size(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_shapes())

    def with_flat(self, vec: np.ndarray) -> "EncoderParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValidationError(f"expected {self.size} parameters, got {vec.size}")
        ws, bs, pos = [], [], 0
        for (fi, fo) in self.layer_shapes():
            ws.append(vec[pos:pos + fi * fo].reshape(fi, fo).copy())
            pos += fi * fo
            bs.append(vec[pos:pos + fo].copy())
            pos += fo
        return EncoderParams(ws, bs, self.num_features, self.num_classes, self.dims, self.seed)

    def copy(self) -> "EncoderParams":
        return self.with_flat(self.flat())

    def equals(self, other: "EncoderParams") -> bool:
        return (self.dims == other.dims and self.num_features == other.num_features
                and self.num_classes == other.num_classes
                and np.array_equal(self.flat(), other.flat()))

    # checkpoint: header lines then one value per line at 17 significant digits
    def save(self, path) -> None:
        lines = [
            "wsseg-encoder 1",
            "dims " + " ".join(str(d) for d in self.dims),
            f"features {self.num_features}",
            f"classes {self.num_classes}",
            f"seed {self.seed}",
            f"count {self.size}",
        ]
        lines += ["%.17g" % v for v in self.flat()]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "EncoderParams":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        try:
            if lines[0].split() != ["wsseg-encoder", "1"]:
                raise ValueError
            head = {}
            for ln in lines[1:6]:
                key, *vals = ln.split()
                head[key] = vals
            dims = tuple(int(v) for v in head["dims"])
            f, k = int(head["features"][0]), int(head["classes"][0])
            seed, count = int(head["seed"][0]), int(head["count"][0])
            vec = np.array([float(v) for v in lines[6:6 + count]])
        except (ValueError, KeyError, IndexError):
            raise ValidationError(f"{path}: malformed checkpoint") from None
        if vec.size != count:
            raise ValidationError(f"{path}: expected {count} values, found {vec.size}")
        template = EncoderParams([], [], f, k, dims, seed)
        return template.with_flat(vec)


def init_params(seed, num_features: int, num_classes: int,
                dims: Sequence[int] = (64, 64, 128, 128)) -> EncoderParams:
    """Glorot-uniform weights, limit sqrt(6 / (fan_in + fan_out)); zero biases."""
    if num_features not in (3, 6):
        raise ValidationError(f"num_features must be 3 or 6, got {num_features}")
    rng = make_rng(seed)
    p = EncoderParams([], [], num_features, num_classes, tuple(int(d) for d in dims), int(seed))
    for fi, fo in p.layer_shapes():
        lim = np.sqrt(6.0 / (fi + fo))
        p.weights.append(rng.uniform(-lim, lim, (fi, fo)))
        p.biases.append(np.zeros(fo))
    return p


def standardize(cloud: PointCloud) -> np.ndarray:
    xyz = np.asarray(cloud.xyz)
    centered = xyz - xyz.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    if radius > 0:
        centered = centered / radius
    if cloud.rgb is None:
        return centered
    return np.hstack([centered, cloud.rgb])


def _relu(a):
    return np.maximum(a, 0.0)


@dataclass
class _Record:
    x: np.ndarray
    a: list
    h: list
    cat: np.ndarray
    argmax: np.ndarray


def _forward(params: EncoderParams, x: np.ndarray):
    W, b = params.weights, params.biases
    a1 = x @ W[0] + b[0]
    h1 = _relu(a1)
    a2 = h1 @ W[1] + b[1]
    h2 = _relu(a2)
    a3 = h2 @ W[2] + b[2]
    h3 = _relu(a3)
    am = np.argmax(h3, axis=0)  # first maximum on ties
    g = h3[am, np.arange(h3.shape[1])]
    cat = np.hstack([np.broadcast_to(g, (x.shape[0], g.size)), h2])
    a4 = cat @ W[3] + b[3]
    h4 = _relu(a4)
    z = h4 @ W[4] + b[4]
    return z, _Record(x, [a1, a2, a3, a4], [h1, h2, h3, h4], cat, am)


def forward(params: EncoderParams, cloud: PointCloud) -> np.ndarray:
    """N x K logits for one cloud."""
    _check(params, cloud)
    return _forward(params, standardize(cloud))[0]


def _check(params: EncoderParams, cloud: PointCloud):
    if cloud.num_features != params.num_features:
        raise ValidationError(
            f"cloud has {cloud.num_features} features, encoder expects {params.num_features}")
    if cloud.num_classes != params.num_classes:
        raise ValidationError(
            f"cloud has K={cloud.num_classes}, encoder outputs {params.num_classes}")


class Tape:
    """Records forward passes so their logit gradients can be pulled back to the parameters.

    Gradients from every recorded pass accumulate, which is what a Siamese pair
    with shared weights needs.
    """

    def __init__(self, params: EncoderParams):
        self.params = params
        self._records: List[_Record] = []

    def __len__(self):
        return len(self._records)

    def forward(self, cloud: PointCloud) -> np.ndarray:
        _check(self.params, cloud)
        z, rec = _forward(self.params, standardize(cloud))
        self._records.append(rec)
        return z

    def backward(self, logit_grads: Sequence[Optional[np.ndarray]], seed: float = 1.0) -> EncoderParams:
        """d(loss)/d(params) given d(loss)/d(logits) for each recorded pass (None = no gradient)."""
        if not self._records:
            raise RuntimeError("backward called before any forward pass was recorded")
        if len(logit_grads) != len(self._records):
            raise ValidationError(
                f"{len(self._records)} forward passes recorded, {len(logit_grads)} gradients given")
        p = self.params
        gw = [np.zeros_like(w) for w in p.weights]
        gb = [np.zeros_like(b) for b in p.biases]
        for rec, dz in zip(self._records, logit_grads):
            if dz is None:
                continue
            _backward_one(p, rec, seed * np.asarray(dz, dtype=np.float64), gw, gb)
        return EncoderParams(gw, gb, p.num_features, p.num_classes, p.dims, p.seed)


def _backward_one(p: EncoderParams, rec: _Record, dz, gw, gb):
    W = p.weights
    a1, a2, a3, a4 = rec.a
    h1, h2, h3, h4 = rec.h
    d3 = p.dims[2]
    gw[4] += h4.T @ dz
    gb[4] += dz.sum(axis=0)
    da4 = (dz @ W[4].T) * (a4 > 0)
    gw[3] += rec.cat.T @ da4
    gb[3] += da4.sum(axis=0)
    dcat = da4 @ W[3].T
    dg = dcat[:, :d3].sum(axis=0)
    dh2 = dcat[:, d3:].copy()
    dh3 = np.zeros_like(h3)
    dh3[rec.argmax, np.arange(d3)] = dg
    da3 = dh3 * (a3 > 0)
    gw[2] += h2.T @ da3
    gb[2] += da3.sum(axis=0)
    dh2 += da3 @ W[2].T
    da2 = dh2 * (a2 > 0)
    gw[1] += h1.T @ da2
    gb[1] += da2.sum(axis=0)
    da1 = (da2 @ W[1].T) * (a1 > 0)
    gw[0] += rec.x.T @ da1
    gb[0] += da1.sum(axis=0)


def add_grads(a: EncoderParams, b: EncoderParams) -> EncoderParams:
    return EncoderParams([x + y for x, y in zip(a.weights, b.weights)],
                         [x + y for x, y in zip(a.biases, b.biases)],
                         a.num_features, a.num_classes, a.dims, a.seed)


def sgd_step(params: EncoderParams, grads: EncoderParams, lr: float) -> EncoderParams:
    return EncoderParams([w - lr * g for w, g in zip(params.weights, grads.weights)],
                         [b - lr * g for b, g in zip(params.biases, grads.biases)],
                         params.num_features, params.num_classes, params.dims, params.seed)
