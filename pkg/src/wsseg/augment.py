"""Random XoY rotation plus X/Y mirroring for the Siamese branch."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PointCloud
from .data_io import make_rng


def transform_matrix(theta: float, a: int, b: int, c: int) -> np.ndarray:
    """Rotation by ``theta`` about z times the mirror/swap matrix selected by bits a, b, c."""
    rot = np.array([[np.cos(theta), -np.sin(theta), 0.0],
                    [np.sin(theta), np.cos(theta), 0.0],
                    [0.0, 0.0, 1.0]])
    sa, sb = 2 * a - 1, 2 * b - 1
    mirror = np.array([[sa * c, sb * (1 - c), 0.0],
                       [sa * (1 - c), sb * c, 0.0],
                       [0.0, 0.0, 1.0]], dtype=np.float64)
    return rot @ mirror


@dataclass(frozen=True, eq=False)
class RigidTransform:
    matrix: np.ndarray
    theta: float
    a: int
    b: int
    c: int

    @classmethod
    def from_draw(cls, theta: float, a: int, b: int, c: int) -> "RigidTransform":
        return cls(transform_matrix(theta, a, b, c), float(theta), int(a), int(b), int(c))


def sample_transform(seed) -> RigidTransform:
    """Draw theta ~ U(0, 2pi), then a, b, c ~ Bernoulli(0.5), in that order."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    theta = rng.uniform() * 2 * np.pi
    a, b, c = (int(v) for v in rng.integers(0, 2, size=3))
    return RigidTransform.from_draw(theta, a, b, c)


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Map xyz rows by x R^T; rgb and labels are untouched."""
    return cloud.replace(xyz=np.asarray(cloud.xyz) @ t.matrix.T)
