"""Shared data model: point clouds, label masks, one-hot labels and the training config."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np


class ValidationError(ValueError):
    """Bad input: wrong shape, out-of-range label, malformed file, etc."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points with xyz, optional rgb in [0, 1], and per-point labels in {0..K-1}."""

    xyz: np.ndarray
    labels: np.ndarray
    num_classes: int
    rgb: Optional[np.ndarray] = None
    category: str = "default"

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64)
        labels = np.asarray(self.labels)
        if xyz.ndim != 2 or xyz.shape[1] != 3 or xyz.shape[0] < 1:
            raise ValidationError(f"xyz must be N x 3 with N >= 1, got {xyz.shape}")
        n = xyz.shape[0]
        if labels.shape != (n,):
            raise ValidationError(f"labels must have shape ({n},), got {labels.shape}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValidationError("labels must be integers")
        labels = labels.astype(np.int64)
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        bad = np.flatnonzero((labels < 0) | (labels >= self.num_classes))
        if bad.size:
            raise ValidationError(
                f"label {labels[bad[0]]} at index {bad[0]} outside 0..{self.num_classes - 1}")
        if not np.all(np.isfinite(xyz)):
            raise ValidationError("xyz contains NaN or Inf")
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "labels", _frozen(labels))
        if self.rgb is not None:
            rgb = np.asarray(self.rgb, dtype=np.float64)
            if rgb.shape != (n, 3):
                raise ValidationError(f"rgb must be {n} x 3, got {rgb.shape}")
            if not np.all(np.isfinite(rgb)):
                raise ValidationError("rgb contains NaN or Inf")
            object.__setattr__(self, "rgb", _frozen(rgb))

    @property
    def n(self) -> int:
        return self.xyz.shape[0]

    @property
    def num_features(self) -> int:
        return 3 if self.rgb is None else 6

    @property
    def features(self) -> np.ndarray:
        """N x F feature matrix (xyz, then rgb if present)."""
        if self.rgb is None:
            return np.asarray(self.xyz)
        return np.hstack([self.xyz, self.rgb])

    def replace(self, **changes) -> "PointCloud":
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if (self.rgb is None) != (other.rgb is None):
            return False
        return (self.num_classes == other.num_classes
                and np.array_equal(self.xyz, other.xyz)
                and np.array_equal(self.labels, other.labels)
                and (self.rgb is None or np.array_equal(self.rgb, other.rgb)))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Binary supervision mask over the points of one cloud."""

    flags: np.ndarray

    def __post_init__(self):
        flags = np.asarray(self.flags).astype(bool)
        if flags.ndim != 1:
            raise ValidationError("mask flags must be one-dimensional")
        object.__setattr__(self, "flags", _frozen(flags))

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    @classmethod
    def full(cls, n: int) -> "LabelMask":
        return cls(np.ones(n, dtype=bool))

    @classmethod
    def empty(cls, n: int) -> "LabelMask":
        return cls(np.zeros(n, dtype=bool))

    @classmethod
    def from_indices(cls, n: int, idx) -> "LabelMask":
        flags = np.zeros(n, dtype=bool)
        flags[np.asarray(idx, dtype=np.int64)] = True
        return cls(flags)

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return np.array_equal(self.flags, other.flags)

    __hash__ = None


def one_hot(labels, num_classes: int) -> np.ndarray:
    """N x K float matrix with a single 1 per row at the label's column."""
    labels = np.asarray(labels, dtype=np.int64)
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise ValidationError(
            f"label {labels[bad[0]]} at index {bad[0]} outside 0..{num_classes - 1}")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def sample_level_label(onehot: np.ndarray, mask: LabelMask) -> np.ndarray:
    """Which classes appear among the labelled points (max over masked rows)."""
    if mask.count == 0:
        raise ValidationError("sample-level label needs at least one labelled point")
    return onehot[mask.flags].max(axis=0)


@dataclass(frozen=True)
class TrainConfig:
    k: int = 10
    eta: float = 1e3
    gamma: float = 1.0
    lambda_mil: float = 1.0
    lambda_sia: float = 1.0
    lambda_smo: float = 1.0
    lr: float = 1e-3
    epochs_stage1: int = 60
    epochs_stage2: int = 60
    batch_size: int = 8
    seed: int = 0
    encoder_dims: tuple = (64, 64, 128, 128)
    symmetrize: bool = True
    seg_on_augmented: bool = False
    smooth_on_softmax: bool = False
    link_constraints: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_dims", tuple(int(d) for d in self.encoder_dims))
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        for name in ("eta", "gamma", "lr"):
            if not getattr(self, name) >= 0 or (name != "lr" and getattr(self, name) == 0):
                raise ValidationError(f"{name} must be positive")
        for name in ("lambda_mil", "lambda_sia", "lambda_smo"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValidationError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if len(self.encoder_dims) != 4 or min(self.encoder_dims) < 1:
            raise ValidationError("encoder_dims needs four positive widths")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        """Parse flat ``key = value`` lines; ``#`` starts a comment."""
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(cls)}
        changes = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"config line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValidationError(f"config line {lineno}: unknown key {key!r}")
            changes[key] = parse_value(types[key], value, f"config line {lineno}")
        return dataclasses.replace(base, **changes)


def parse_value(typ, value: str, where: str = "value"):
    try:
        if typ is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is tuple:
            return tuple(int(x) for x in value.split(",") if x.strip())
        if typ is int:
            return int(value)
        return typ(value)
    except ValueError:
        raise ValidationError(f"{where}: cannot parse {value!r} as {typ.__name__}") from None
