"""File formats, synthetic part-labelled shapes, and weak-label mask samplers.

Randomness: every draw goes through ``numpy.random.Generator`` (PCG64) seeded
from a ``SeedSequence``; per-item streams use the entropy pair ``(seed, index)``
so shapes and masks can be produced in any order or in parallel.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .core import LabelMask, PointCloud, ValidationError

FAMILIES = {"barbell": 3, "table": 2, "rocket": 3}
MANIFEST = "manifest.txt"


def make_rng(seed, *stream) -> np.random.Generator:
    """PCG64 generator for ``seed`` and an optional stream id (e.g. a shape index)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) for s in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------- text formats

def _fmt(x: float) -> str:
    return "%.17g" % x


def save_cloud(cloud: PointCloud, path, labels=None) -> None:
    """Write ``N F K`` then one row per point. ``labels`` overrides the stored labels
    (prediction files may carry -1 for unknown)."""
    labels = cloud.labels if labels is None else np.asarray(labels, dtype=np.int64)
    feats = cloud.features
    lines = [f"{cloud.n} {feats.shape[1]} {cloud.num_classes}"]
    for row, lab in zip(feats, labels):
        lines.append(" ".join(_fmt(v) for v in row) + f" {int(lab)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_table(path, allow_unknown: bool):
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines()]
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise ValidationError(f"{path}: line 1: empty file")
    head = lines[0].split()
    try:
        if len(head) != 3:
            raise ValueError
        n, f, k = (int(t) for t in head)
    except ValueError:
        raise ValidationError(f"{path}: line 1: header must be 'N F K'") from None
    if n < 1 or f not in (3, 6) or k < 1:
        raise ValidationError(f"{path}: line 1: need N >= 1, F in {{3,6}}, K >= 1")
    body = lines[1:]
    if len(body) != n:
        raise ValidationError(f"{path}: expected {n} rows, found {len(body)}")
    feats = np.empty((n, f))
    labels = np.empty(n, dtype=np.int64)
    for i, ln in enumerate(body):
        toks = ln.split()
        lineno = i + 2
        if len(toks) != f + 1:
            raise ValidationError(f"{path}: line {lineno}: expected {f + 1} columns, got {len(toks)}")
        try:
            vals = [float(t) for t in toks[:f]]
            lab = int(toks[f])
        except ValueError:
            raise ValidationError(f"{path}: line {lineno}: cannot parse row") from None
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"{path}: line {lineno}: non-finite value")
        lo = -1 if allow_unknown else 0
        if not lo <= lab < k:
            raise ValidationError(f"{path}: line {lineno}: label {lab} outside {lo}..{k - 1}")
        feats[i] = vals
        labels[i] = lab
    return feats, labels, k


def load_cloud(path, category: str = "default") -> PointCloud:
    feats, labels, k = _read_table(path, allow_unknown=False)
    rgb = feats[:, 3:] if feats.shape[1] == 6 else None
    return PointCloud(xyz=feats[:, :3], rgb=rgb, labels=labels, num_classes=k, category=category)


def load_predictions(path) -> Tuple[np.ndarray, np.ndarray, int]:
    """Prediction file in cloud format: returns (features, labels with -1 = unknown, K)."""
    return _read_table(path, allow_unknown=True)


def save_logits(logits: np.ndarray, path) -> None:
    n, k = logits.shape
    lines = [f"{n} {k}"] + [" ".join(_fmt(v) for v in row) for row in logits]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_logits(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValidationError(f"{path}: line 1: empty file")
    try:
        n, k = (int(t) for t in lines[0].split())
    except ValueError:
        raise ValidationError(f"{path}: line 1: header must be 'N K'") from None
    if len(lines) - 1 != n:
        raise ValidationError(f"{path}: expected {n} rows, found {len(lines) - 1}")
    out = np.empty((n, k))
    for i, ln in enumerate(lines[1:]):
        toks = ln.split()
        if len(toks) != k:
            raise ValidationError(f"{path}: line {i + 2}: expected {k} columns, got {len(toks)}")
        try:
            out[i] = [float(t) for t in toks]
        except ValueError:
            raise ValidationError(f"{path}: line {i + 2}: cannot parse row") from None
    if not np.all(np.isfinite(out)):
        raise ValidationError(f"{path}: non-finite logit")
    return out


def write_metrics(path, metrics: dict) -> None:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, np.generic):
            return clean(v.item())
        return v
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(clean(metrics), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_dataset(clouds: Sequence[PointCloud], directory, prefix: str = "cloud") -> Path:
    """Write each cloud plus a manifest (``file category`` per line); returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, c in enumerate(clouds):
        name = f"{prefix}_{i:04d}.txt"
        save_cloud(c, directory / name)
        entries.append(f"{name} {c.category}")
    manifest = directory / MANIFEST
    manifest.write_text("\n".join(entries) + "\n", encoding="utf-8")
    return manifest


def load_dataset(directory) -> List[PointCloud]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise ValidationError(f"{directory}: no {MANIFEST}")
    clouds = []
    for lineno, ln in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        toks = ln.split()
        if not toks:
            continue
        category = toks[1] if len(toks) > 1 else "default"
        clouds.append(load_cloud(directory / toks[0], category=category))
    if not clouds:
        raise ValidationError(f"{manifest}: empty dataset")
    ks = {c.num_classes for c in clouds}
    if len(ks) != 1:
        raise ValidationError(f"{directory}: clouds disagree on K: {sorted(ks)}")
    return clouds


# ---------------------------------------------------------------- synthetic shapes

@dataclass(frozen=True)
class SyntheticSpec:
    shape_family: str = "barbell"
    points_per_shape: int = 256
    num_shapes: int = 32
    jitter_sigma: float = 0.0
    seed: int = 0
    color: bool = False

    def __post_init__(self):
        if self.shape_family not in FAMILIES:
            raise ValidationError(
                f"unknown shape family {self.shape_family!r}; choose from {sorted(FAMILIES)}")
        if self.points_per_shape < FAMILIES[self.shape_family]:
            raise ValidationError(
                f"{self.points_per_shape} points cannot cover {FAMILIES[self.shape_family]} parts")
        if self.num_shapes < 1:
            raise ValidationError("num_shapes must be >= 1")
        if self.jitter_sigma < 0:
            raise ValidationError("jitter_sigma must be >= 0")


# Each part is (label, area, sampler(rng, m) -> m x 3, params). Geometry lives in
# ``shape_parts`` so tests can evaluate the analytic surfaces directly.

def _sphere(rng, m, center, radius):
    v = rng.standard_normal((m, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


def _cylinder(rng, m, radius, z0, z1):
    phi = rng.uniform(0.0, 2 * np.pi, m)
    z = rng.uniform(z0, z1, m)
    return np.column_stack([radius * np.cos(phi), radius * np.sin(phi), z])


def _cone(rng, m, radius, z0, height):
    # lateral area density is proportional to the local radius
    t = 1.0 - np.sqrt(1.0 - rng.uniform(0.0, 1.0, m))
    phi = rng.uniform(0.0, 2 * np.pi, m)
    rho = radius * (1.0 - t)
    return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z0 + t * height])


def _box_area(lo, hi):
    d = np.asarray(hi) - np.asarray(lo)
    return 2 * (d[0] * d[1] + d[1] * d[2] + d[0] * d[2])


def _box(rng, m, lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    d = hi - lo
    # faces: x-lo, x-hi, y-lo, y-hi, z-lo, z-hi
    areas = np.array([d[1] * d[2]] * 2 + [d[0] * d[2]] * 2 + [d[0] * d[1]] * 2)
    face = rng.choice(6, size=m, p=areas / areas.sum())
    pts = lo + rng.uniform(0.0, 1.0, (m, 3)) * d
    axis = face // 2
    pts[np.arange(m), axis] = np.where(face % 2 == 0, lo[axis], hi[axis])
    return pts


def _fin(rng, m, angle, r0, r1, z0, z1):
    rho = rng.uniform(r0, r1, m)
    z = rng.uniform(z0, z1, m)
    return np.column_stack([rho * np.cos(angle), rho * np.sin(angle), z])


def shape_parts(family: str, rng: np.random.Generator) -> list:
    """Draw one shape's dimensions; return a list of (label, kind, params) surface pieces."""
    if family == "barbell":
        R = rng.uniform(0.6, 0.9)
        r = rng.uniform(0.2, 0.35)
        h = rng.uniform(1.2, 2.0)
        return [
            (0, "sphere", dict(center=np.array([0.0, 0.0, -(h + R)]), radius=R)),
            (1, "cylinder", dict(radius=r, z0=-h, z1=h)),
            (2, "sphere", dict(center=np.array([0.0, 0.0, h + R]), radius=R)),
        ]
    if family == "table":
        a = rng.uniform(0.8, 1.2)
        b = rng.uniform(0.5, 0.8)
        t = rng.uniform(0.06, 0.12)
        H = rng.uniform(0.7, 1.0)
        s = rng.uniform(0.04, 0.07)
        parts = [(0, "box", dict(lo=(-a, -b, H), hi=(a, b, H + t)))]
        for sx in (-1, 1):
            for sy in (-1, 1):
                cx, cy = sx * (a - 2 * s), sy * (b - 2 * s)
                parts.append((1, "box", dict(lo=(cx - s, cy - s, 0.0), hi=(cx + s, cy + s, H))))
        return parts
    if family == "rocket":
        r = rng.uniform(0.25, 0.35)
        hb = rng.uniform(1.5, 2.0)
        hn = rng.uniform(0.5, 0.8)
        w = rng.uniform(0.2, 0.35)
        hf = rng.uniform(0.4, 0.6)
        parts = [(0, "cylinder", dict(radius=r, z0=0.0, z1=hb)),
                 (1, "cone", dict(radius=r, z0=hb, height=hn))]
        for q in range(4):
            parts.append((2, "fin", dict(angle=q * np.pi / 2, r0=r, r1=r + w, z0=0.0, z1=hf)))
        return parts
    raise ValidationError(f"unknown shape family {family!r}")


def _area(kind, p):
    if kind == "sphere":
        return 4 * np.pi * p["radius"] ** 2
    if kind == "cylinder":
        return 2 * np.pi * p["radius"] * (p["z1"] - p["z0"])
    if kind == "cone":
        return np.pi * p["radius"] * np.hypot(p["radius"], p["height"])
    if kind == "box":
        return _box_area(p["lo"], p["hi"])
    if kind == "fin":
        return (p["r1"] - p["r0"]) * (p["z1"] - p["z0"])
    raise AssertionError(kind)


_SAMPLERS = {"sphere": _sphere, "cylinder": _cylinder, "cone": _cone, "box": _box, "fin": _fin}


def surface_distance(kind: str, p: dict, pts: np.ndarray) -> np.ndarray:
    """Unsigned distance-like residual of points to one analytic surface piece (0 = on it)."""
    pts = np.asarray(pts, float)
    if kind == "sphere":
        return np.abs(np.linalg.norm(pts - p["center"], axis=1) - p["radius"])
    rho = np.hypot(pts[:, 0], pts[:, 1])
    if kind == "cylinder":
        out = np.abs(rho - p["radius"])
        return out + np.maximum(0, p["z0"] - pts[:, 2]) + np.maximum(0, pts[:, 2] - p["z1"])
    if kind == "cone":
        t = (pts[:, 2] - p["z0"]) / p["height"]
        out = np.abs(rho - p["radius"] * (1 - t))
        return out + np.maximum(0, -t) + np.maximum(0, t - 1)
    if kind == "box":
        lo, hi = np.asarray(p["lo"]), np.asarray(p["hi"])
        outside = np.maximum(0, lo - pts).sum(1) + np.maximum(0, pts - hi).sum(1)
        face = np.minimum(np.abs(pts - lo), np.abs(pts - hi)).min(1)
        return outside + face
    if kind == "fin":
        direction = np.array([np.cos(p["angle"]), np.sin(p["angle"])])
        along = pts[:, :2] @ direction
        across = np.abs(pts[:, 0] * direction[1] - pts[:, 1] * direction[0])
        return (across + np.maximum(0, p["r0"] - along) + np.maximum(0, along - p["r1"])
                + np.maximum(0, p["z0"] - pts[:, 2]) + np.maximum(0, pts[:, 2] - p["z1"]))
    raise AssertionError(kind)


def _allocate(n: int, areas: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Area-proportional point counts per piece, with every label getting >= 1 point."""
    share = areas / areas.sum() * n
    counts = np.floor(share).astype(int)
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    for lab in range(k):
        pieces = np.flatnonzero(labels == lab)
        if counts[pieces].sum() == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[pieces[np.argmax(areas[pieces])]] += 1
    return counts


_PART_COLORS = np.array([[0.85, 0.2, 0.2], [0.2, 0.7, 0.25], [0.2, 0.3, 0.85]])


def generate_shape(family: str, n: int, rng: np.random.Generator, jitter_sigma: float = 0.0,
                   color: bool = False) -> Tuple[PointCloud, list]:
    """One synthetic shape; also returns its surface pieces (used by tests)."""
    k = FAMILIES[family]
    parts = shape_parts(family, rng)
    areas = np.array([_area(kind, p) for _, kind, p in parts])
    piece_labels = np.array([lab for lab, _, _ in parts])
    counts = _allocate(n, areas, piece_labels, k)
    xyz, labels = [], []
    for (lab, kind, p), m in zip(parts, counts):
        if m:
            xyz.append(_SAMPLERS[kind](rng, m, **p))
            labels.append(np.full(m, lab))
    xyz = np.vstack(xyz)
    labels = np.concatenate(labels)
    perm = rng.permutation(n)
    xyz, labels = xyz[perm], labels[perm]
    if jitter_sigma > 0:
        xyz = xyz + rng.normal(0.0, jitter_sigma, xyz.shape)
    rgb = None
    if color:
        rgb = np.clip(_PART_COLORS[labels] + rng.normal(0.0, 0.05, (n, 3)), 0.0, 1.0)
    return PointCloud(xyz=xyz, rgb=rgb, labels=labels, num_classes=k, category=family), parts


def generate_synthetic(spec: SyntheticSpec) -> List[PointCloud]:
    return [
        generate_shape(spec.shape_family, spec.points_per_shape, make_rng(spec.seed, i),
                       spec.jitter_sigma, spec.color)[0]
        for i in range(spec.num_shapes)
    ]


# ---------------------------------------------------------------- label masks

@dataclass(frozen=True)
class MaskScheme:
    """``one_per_category`` (1pt), ``fraction`` (uniform p of points) or ``full``."""

    kind: str
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in ("one_per_category", "fraction", "full"):
            raise ValidationError(f"unknown mask scheme {self.kind!r}")
        if self.kind == "fraction" and not 0.0 < self.p <= 1.0:
            raise ValidationError(f"fraction must lie in (0, 1], got {self.p}")

    @classmethod
    def parse(cls, text: str) -> "MaskScheme":
        """Accepts ``1pt``, ``full``, ``10%`` or a bare fraction like ``0.1``."""
        t = text.strip().lower()
        if t == "1pt":
            return cls("one_per_category")
        if t == "full":
            return cls("full")
        try:
            p = float(t[:-1]) / 100 if t.endswith("%") else float(t)
        except ValueError:
            raise ValidationError(f"cannot parse mask scheme {text!r}") from None
        return cls("fraction", p)

    def __str__(self):
        if self.kind == "one_per_category":
            return "1pt"
        if self.kind == "full":
            return "full"
        return f"{self.p:g}"


def fraction_count(p: float, n: int) -> int:
    return max(1, int(round(p * n)))


def sample_mask(cloud: PointCloud, scheme: MaskScheme, seed) -> LabelMask:
    rng = make_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    n = cloud.n
    if scheme.kind == "full":
        return LabelMask.full(n)
    if scheme.kind == "fraction":
        idx = rng.choice(n, size=fraction_count(scheme.p, n), replace=False)
        return LabelMask.from_indices(n, idx)
    idx = [rng.choice(np.flatnonzero(cloud.labels == lab)) for lab in np.unique(cloud.labels)]
    return LabelMask.from_indices(n, idx)


def sample_masks(clouds: Sequence[PointCloud], scheme: MaskScheme, seed) -> List[LabelMask]:
    return [sample_mask(c, scheme, make_rng(seed, i)) for i, c in enumerate(clouds)]


@dataclass(frozen=True)
class BudgetSplit:
    sample_fraction: float
    point_fraction: float

    def __post_init__(self):
        for v in (self.sample_fraction, self.point_fraction):
            if not 0.0 < v <= 1.0:
                raise ValidationError(f"budget fractions must lie in (0, 1], got {v}")

    @property
    def budget(self) -> float:
        return self.sample_fraction * self.point_fraction

    @classmethod
    def parse(cls, text: str) -> "BudgetSplit":
        try:
            x, y = (float(t) for t in text.split(":"))
        except ValueError:
            raise ValidationError(f"budget split must look like 'x:y', got {text!r}") from None
        return cls(x, y)


def split_budget(dataset: Sequence[PointCloud], split: BudgetSplit,
                 seed) -> List[Tuple[PointCloud, LabelMask]]:
    """Label ``round(x*B)`` randomly chosen clouds at fraction y; the rest get empty masks."""
    if not dataset:
        raise ValidationError("empty dataset")
    b = len(dataset)
    m = int(round(split.sample_fraction * b))
    if m == 0:
        raise ValidationError(f"sample fraction {split.sample_fraction} of {b} clouds rounds to 0")
    chosen = set(make_rng(seed).choice(b, size=m, replace=False).tolist())
    scheme = MaskScheme("fraction", split.point_fraction)
    out = []
    for i, c in enumerate(dataset):
        mask = sample_mask(c, scheme, make_rng(seed, i)) if i in chosen else LabelMask.empty(c.n)
        out.append((c, mask))
    return out


def ensure_empty_dir(path) -> Path:
    """Create ``path`` if needed; refuse a directory that already has files in it."""
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise ValidationError(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()):
        raise ValidationError(f"output directory {path} is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return path
