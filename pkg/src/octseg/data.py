"""Synthetic labeled scenes, XYZL file I/O and block sampling.

Every generator is a pure function of its spec and seed, so repeated calls
are bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import PointCloud

SHAPE_KINDS = ("sphere", "cuboid", "plane")


@dataclass(frozen=True)
class ShapeSpec:
    """One surface to sample: kind, placement, size, point budget, class."""

    kind: str
    center: tuple[float, float, float]
    scale: float  # overall diameter / edge length, meters
    points: int
    label: int

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if not (self.scale > 0):
            raise ValueError("scale must be positive")
        if self.points < 8:
            raise ValueError("each shape needs at least 8 points")
        if self.label < 0:
            raise ValueError("label must be a non-negative class id")


@dataclass
class Scene:
    """A merged multi-shape cloud with per-point shape provenance."""

    cloud: PointCloud
    provenance: np.ndarray  # per-point index into the generating spec list
    specs: list[ShapeSpec]
    seed: int


def generate_shape(spec: ShapeSpec, seed: int) -> PointCloud:
    """Sample points uniformly on the shape surface; diameter equals scale."""
    rng = np.random.default_rng(seed)
    half = spec.scale / 2.0
    n = spec.points
    if spec.kind == "sphere":
        raw = rng.normal(size=(n, 3))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        pts = raw * half
    elif spec.kind == "cuboid":
        # six equal-area faces of an axis-aligned cube with side = scale
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-half, half, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face % 3
        sign = np.where(face < 3, half, -half)
        for i in range(n):
            a = axis[i]
            rest = [c for c in range(3) if c != a]
            pts[i, a] = sign[i]
            pts[i, rest[0]] = uv[i, 0]
            pts[i, rest[1]] = uv[i, 1]
    else:  # plane: horizontal square patch of side = scale
        uv = rng.uniform(-half, half, size=(n, 2))
        pts = np.column_stack([uv[:, 0], uv[:, 1], np.zeros(n)])
    pts = pts + np.asarray(spec.center)
    labels = np.full(n, spec.label, dtype=np.int64)
    return PointCloud(pts, labels=labels)


def generate_scene(specs: list[ShapeSpec], n_points: int, seed: int) -> Scene:
    """Merge shape samples and resample to exactly n_points."""
    if not specs:
        raise ValueError("a scene needs at least one shape")
    rng = np.random.default_rng(seed)
    shape_seeds = rng.integers(0, 2**63 - 1, size=len(specs))
    positions, labels, prov = [], [], []
    for i, spec in enumerate(specs):
        part = generate_shape(spec, int(shape_seeds[i]))
        positions.append(part.positions)
        labels.append(part.labels)
        prov.append(np.full(len(part), i, dtype=np.int64))
    positions = np.concatenate(positions)
    labels = np.concatenate(labels)
    prov = np.concatenate(prov)
    total = len(positions)
    if total >= n_points:
        keep = rng.choice(total, size=n_points, replace=False)
    else:
        keep = np.concatenate([np.arange(total),
                               rng.choice(total, size=n_points - total, replace=True)])
    keep.sort()
    return Scene(cloud=PointCloud(positions[keep], labels=labels[keep]),
                 provenance=prov[keep], specs=list(specs), seed=seed)


class XyzlFormatError(ValueError):
    """Raised for malformed XYZL files, carrying the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


def save_xyzl(cloud: PointCloud, path) -> None:
    """Write `x y z [r g b] label` lines at full double precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(cloud)):
            cols = [f"{v:.17g}" for v in cloud.positions[i]]
            if cloud.colors is not None:
                cols += [f"{v:.17g}" for v in cloud.colors[i]]
            label = int(cloud.labels[i]) if cloud.labels is not None else 0
            fh.write(" ".join(cols) + f" {label}\n")


def load_xyzl(path) -> PointCloud:
    """Parse an XYZL text file (4 or 7 whitespace-separated columns)."""
    positions, colors, labels = [], [], []
    ncols = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (4, 7):
                raise XyzlFormatError(f"expected 4 or 7 columns, got {len(parts)}", lineno)
            if ncols is None:
                ncols = len(parts)
            elif len(parts) != ncols:
                raise XyzlFormatError(f"inconsistent column count ({len(parts)} vs {ncols})",
                                      lineno)
            try:
                values = [float(v) for v in parts[:-1]]
                label = int(parts[-1])
            except ValueError as exc:
                raise XyzlFormatError(str(exc), lineno) from None
            if label < 0:
                raise XyzlFormatError(f"negative label {label}", lineno)
            positions.append(values[:3])
            if ncols == 7:
                colors.append(values[3:6])
            labels.append(label)
    if not positions:
        raise XyzlFormatError("no points")
    return PointCloud(np.asarray(positions),
                      colors=np.asarray(colors) if colors else None,
                      labels=np.asarray(labels, dtype=np.int64))


@dataclass
class BlockSampleResult:
    blocks: list[PointCloud]
    dropped_blocks: int


def block_sample(cloud: PointCloud, block_size: float = 1.0,
                 points_per_block: int = 1024, seed: int = 0) -> BlockSampleResult:
    """Partition the x-y plane into square blocks and resample each.

    Blocks holding fewer than points_per_block / 4 points are dropped (the
    count is reported). Kept blocks are resampled to exactly points_per_block
    (with replacement when short) and re-centered to their x-y centroid;
    z is left absolute.
    """
    rng = np.random.default_rng(seed)
    keys = np.floor(cloud.positions[:, :2] / block_size).astype(np.int64)
    blocks: dict[tuple[int, int], list[int]] = {}
    for i, key in enumerate(map(tuple, keys)):
        blocks.setdefault(key, []).append(i)
    out, dropped = [], 0
    for key in sorted(blocks):
        members = np.asarray(blocks[key])
        if len(members) < points_per_block / 4:
            dropped += 1
            continue
        if len(members) >= points_per_block:
            pick = rng.choice(members, size=points_per_block, replace=False)
        else:
            pick = np.concatenate([members, rng.choice(members,
                                                       size=points_per_block - len(members),
                                                       replace=True)])
        pick.sort()
        pos = cloud.positions[pick].copy()
        centroid_xy = pos[:, :2].mean(axis=0)
        pos[:, :2] -= centroid_xy
        out.append(PointCloud(
            pos,
            colors=None if cloud.colors is None else cloud.colors[pick].copy(),
            labels=None if cloud.labels is None else cloud.labels[pick].copy()))
    return BlockSampleResult(blocks=out, dropped_blocks=dropped)


def normalize_unit_cube(cloud: PointCloud) -> PointCloud:
    """Rescale positions in place so the tightest axis-aligned box becomes
    the unit cube corner at the origin (largest extent maps to length 1)."""
    pos = cloud.positions
    extent = (pos.max(axis=0) - pos.min(axis=0)).max()
    if extent > 0:
        cloud.positions[...] = (pos - pos.min(axis=0)) / extent
    return cloud


def separated_scene_specs(rng: np.random.Generator,
                          scale_range: tuple[float, float] = (0.4, 1.0),
                          points_per_shape: int = 512,
                          min_gap: float = 0.6) -> list[ShapeSpec]:
    """One shape of every kind, centers rejection-sampled to limit overlap.

    min_gap is the required center distance as a fraction of the shapes'
    mean scale, so labels stay mostly unambiguous where surfaces meet.
    """
    specs: list[ShapeSpec] = []
    placed: list[tuple[np.ndarray, float]] = []
    for kind in SHAPE_KINDS:
        scale = float(np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]))))
        for _ in range(200):
            center = rng.uniform(0.0, 2.0, size=3)
            if all(np.linalg.norm(center - c) >= min_gap * (scale + s) / 2
                   for c, s in placed):
                break
        placed.append((center, scale))
        specs.append(ShapeSpec(kind=kind, center=tuple(center), scale=scale,
                               points=points_per_shape,
                               label=SHAPE_KINDS.index(kind)))
    return specs


def tabletop_scene_specs(rng: np.random.Generator,
                         points_per_shape: int = 512) -> list[ShapeSpec]:
    """A ground plane plus one sphere and one cuboid above it.

    Classes occupy distinct log-uniform size ranges (sphere < cuboid < plane)
    and the free shapes keep a minimum center distance, so every class keeps
    distinctive local geometry while scenes still vary in layout.
    """
    plane_scale = float(rng.uniform(2.0, 2.8))
    specs = [ShapeSpec(kind="plane", center=(1.0, 1.0, 0.0), scale=plane_scale,
                       points=points_per_shape, label=2)]
    centers: list[np.ndarray] = []
    for kind, label, lo, hi in (("sphere", 0, 0.25, 0.5),
                                ("cuboid", 1, 0.5, 0.9)):
        scale = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        for _ in range(100):
            center = np.array([rng.uniform(0.3, 1.7), rng.uniform(0.3, 1.7),
                               rng.uniform(0.3, 1.0)])
            if all(np.linalg.norm(center - c) > 0.9 for c in centers):
                break
        centers.append(center)
        specs.append(ShapeSpec(kind=kind, center=tuple(center), scale=scale,
                               points=points_per_shape, label=label))
    return specs


def tabletop_scenes(n_scenes: int, n_points: int = 1024,
                    seed: int = 0) -> list[Scene]:
    """Seeded batch of tabletop scenes, each normalized to the unit cube."""
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(n_scenes):
        scene = generate_scene(tabletop_scene_specs(rng), n_points,
                               seed=int(rng.integers(2**31)))
        normalize_unit_cube(scene.cloud)
        scenes.append(scene)
    return scenes


def random_scene_specs(rng: np.random.Generator, num_classes: int = 3,
                       shapes_per_scene: tuple[int, int] = (2, 4),
                       scale_range: tuple[float, float] = (0.1, 3.2),
                       points_per_shape: int = 512) -> list[ShapeSpec]:
    """Draw a handful of shapes with log-uniform scales inside the unit cube."""
    count = int(rng.integers(shapes_per_scene[0], shapes_per_scene[1] + 1))
    specs = []
    for _ in range(count):
        kind = SHAPE_KINDS[int(rng.integers(0, min(num_classes, len(SHAPE_KINDS))))]
        scale = float(np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]))))
        center = tuple(rng.uniform(0.0, 1.0, size=3))
        specs.append(ShapeSpec(kind=kind, center=center, scale=scale,
                               points=points_per_shape,
                               label=SHAPE_KINDS.index(kind)))
    return specs
