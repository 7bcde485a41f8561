"""Learnable building blocks of the segmentation network.

Each block separates geometry from arithmetic: neighbor indices, groups and
interpolation weights are precomputed per point set (they depend only on
positions), while the forward functions run the differentiable math on a
tape. This lets a training loop reuse one geometry plan across epochs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .cloud import PointCloud
from .geometry import (
    ball_query,
    build_index,
    farthest_point_sampling,
    interpolation_weights,
    octant_search,
)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class OrientationUnitParams:
    """Weights of one orientation-encoding unit (three axis convolutions)."""

    Wx: Parameter
    bx: Parameter
    Wy: Parameter
    by: Parameter
    Wz: Parameter
    bz: Parameter
    radius: float

    @property
    def d_in(self) -> int:
        return self.Wx.data.shape[1]

    @property
    def d_out(self) -> int:
        return self.Wx.data.shape[2]

    @staticmethod
    def init(name: str, d_in: int, d_out: int, radius: float,
             rng: np.random.Generator) -> "OrientationUnitParams":
        if not (radius > 0):
            raise ValueError("orientation unit radius must be positive")
        return OrientationUnitParams(
            Wx=Parameter.he_uniform(f"{name}.Wx", (2, d_in, d_out), 2 * d_in, rng),
            bx=Parameter.zeros(f"{name}.bx", (d_out,)),
            Wy=Parameter.he_uniform(f"{name}.Wy", (2, d_out, d_out), 2 * d_out, rng),
            by=Parameter.zeros(f"{name}.by", (d_out,)),
            Wz=Parameter.he_uniform(f"{name}.Wz", (2, d_out, d_out), 2 * d_out, rng),
            bz=Parameter.zeros(f"{name}.bz", (d_out,)),
            radius=radius,
        )

    def parameters(self) -> list[Parameter]:
        return [self.Wx, self.bx, self.Wy, self.by, self.Wz, self.bz]


@dataclass
class MultiScaleBlockParams:
    """Stacked orientation units fused by a point-wise convolution."""

    units: list[OrientationUnitParams]
    fusion_W: Parameter
    fusion_b: Parameter
    fusion_activation: bool = True

    @staticmethod
    def init(name: str, d_in: int, unit_dims: list[int], d_out: int, radius: float,
             rng: np.random.Generator, fusion_activation: bool = True) -> "MultiScaleBlockParams":
        units = []
        prev = d_in
        for i, dim in enumerate(unit_dims):
            units.append(OrientationUnitParams.init(f"{name}.oe{i}", prev, dim, radius, rng))
            prev = dim
        total = sum(unit_dims)
        return MultiScaleBlockParams(
            units=units,
            fusion_W=Parameter.he_uniform(f"{name}.fusion.W", (total, d_out), total, rng),
            fusion_b=Parameter.zeros(f"{name}.fusion.b", (d_out,)),
            fusion_activation=fusion_activation,
        )

    def parameters(self) -> list[Parameter]:
        out = [p for u in self.units for p in u.parameters()]
        out += [self.fusion_W, self.fusion_b]
        return out


@dataclass
class MlpParams:
    """Shared point-wise MLP: alternating linear + ReLU."""

    layers: list[tuple[Parameter, Parameter]]

    @staticmethod
    def init(name: str, dims: list[int], rng: np.random.Generator) -> "MlpParams":
        layers = []
        for i in range(len(dims) - 1):
            W = Parameter.he_uniform(f"{name}.mlp{i}.W", (dims[i], dims[i + 1]), dims[i], rng)
            b = Parameter.zeros(f"{name}.mlp{i}.b", (dims[i + 1],))
            layers.append((W, b))
        return MlpParams(layers)

    def parameters(self) -> list[Parameter]:
        return [p for W, b in self.layers for p in (W, b)]


@dataclass
class SetAbstractionParams:
    """Downsampling layer: FPS centroids, ball-query groups, shared MLP + max pool."""

    n_centroids: int
    radius: float
    max_k: int
    mlp: MlpParams

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters()


@dataclass
class FeaturePropagationParams:
    """Upsampling layer: inverse-distance interpolation + skip concat + MLP."""

    mlp: MlpParams

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters()


@dataclass
class BallConvParams:
    """Ball-query grouping followed by a learned combination over neighbors.

    Used by the grouping-comparison experiment as the non-octant alternative
    to an orientation block.
    """

    radius: float
    k: int
    W: Parameter  # (k * d_in, d_out)
    b: Parameter

    @staticmethod
    def init(name: str, d_in: int, d_out: int, radius: float, k: int,
             rng: np.random.Generator) -> "BallConvParams":
        return BallConvParams(
            radius=radius, k=k,
            W=Parameter.he_uniform(f"{name}.W", (k * d_in, d_out), k * d_in, rng),
            b=Parameter.zeros(f"{name}.b", (d_out,)),
        )

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]


# ---------------------------------------------------------------------------
# geometry plans (no learnable state)


def build_octant_neighborhoods(positions: np.ndarray, radius: float) -> np.ndarray:
    """(N, 8) neighbor index per octant for every point, radius-bounded."""
    cloud = PointCloud(positions)
    index = build_index(cloud, radius)
    out = np.empty((len(positions), 8), dtype=np.int64)
    for i in range(len(positions)):
        out[i] = octant_search(index, cloud, i, radius).neighbor_indices
    return out


@dataclass
class SetAbstractionPlan:
    centroid_indices: np.ndarray  # (M,)
    group_indices: np.ndarray  # (M, K) into the input point set
    relative_coords: np.ndarray  # (M, K, 3)


def build_sa_plan(positions: np.ndarray, params: SetAbstractionParams,
                  seed: int | None = None, fps_start: str = "canonical") -> SetAbstractionPlan:
    cloud = PointCloud(positions)
    if params.n_centroids > len(positions):
        raise ValueError(f"n_centroids {params.n_centroids} exceeds point count {len(positions)}")
    centroids = farthest_point_sampling(cloud, params.n_centroids, seed=seed, start=fps_start)
    index = build_index(cloud, params.radius)
    m, k = params.n_centroids, params.max_k
    groups = np.empty((m, k), dtype=np.int64)
    for gi, ci in enumerate(centroids):
        res = ball_query(index, cloud, positions[ci], params.radius, k)
        # the centroid's own point always leads the group, so it is never empty
        members = [int(ci)]
        for j in res.indices[: res.found_count]:
            if j != ci and len(members) < k:
                members.append(int(j))
        row = np.full(k, members[0], dtype=np.int64)
        row[: len(members)] = members
        groups[gi] = row
    rel = positions[groups] - positions[centroids][:, None, :]
    return SetAbstractionPlan(centroid_indices=centroids, group_indices=groups,
                              relative_coords=rel)


@dataclass
class FeaturePropagationPlan:
    indices: np.ndarray  # (N, k) into the sparse set
    weights: np.ndarray  # (N, k) normalized


def build_fp_plan(dense_positions: np.ndarray, sparse_positions: np.ndarray,
                  k: int = 3) -> FeaturePropagationPlan:
    if len(sparse_positions) < 1:
        raise ValueError("sparse point set must be non-empty")
    kk = min(k, len(sparse_positions))
    n = len(dense_positions)
    idx = np.empty((n, kk), dtype=np.int64)
    w = np.empty((n, kk))
    for i in range(n):
        idx[i], w[i] = interpolation_weights(sparse_positions, dense_positions[i], k=kk)
    return FeaturePropagationPlan(indices=idx, weights=w)


def build_ball_groups(positions: np.ndarray, radius: float, k: int) -> np.ndarray:
    """(N, k) in-radius neighbor lists for every point (self always first)."""
    cloud = PointCloud(positions)
    index = build_index(cloud, radius)
    out = np.empty((len(positions), k), dtype=np.int64)
    for i in range(len(positions)):
        res = ball_query(index, cloud, positions[i], radius, k)
        members = [i]
        for j in res.indices[: res.found_count]:
            if j != i and len(members) < k:
                members.append(int(j))
        row = np.full(k, members[0], dtype=np.int64)
        row[: len(members)] = members
        out[i] = row
    return out


# ---------------------------------------------------------------------------
# forward passes


def orientation_unit_forward(tape: Tape, features: Tensor,
                             neighborhoods: np.ndarray,
                             params: OrientationUnitParams) -> Tensor:
    """Gather the 8 octant neighbors into a 2x2x2 cube and collapse it along
    x, then y, then z with a ReLU after each axis convolution."""
    n = features.data.shape[0]
    if features.data.shape[1] != params.d_in:
        raise ValueError(f"feature dim {features.data.shape[1]} != unit d_in {params.d_in}")
    gathered = ad.gather_rows(features, neighborhoods)  # (N, 8, d_in)
    # octant code 4z + 2y + x: row-major reshape yields axes (z, y, x)
    cube = ad.reshape(gathered, (n, 2, 2, 2, params.d_in))
    # collapse x
    vx = ad.reshape(ad.moveaxis(cube, 3, 1), (n, 2, 4, params.d_in))
    hx = ad.relu(ad.axis_conv2(vx, tape.watch(params.Wx), tape.watch(params.bx)))
    # collapse y (remaining axes z, y after reshape back)
    hy_in = ad.moveaxis(ad.reshape(hx, (n, 2, 2, params.d_out)), 2, 1)
    hy = ad.relu(ad.axis_conv2(hy_in, tape.watch(params.Wy), tape.watch(params.by)))
    # collapse z
    hz_in = ad.reshape(hy, (n, 2, 1, params.d_out))
    hz = ad.relu(ad.axis_conv2(hz_in, tape.watch(params.Wz), tape.watch(params.bz)))
    return ad.reshape(hz, (n, params.d_out))


def multi_scale_block_forward(tape: Tape, features: Tensor,
                              neighborhoods: list[np.ndarray],
                              params: MultiScaleBlockParams) -> Tensor:
    """Run the unit stack, concatenate every unit's output and fuse point-wise."""
    if len(neighborhoods) != len(params.units):
        raise ValueError("one neighborhood table per orientation unit required")
    outs = []
    current = features
    for unit, hoods in zip(params.units, neighborhoods):
        current = orientation_unit_forward(tape, current, hoods, unit)
        outs.append(current)
    fused = ad.linear(ad.concat_channels(outs), tape.watch(params.fusion_W),
                      tape.watch(params.fusion_b))
    return ad.relu(fused) if params.fusion_activation else fused


def mlp_forward(tape: Tape, x: Tensor, params: MlpParams) -> Tensor:
    for W, b in params.layers:
        x = ad.relu(ad.linear(x, tape.watch(W), tape.watch(b)))
    return x


def set_abstraction_forward(tape: Tape, features: Tensor, plan: SetAbstractionPlan,
                            params: SetAbstractionParams) -> tuple[Tensor, Tensor]:
    """Group features with relative coordinates, embed with the shared MLP,
    and max-pool each group into its centroid.

    Returns (pooled centroid features, pre-pool group embeddings); the latter
    is the stage's grouping representation used for coverage accounting.
    """
    grouped = ad.gather_rows(features, plan.group_indices)  # (M, K, d)
    with_rel = ad.concat_channels([grouped, tape.tensor(plan.relative_coords)])
    embedded = mlp_forward(tape, with_rel, params.mlp)
    return ad.group_max_pool(embedded), embedded


def feature_propagation_forward(tape: Tape, sparse_features: Tensor,
                                plan: FeaturePropagationPlan,
                                skip_features: Tensor,
                                params: FeaturePropagationParams) -> Tensor:
    """Interpolate sparse features to the dense set, concat skips, refine."""
    interpolated = ad.weighted_gather_sum(sparse_features, plan.indices, plan.weights)
    merged = ad.concat_channels([interpolated, skip_features])
    return mlp_forward(tape, merged, params.mlp)


def ball_conv_forward(tape: Tape, features: Tensor, groups: np.ndarray,
                      params: BallConvParams) -> Tensor:
    """Learned combination over each point's ball-query neighbor features."""
    n = features.data.shape[0]
    gathered = ad.gather_rows(features, groups)  # (N, k, d)
    flat = ad.reshape(gathered, (n, params.k * features.data.shape[1]))
    return ad.relu(ad.linear(flat, tape.watch(params.W), tape.watch(params.b)))
