"""The full encoder-decoder segmentation network.

Down path: [block -> set abstraction] per stage; up path mirrors it with
[feature propagation (+ skip) -> block]; a final point-wise classifier maps
to per-point class logits. ``block`` is the multi-scale orientation module by
default, but can be swapped for a ball-query convolution or removed entirely
(the baselines of the grouping-comparison experiment).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .cloud import PointCloud
from .layers import (
    BallConvParams,
    FeaturePropagationParams,
    FeaturePropagationPlan,
    MlpParams,
    MultiScaleBlockParams,
    SetAbstractionParams,
    SetAbstractionPlan,
    ball_conv_forward,
    build_ball_groups,
    build_fp_plan,
    build_octant_neighborhoods,
    build_sa_plan,
    feature_propagation_forward,
    mlp_forward,
    multi_scale_block_forward,
    set_abstraction_forward,
)

BLOCK_KINDS = ("orientation", "ballconv", "none")


@dataclass
class NetworkConfig:
    """Everything needed to build and run a network, file-serializable."""

    input_points: int = 1024
    num_classes: int = 3
    use_rgb: bool = False
    stage_sizes: tuple[int, ...] = (256, 64, 16)
    stage_widths: tuple[int, ...] = (64, 128, 256)
    input_width: int = 32
    oe_radii: tuple[float, ...] = (0.1, 0.2, 0.4)
    oe_dims: tuple[tuple[int, ...], ...] | None = None  # per down stage; default (w, w)
    sa_radii: tuple[float, ...] = (0.15, 0.3, 0.6)
    max_k: int = 32
    seed: int = 0
    relative_coords_only: bool = False
    block_kind: str = "orientation"
    ball_conv_k: int = 8
    fps_start: str = "canonical"
    fusion_activation: bool = True
    interp_k: int = 3

    def __post_init__(self):
        s = len(self.stage_sizes)
        if len(self.stage_widths) != s or len(self.oe_radii) != s or len(self.sa_radii) != s:
            raise ValueError("stage_sizes, stage_widths, oe_radii, sa_radii must have equal length")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}")
        if self.oe_dims is not None and len(self.oe_dims) != s:
            raise ValueError("oe_dims must list unit widths for every down stage")

    @property
    def n_stages(self) -> int:
        return len(self.stage_sizes)

    @property
    def input_dim(self) -> int:
        if self.relative_coords_only:
            return 1
        return 6 if self.use_rgb else 3

    def level_size(self, level: int) -> int:
        return self.input_points if level == 0 else self.stage_sizes[level - 1]

    def level_width(self, level: int) -> int:
        return self.input_width if level == 0 else self.stage_widths[level - 1]

    def unit_dims(self, stage: int) -> tuple[int, ...]:
        if self.oe_dims is not None:
            return tuple(self.oe_dims[stage])
        w = self.level_width(stage)
        return (w, w)


@dataclass
class NetworkParams:
    input_mlp: MlpParams
    down: list[tuple[object, SetAbstractionParams]]  # (block or None, SA)
    up: list[tuple[FeaturePropagationParams, object]]  # (FP, block or None)
    classifier_W: Parameter
    classifier_b: Parameter

    def parameters(self) -> list[Parameter]:
        out = list(self.input_mlp.parameters())
        for block, sa in self.down:
            if block is not None:
                out += block.parameters()
            out += sa.parameters()
        for fp, block in self.up:
            out += fp.parameters()
            if block is not None:
                out += block.parameters()
        out += [self.classifier_W, self.classifier_b]
        return out

    def by_name(self) -> dict[str, Parameter]:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise ValueError(f"duplicate parameter name {p.name}")
            named[p.name] = p
        return named


def _make_block(name: str, kind: str, d: int, unit_dims, radius: float,
                fusion_activation: bool, ball_k: int, rng: np.random.Generator):
    if kind == "none":
        return None
    if kind == "ballconv":
        return BallConvParams.init(name, d, d, radius, ball_k, rng)
    return MultiScaleBlockParams.init(name, d, list(unit_dims), d, radius, rng,
                                      fusion_activation=fusion_activation)


def init_network(config: NetworkConfig) -> NetworkParams:
    """Seeded initialization of every learnable parameter."""
    rng = np.random.default_rng(config.seed)
    s = config.n_stages
    input_mlp = MlpParams.init("input", [config.input_dim, config.input_width], rng)
    down = []
    for i in range(s):
        w_in = config.level_width(i)
        w_out = config.stage_widths[i]
        block = _make_block(f"down{i}.block", config.block_kind, w_in, config.unit_dims(i),
                            config.oe_radii[i], config.fusion_activation, config.ball_conv_k, rng)
        sa = SetAbstractionParams(
            n_centroids=config.stage_sizes[i], radius=config.sa_radii[i], max_k=config.max_k,
            mlp=MlpParams.init(f"down{i}.sa", [w_in + 3, w_out, w_out], rng))
        down.append((block, sa))
    up = []
    for j in range(s):
        level = s - 1 - j  # dense level this stage restores
        d_sparse = config.level_width(level + 1)
        w_dense = config.level_width(level)
        fp = FeaturePropagationParams(
            mlp=MlpParams.init(f"up{j}.fp", [d_sparse + w_dense, w_dense, w_dense], rng))
        block = _make_block(f"up{j}.block", config.block_kind, w_dense, config.unit_dims(level),
                            config.oe_radii[level], config.fusion_activation,
                            config.ball_conv_k, rng)
        up.append((fp, block))
    cls_W = Parameter.he_uniform("classifier.W", (config.input_width, config.num_classes),
                                 config.input_width, rng)
    cls_b = Parameter.zeros("classifier.b", (config.num_classes,))
    return NetworkParams(input_mlp=input_mlp, down=down, up=up,
                         classifier_W=cls_W, classifier_b=cls_b)


def parameter_count(params: NetworkParams) -> int:
    return sum(p.data.size for p in params.parameters())


# ---------------------------------------------------------------------------
# geometry plan for one point set


@dataclass
class ScenePlan:
    """All spatial-query results one forward pass needs, reusable across epochs."""

    level_positions: list[np.ndarray]
    down_block_tables: list[np.ndarray | None]  # octant hoods or ball groups per down stage
    sa_plans: list[SetAbstractionPlan]
    up_fp_plans: list[FeaturePropagationPlan]
    up_block_tables: list[np.ndarray | None]


def build_plan(positions: np.ndarray, config: NetworkConfig,
               seed: int | None = None) -> ScenePlan:
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) != config.input_points:
        raise ValueError(f"cloud size {len(positions)} != configured input_points {config.input_points}")
    s = config.n_stages
    level_positions = [positions]
    down_tables, sa_plans = [], []
    for i in range(s):
        pos = level_positions[i]
        down_tables.append(_block_table(pos, config, i))
        sa_params = SetAbstractionParams(
            n_centroids=config.stage_sizes[i], radius=config.sa_radii[i],
            max_k=config.max_k, mlp=MlpParams([]))
        plan = build_sa_plan(pos, sa_params, seed=seed, fps_start=config.fps_start)
        sa_plans.append(plan)
        level_positions.append(pos[plan.centroid_indices])
    up_fp_plans, up_tables = [], []
    for j in range(s):
        level = s - 1 - j
        dense = level_positions[level]
        sparse = level_positions[level + 1]
        up_fp_plans.append(build_fp_plan(dense, sparse, k=config.interp_k))
        up_tables.append(_block_table(dense, config, level))
    return ScenePlan(level_positions=level_positions, down_block_tables=down_tables,
                     sa_plans=sa_plans, up_fp_plans=up_fp_plans, up_block_tables=up_tables)


def _block_table(positions: np.ndarray, config: NetworkConfig, stage: int):
    if config.block_kind == "none":
        return None
    if config.block_kind == "ballconv":
        return build_ball_groups(positions, config.oe_radii[stage], config.ball_conv_k)
    return build_octant_neighborhoods(positions, config.oe_radii[stage])


def input_features(cloud: PointCloud, config: NetworkConfig) -> np.ndarray:
    if config.relative_coords_only:
        return np.ones((len(cloud), 1))
    if config.use_rgb:
        if cloud.colors is None:
            raise ValueError("config requests RGB but cloud has no colors")
        return np.concatenate([cloud.positions, cloud.colors], axis=1)
    return cloud.positions.copy()


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardResult:
    tape: Tape
    logits: Tensor
    inputs: Tensor
    stage_outputs: dict[str, Tensor] = field(default_factory=dict)


def _run_block(tape, features, block, table):
    if block is None:
        return features
    if isinstance(block, BallConvParams):
        return ball_conv_forward(tape, features, table, block)
    return multi_scale_block_forward(tape, features, [table] * len(block.units), block)


def network_forward(params: NetworkParams, config: NetworkConfig, plan: ScenePlan,
                    features: np.ndarray) -> ForwardResult:
    if features.shape != (config.input_points, config.input_dim):
        raise ValueError(f"input features must be {(config.input_points, config.input_dim)}, "
                         f"got {features.shape}")
    tape = Tape()
    x_in = tape.tensor(features)
    stages: dict[str, Tensor] = {}
    x = mlp_forward(tape, x_in, params.input_mlp)
    stages["input"] = x
    skips = []
    for i, (block, sa) in enumerate(params.down):
        stages[f"down{i}.in"] = x
        x = _run_block(tape, x, block, plan.down_block_tables[i])
        stages[f"block_down{i}"] = x
        skips.append(x)
        x, grouped = set_abstraction_forward(tape, x, plan.sa_plans[i], sa)
        stages[f"down{i}"] = x
        stages[f"down{i}.grouped"] = grouped
    for j, (fp, block) in enumerate(params.up):
        level = config.n_stages - 1 - j
        x = feature_propagation_forward(tape, x, plan.up_fp_plans[j], skips[level], fp)
        x = _run_block(tape, x, block, plan.up_block_tables[j])
        stages[f"block_up{j}"] = x
        stages[f"up{j}"] = x
    logits = ad.linear(x, tape.watch(params.classifier_W), tape.watch(params.classifier_b))
    stages["logits"] = logits
    return ForwardResult(tape=tape, logits=logits, inputs=x_in, stage_outputs=stages)


def sum_to_scalar(tape: Tape, t: Tensor) -> Tensor:
    flat = ad.reshape(t, (1, -1))
    ones = tape.tensor(np.ones((flat.data.shape[1], 1)))
    return ad.reshape(ad.linear(flat, ones, tape.tensor(np.zeros(1))), ())


def influence_mask(cloud: PointCloud, params: NetworkParams, config: NetworkConfig,
                   target_stage: str, plan: ScenePlan | None = None) -> set[int]:
    """Points with a nonzero gradient path into the target stage.

    Backpropagates from the sum of the stage's representation and thresholds
    per-point feature gradients at exactly zero. For a downsampling stage
    ``down{i}`` the representation is the stage's pre-pool group embedding
    and capture is counted against that stage's own input point set (so the
    returned indices refer to level i points), matching how captured point
    counts are tabulated per downsampling step. ``input`` measures the input
    MLP against the network input and always captures everything.
    """
    if plan is None:
        plan = build_plan(cloud.positions, config)
    result = network_forward(params, config, plan, input_features(cloud, config))
    stages = result.stage_outputs
    if target_stage == "input":
        source, target = result.inputs, stages["input"]
    elif f"{target_stage}.grouped" in stages:
        source, target = stages[f"{target_stage}.in"], stages[f"{target_stage}.grouped"]
    elif target_stage in stages:
        source, target = result.inputs, stages[target_stage]
    else:
        raise ValueError(f"unknown stage {target_stage!r}; "
                         f"available: {sorted(stages)}")
    total = sum_to_scalar(result.tape, target)
    result.tape.backward(total)
    result.tape.release()
    grad = source.grad
    if grad is None:
        return set()
    return set(np.flatnonzero(np.any(grad != 0.0, axis=1)).tolist())
