"""Deterministic experiment drivers.

Three studies, each emitting CSV tables:

* coverage_experiment: captured-point counts per downsampling stage, for a
  pipeline with an orientation module before every downsampling layer versus
  plain ball-query grouping.
* scale_awareness_experiment: whether the most activated orientation module
  in the hierarchy tracks the size of a single presented shape.
* compare_grouping: held-out accuracy curves for three grouping strategies
  under matched parameter budgets.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import TrainSettings
from .data import (SHAPE_KINDS, Scene, ShapeSpec, generate_scene,
                   random_scene_specs, tabletop_scenes)
from .network import (
    NetworkConfig,
    build_plan,
    influence_mask,
    init_network,
    input_features,
    network_forward,
    parameter_count,
)
from .training import OptimizerState, evaluate, prepare_plans, train

# ---------------------------------------------------------------------------
# coverage


@dataclass
class CoverageRow:
    variant: str
    scene: int
    stage: int
    input_size: int
    captured: int


@dataclass
class CoverageResult:
    rows: list[CoverageRow]

    def counts(self, variant: str, stage: int) -> list[int]:
        return [r.captured for r in self.rows
                if r.variant == variant and r.stage == stage]

    def to_csv(self) -> str:
        lines = ["variant,scene,stage,input_size,captured"]
        for r in self.rows:
            lines.append(f"{r.variant},{r.scene},{r.stage},{r.input_size},{r.captured}")
        return "\n".join(lines) + "\n"


def orientation_coverage_config() -> NetworkConfig:
    """Orientation module before every downsampling layer, with grouping
    generous enough that capture is limited only by the module's reach."""
    return NetworkConfig(max_k=512)


def ball_coverage_config() -> NetworkConfig:
    """Ball-query-only pipeline at a grouping density that leaves gaps.

    The first downsampling stage uses a deliberately tight radius and group
    budget relative to the cloud density, so a noticeable fraction of points
    never joins any group; later stages keep the default radii.
    """
    return NetworkConfig(block_kind="none", sa_radii=(0.06, 0.3, 0.6), max_k=16)


def coverage_scenes(n_scenes: int, n_points: int, seed: int) -> list[Scene]:
    """Random multi-shape scenes rescaled into the unit cube.

    The pipelines' grouping radii are fixed absolute lengths, so scenes are
    normalized to a common extent to make point density comparable.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_scenes):
        scene = generate_scene(random_scene_specs(rng), n_points,
                               seed=int(rng.integers(2**31)))
        pos = scene.cloud.positions
        extent = (pos.max(axis=0) - pos.min(axis=0)).max()
        scene.cloud.positions[...] = (pos - pos.min(axis=0)) / extent
        out.append(scene)
    return out


def coverage_experiment(n_scenes: int = 20, seed: int = 0,
                        variants: dict[str, NetworkConfig] | None = None) -> CoverageResult:
    """Captured-point counts per stage, per scene, per pipeline variant.

    A point counts as captured by stage i when the stage's pre-pool group
    embedding has a nonzero gradient with respect to that point's features at
    level i.
    """
    if variants is None:
        variants = {"orientation": orientation_coverage_config(),
                    "ballquery": ball_coverage_config()}
    n_points = next(iter(variants.values())).input_points
    scenes = coverage_scenes(n_scenes, n_points, seed)
    rows: list[CoverageRow] = []
    for name, config in variants.items():
        params = init_network(config)
        for si, scene in enumerate(scenes):
            plan = build_plan(scene.cloud.positions, config)
            for stage in range(config.n_stages):
                captured = influence_mask(scene.cloud, params, config,
                                          f"down{stage}", plan=plan)
                rows.append(CoverageRow(variant=name, scene=si, stage=stage,
                                        input_size=config.level_size(stage),
                                        captured=len(captured)))
    return CoverageResult(rows=rows)


# ---------------------------------------------------------------------------
# scale awareness


def log_scale_bins(scales: np.ndarray, n_bins: int) -> np.ndarray:
    """Assign each scale to one of n_bins log-uniform bins over [min, max]."""
    scales = np.asarray(scales, dtype=np.float64)
    lo, hi = np.log(scales.min()), np.log(scales.max())
    if hi == lo:
        return np.zeros(len(scales), dtype=np.int64)
    frac = (np.log(scales) - lo) / (hi - lo)
    return np.minimum((frac * n_bins).astype(np.int64), n_bins - 1)


def alignment_rate(activations: np.ndarray, bins: np.ndarray) -> float:
    """Fraction of rows where the argmax module index equals the scale bin."""
    activations = np.asarray(activations, dtype=np.float64)
    bins = np.asarray(bins, dtype=np.int64)
    if activations.ndim != 2 or len(activations) != len(bins):
        raise ValueError("activations must be (M, n_modules) matching bins (M,)")
    return float(np.mean(np.argmax(activations, axis=1) == bins))


@dataclass
class ScaleAwarenessResult:
    rate: float
    chance: float
    scales: np.ndarray
    bins: np.ndarray
    activations: np.ndarray  # normalized, (M, n_modules)
    module_means: np.ndarray

    def to_csv(self) -> str:
        n_mod = self.activations.shape[1]
        header = "scale,bin,argmax," + ",".join(f"module{i}" for i in range(n_mod))
        lines = [header]
        arg = np.argmax(self.activations, axis=1)
        for i in range(len(self.scales)):
            acts = ",".join(f"{a:.10g}" for a in self.activations[i])
            lines.append(f"{self.scales[i]:.10g},{self.bins[i]},{arg[i]},{acts}")
        return "\n".join(lines) + "\n"


def scale_awareness_config() -> NetworkConfig:
    """Four orientation modules whose sensitive scales sit one octave apart.

    Point spacing doubles per hierarchy level (sizes shrink 4x), so radii
    growing 4x per level keep each module's transition from dense to sparse
    octant neighborhoods at a different shape scale; radii growing only 2x
    would put every module's transition at the same scale. Constant input
    features (relative coordinates only) stop the trivial growth of every
    activation with shape size, which would otherwise mask the per-module
    differences.
    """
    return NetworkConfig(input_points=512,
                         stage_sizes=(128, 32, 8, 4),
                         stage_widths=(32, 32, 32, 32),
                         input_width=32,
                         oe_radii=(0.06, 0.24, 0.96, 3.84),
                         sa_radii=(0.09, 0.36, 1.44, 5.76),
                         max_k=32,
                         relative_coords_only=True)


def single_shape_scene(rng: np.random.Generator, n_points: int,
                       scale_range: tuple[float, float] = (0.064, 1.024)) -> tuple[Scene, float]:
    kind_idx = int(rng.integers(0, len(SHAPE_KINDS)))
    scale = float(np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]))))
    spec = ShapeSpec(kind=SHAPE_KINDS[kind_idx], center=(0.0, 0.0, 0.0),
                     scale=scale, points=n_points, label=kind_idx)
    return generate_scene([spec], n_points, seed=int(rng.integers(2**31))), scale


def module_activations(params, config: NetworkConfig, scene: Scene) -> np.ndarray:
    """Mean absolute output of each down-path orientation module."""
    plan = build_plan(scene.cloud.positions, config)
    result = network_forward(params, config, plan, input_features(scene.cloud, config))
    result.tape.release()
    return np.array([np.abs(result.stage_outputs[f"block_down{i}"].data).mean()
                     for i in range(config.n_stages)])


def scale_awareness_experiment(n_train: int = 200, n_test: int = 120,
                               epochs: int = 6, seed: int = 0,
                               config: NetworkConfig | None = None,
                               params=None) -> ScaleAwarenessResult:
    """Train on single-shape scenes, then test module/scale-bin alignment.

    Per test shape, the mean absolute activation of every orientation module
    is recorded; each module's activations are normalized by their mean over
    the test set (modules differ in baseline magnitude), and the argmax module
    is compared against the shape's log-scale bin. The gentle learning rate
    keeps the classification training from washing out the per-module scale
    selectivity it is supposed to sharpen.
    """
    if config is None:
        config = scale_awareness_config()
    rng = np.random.default_rng(seed)
    if params is None:
        train_scenes = [single_shape_scene(rng, config.input_points)[0]
                        for _ in range(n_train)]
        result = train(config, train_scenes, epochs=epochs,
                       settings=TrainSettings(learning_rate=2e-4),
                       batch_scenes=5)
        params = result.params
    tests = [single_shape_scene(rng, config.input_points) for _ in range(n_test)]
    scales = np.array([scale for _, scale in tests])
    raw = np.stack([module_activations(params, config, scene) for scene, _ in tests])
    module_means = raw.mean(axis=0)
    normalized = raw / module_means
    bins = log_scale_bins(scales, config.n_stages)
    rate = alignment_rate(normalized, bins)
    return ScaleAwarenessResult(rate=rate, chance=1.0 / config.n_stages,
                                scales=scales, bins=bins,
                                activations=normalized, module_means=module_means)


# ---------------------------------------------------------------------------
# grouping comparison


@dataclass
class GroupingCurvePoint:
    variant: str
    seed: int
    epoch: int
    train_loss: float
    test_accuracy: float
    test_miou: float


@dataclass
class CompareGroupingResult:
    points: list[GroupingCurvePoint]
    param_counts: dict[str, int]

    def final_accuracy(self, variant: str, seed: int) -> float:
        last = [p for p in self.points if p.variant == variant and p.seed == seed]
        return last[-1].test_accuracy

    def seeds(self) -> list[int]:
        return sorted({p.seed for p in self.points})

    def wins(self, variant: str, baseline: str) -> int:
        return sum(self.final_accuracy(variant, s) >= self.final_accuracy(baseline, s)
                   for s in self.seeds())

    def to_csv(self) -> str:
        lines = ["variant,seed,epoch,train_loss,test_accuracy,test_miou"]
        for p in self.points:
            lines.append(f"{p.variant},{p.seed},{p.epoch},{p.train_loss:.10g},"
                         f"{p.test_accuracy:.10g},{p.test_miou:.10g}")
        return "\n".join(lines) + "\n"


def _grouping_base_config() -> NetworkConfig:
    return NetworkConfig(input_points=128, num_classes=3,
                         stage_sizes=(32, 8), stage_widths=(32, 64),
                         input_width=16, oe_radii=(0.2, 0.4),
                         sa_radii=(0.25, 0.5), max_k=32)


def _scaled_widths(config: NetworkConfig, factor: float) -> NetworkConfig:
    return replace(config,
                   input_width=max(1, round(config.input_width * factor)),
                   stage_widths=tuple(max(1, round(w * factor))
                                      for w in config.stage_widths),
                   oe_dims=None)


def _match_budget(config: NetworkConfig, target: int, tolerance: float) -> NetworkConfig:
    """Widen a variant until its parameter count is within tolerance of target."""
    best, best_err = config, abs(parameter_count(init_network(config)) - target) / target
    for factor in np.linspace(1.0, 3.0, 201):
        candidate = _scaled_widths(config, float(factor))
        err = abs(parameter_count(init_network(candidate)) - target) / target
        if err < best_err:
            best, best_err = candidate, err
        if err <= tolerance:
            return candidate
    if best_err > tolerance:
        raise RuntimeError(f"could not match parameter budget within {tolerance:.0%}")
    return best


def grouping_variant_configs(seed: int = 0,
                             tolerance: float = 0.1) -> dict[str, NetworkConfig]:
    """Orientation, ball-query-convolution and plain baseline variants,
    parameter budgets matched within the given tolerance."""
    base = _grouping_base_config()
    orientation = replace(base, block_kind="orientation", seed=seed)
    target = parameter_count(init_network(orientation))
    ballconv = _match_budget(replace(base, block_kind="ballconv", ball_conv_k=8,
                                     seed=seed), target, tolerance)
    baseline = _match_budget(replace(base, block_kind="none", seed=seed),
                             target, tolerance)
    return {"orientation": orientation, "ballconv": ballconv, "baseline": baseline}


def grouping_dataset(n_train: int, n_test: int, n_points: int,
                     seed: int) -> tuple[list[Scene], list[Scene]]:
    scenes = tabletop_scenes(n_train + n_test, n_points=n_points, seed=seed)
    return scenes[:n_train], scenes[n_train:]


def compare_grouping(n_train: int = 48, n_test: int = 16, epochs: int = 120,
                     seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
                     data_seed: int = 100, eval_every: int = 5,
                     batch_scenes: int = 4) -> CompareGroupingResult:
    """Held-out accuracy curves for the three grouping variants.

    All variants see identical data; per seed, each variant trains from its
    own seeded initialization with the same scene order. The gentle learning
    rate lets the deeper grouping variants reach their ceilings instead of
    comparing half-converged runs.
    """
    base = _grouping_base_config()
    train_scenes, test_scenes = grouping_dataset(n_train, n_test,
                                                 base.input_points, data_seed)
    settings = TrainSettings(learning_rate=5e-4)
    points: list[GroupingCurvePoint] = []
    param_counts: dict[str, int] = {}
    for seed in seeds:
        variants = grouping_variant_configs(seed=seed)
        for name, config in variants.items():
            param_counts[name] = parameter_count(init_network(config))
            params = init_network(config)
            optimizer = OptimizerState(params.parameters(), settings)
            train_plans = prepare_plans(train_scenes, config)
            test_plans = prepare_plans(test_scenes, config)
            for epoch in range(epochs):
                result = train(config, train_scenes, epochs=1, params=params,
                               plans=train_plans, shuffle_seed=seed * 1000 + epoch,
                               optimizer=optimizer, batch_scenes=batch_scenes)
                if (epoch + 1) % eval_every == 0 or epoch == epochs - 1:
                    report = evaluate(params, config, test_scenes, test_plans)
                    points.append(GroupingCurvePoint(
                        variant=name, seed=seed, epoch=epoch,
                        train_loss=result.final_loss,
                        test_accuracy=report.overall_accuracy,
                        test_miou=report.mean_iou))
    return CompareGroupingResult(points=points, param_counts=param_counts)
