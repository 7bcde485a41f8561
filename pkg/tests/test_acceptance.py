"""Acceptance gate: the eight primary criteria, each at its stated tolerance.

Every test checks one criterion end to end, including its wall-clock budget.
The independent references here are vectorized full-scan implementations kept
free of the grid-index code paths they validate. The training-based criteria
are slow by design; the whole file is meant for a full (not quick) run.
"""
import time

import numpy as np

from octseg.autodiff import (
    Parameter,
    Tape,
    axis_conv2,
    concat_channels,
    gather_rows,
    group_max_pool,
    linear,
    moveaxis,
    relu,
    reshape,
    softmax_cross_entropy,
    weighted_gather_sum,
)
from octseg.checkpoint import load_checkpoint, save_checkpoint
from octseg.cli import main
from octseg.cloud import PointCloud
from octseg.config import TrainSettings
from octseg.data import load_xyzl, save_xyzl, tabletop_scenes
from octseg.experiments import compare_grouping, coverage_experiment, scale_awareness_experiment
from octseg.geometry import ball_query, build_index, farthest_point_sampling, knn, octant_search
from octseg.gradcheck import finite_difference_check, network_gradient_check
from octseg.network import NetworkConfig, build_plan, init_network, input_features
from octseg.training import OptimizerState, evaluate, prepare_plans, train


# ---------------------------------------------------------------------------
# criterion 1: oracle equivalence of the spatial queries


def scan_octant_search(positions, query_index, radius):
    offsets = positions - positions[query_index]
    d2 = np.einsum("ij,ij->i", offsets, offsets)
    codes = ((offsets[:, 0] >= 0).astype(int) + 2 * (offsets[:, 1] >= 0).astype(int)
             + 4 * (offsets[:, 2] >= 0).astype(int))
    neighbors = np.full(8, query_index, dtype=np.int64)
    duplicated = np.ones(8, dtype=bool)
    in_range = (d2 <= radius * radius)
    in_range[query_index] = False
    for code in range(8):
        members = np.nonzero(in_range & (codes == code))[0]
        if members.size:
            neighbors[code] = members[np.argmin(d2[members])]
            duplicated[code] = False
    return neighbors, duplicated


def scan_ball_query(positions, center, radius, max_k):
    d2 = np.einsum("ij,ij->i", positions - center, positions - center)
    found = np.nonzero(d2 <= radius * radius)[0][:max_k]
    if not found.size:
        return np.full(max_k, -1, dtype=np.int64), 0
    out = np.full(max_k, found[0], dtype=np.int64)
    out[: found.size] = found
    return out, int(found.size)


def scan_knn(positions, query, k):
    d2 = np.einsum("ij,ij->i", positions - query, positions - query)
    return np.lexsort((np.arange(len(positions)), d2))[:k]


def scan_fps(positions, m, first):
    chosen = [first]
    diffs = positions - positions[first]
    best = np.einsum("ij,ij->i", diffs, diffs)
    for _ in range(m - 1):
        nxt = int(np.argmax(best))  # first occurrence breaks ties by index
        chosen.append(nxt)
        diffs = positions - positions[nxt]
        best = np.minimum(best, np.einsum("ij,ij->i", diffs, diffs))
    return np.asarray(chosen, dtype=np.int64)


def test_criterion_1_spatial_query_oracle_equivalence():
    start = time.monotonic()
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(np.exp(rng.uniform(np.log(64), np.log(2048))))
        positions = rng.uniform(0.0, 1.0, size=(n, 3))
        cloud = PointCloud(positions)
        radius = float(rng.uniform(0.05, 0.3))
        index = build_index(cloud, radius)
        for q in rng.integers(0, n, size=8):
            hood = octant_search(index, cloud, int(q), radius)
            ref_idx, ref_dup = scan_octant_search(positions, int(q), radius)
            assert np.array_equal(hood.neighbor_indices, ref_idx)
            assert np.array_equal(hood.self_duplicated, ref_dup)
        for _ in range(8):
            center = rng.uniform(-0.1, 1.1, size=3)
            res = ball_query(index, cloud, center, radius, 16)
            ref_idx, ref_count = scan_ball_query(positions, center, radius, 16)
            assert res.found_count == ref_count
            if ref_count:
                assert np.array_equal(res.indices, ref_idx)
            k = int(rng.integers(1, 9))
            got = knn(index, cloud, center, k)
            assert np.array_equal(got.indices, scan_knn(positions, center, k))
        m = int(rng.integers(2, 33))
        picks = farthest_point_sampling(cloud, m, seed=int(rng.integers(1000)))
        assert np.array_equal(picks, scan_fps(positions, m, first=int(picks[0])))
    assert time.monotonic() - start < 30.0


# ---------------------------------------------------------------------------
# criterion 2: gradient checks for every operation and the tiny network


def spread_values(rng, shape, scale=1.0):
    """Random values with pairwise gaps far above the FD step, so max-pool
    argmaxes and ReLU signs cannot flip inside the sweep."""
    size = int(np.prod(shape))
    vals = (rng.permutation(size) + 0.5) / size - 0.5  # half-steps avoid 0.0
    return (vals * 2.0 * scale).reshape(shape)


def test_criterion_2_gradient_checks():
    start = time.monotonic()
    tol, seeds = 1e-4, range(10)

    def check(build, arrays):
        err = finite_difference_check(build, arrays)
        assert err < tol, err

    for seed in seeds:
        rng = np.random.default_rng(seed)
        y5 = rng.integers(0, 2, size=5)
        check(lambda t, xs: softmax_cross_entropy(linear(xs[0], xs[1], xs[2]), y5),
              [rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)])
        check(lambda t, xs: softmax_cross_entropy(
            reshape(relu(xs[0]), (6, 2)), np.zeros(6, dtype=int)),
              [spread_values(rng, (3, 4))])
        gidx, y6 = rng.integers(0, 4, size=6), rng.integers(0, 3, size=6)
        check(lambda t, xs: softmax_cross_entropy(gather_rows(xs[0], gidx), y6),
              [rng.normal(size=(4, 3))])
        yp = rng.integers(0, 3, size=5)
        check(lambda t, xs: softmax_cross_entropy(group_max_pool(xs[0]), yp),
              [spread_values(rng, (5, 4, 3))])
        y8 = rng.integers(0, 3, size=8)
        check(lambda t, xs: softmax_cross_entropy(
            reshape(axis_conv2(xs[0], xs[1], xs[2]), (8, 3)), y8),
              [rng.normal(size=(2, 2, 4, 3)), rng.normal(size=(2, 3, 3)), rng.normal(size=3)])
        y4 = rng.integers(0, 5, size=4)
        check(lambda t, xs: softmax_cross_entropy(concat_channels([xs[0], xs[1]]), y4),
              [rng.normal(size=(4, 2)), rng.normal(size=(4, 3))])
        ym = rng.integers(0, 6, size=4)
        check(lambda t, xs: softmax_cross_entropy(
            reshape(moveaxis(xs[0], 0, 1), (4, 6)), ym),
              [rng.normal(size=(3, 4, 2))])
        w = rng.uniform(0.1, 1.0, size=(5, 3))
        widx, yw = rng.integers(0, 6, size=(5, 3)), rng.integers(0, 3, size=5)
        check(lambda t, xs: softmax_cross_entropy(
            weighted_gather_sum(xs[0], widx, w / w.sum(axis=1, keepdims=True)), yw),
              [rng.normal(size=(6, 3))])
        ys = rng.integers(0, 3, size=7)
        check(lambda t, xs: softmax_cross_entropy(xs[0], ys),
              [rng.normal(size=(7, 3))])

    config = NetworkConfig(input_points=16, num_classes=3, stage_sizes=(4,),
                           stage_widths=(4,), input_width=4, oe_radii=(0.5,),
                           sa_radii=(0.5,), max_k=4, oe_dims=((4,),))
    for seed in seeds:
        rng = np.random.default_rng(100 + seed)
        positions = rng.uniform(0, 1, size=(16, 3))
        labels = rng.integers(0, 3, size=16)
        params = init_network(config)
        for p in params.parameters():
            p.data += rng.normal(scale=0.1, size=p.data.shape)
        plan = build_plan(positions, config)
        feats = input_features(PointCloud(positions), config)
        err = network_gradient_check(params, config, plan, feats, labels)
        assert err < tol, (seed, err)
    assert time.monotonic() - start < 120.0


# ---------------------------------------------------------------------------
# criterion 3: coverage at desk scale


def test_criterion_3_coverage():
    start = time.monotonic()
    result = coverage_experiment(n_scenes=20, seed=0)
    # orientation pipeline: exact full capture at every stage of 1024/256/64/16
    for stage, input_size in enumerate((1024, 256, 64)):
        counts = result.counts("orientation", stage)
        assert len(counts) == 20
        assert all(c == input_size for c in counts), (stage, counts)
    # ball-query-only pipeline: strictly fewer at the first stage on >= 95%
    ball_first = np.array(result.counts("ballquery", 0), dtype=float)
    assert np.mean(ball_first < 1024) >= 0.95
    # directional check of the "about 20% not integrated" claim
    assert 1.0 - ball_first.mean() / 1024 > 0.05
    assert time.monotonic() - start < 300.0


# ---------------------------------------------------------------------------
# criterion 4: toy segmentation training


def test_criterion_4_toy_segmentation_training():
    start = time.monotonic()
    config = NetworkConfig()
    scenes = tabletop_scenes(250, n_points=1024, seed=42)
    train_scenes, test_scenes = scenes[:200], scenes[200:]
    train_plans = prepare_plans(train_scenes, config)
    test_plans = prepare_plans(test_scenes, config)
    params = init_network(config)
    optimizer = OptimizerState(params.parameters(), TrainSettings())
    accuracy = miou = 0.0
    for epoch in range(40):  # well under the 100-epoch allowance
        train(config, train_scenes, epochs=1, params=params, plans=train_plans,
              shuffle_seed=epoch, optimizer=optimizer, batch_scenes=5)
        if epoch >= 9 and (epoch % 2 or epoch == 39):
            report = evaluate(params, config, test_scenes, test_plans)
            accuracy, miou = report.overall_accuracy, report.mean_iou
            if accuracy >= 0.95 and miou >= 0.85:
                break
    assert accuracy >= 0.95, accuracy
    assert miou >= 0.85, miou
    assert time.monotonic() - start < 1800.0


# ---------------------------------------------------------------------------
# criterion 5: scale awareness


def test_criterion_5_scale_awareness():
    start = time.monotonic()
    result = scale_awareness_experiment(seed=0)
    assert result.chance == 0.25
    assert result.rate > 0.5, result.rate
    assert time.monotonic() - start < 600.0


# ---------------------------------------------------------------------------
# criterion 6: grouping comparison under matched budgets


def test_criterion_6_grouping_comparison():
    start = time.monotonic()
    result = compare_grouping()
    target = result.param_counts["orientation"]
    for name, count in result.param_counts.items():
        assert abs(count - target) / target <= 0.1, (name, count)
    # the baseline grouping strategy is plain ball-query grouping; the
    # no-grouping-block variant stays in the CSV as an extra reference
    assert result.wins("orientation", "ballconv") >= 4, result.to_csv()
    assert time.monotonic() - start < 2700.0


# ---------------------------------------------------------------------------
# criterion 7: deterministic CLI training


CFG = """
input_points = 64
num_classes = 3
stage_sizes = 16, 8
stage_widths = 8, 16
input_width = 8
oe_radii = 0.3, 0.6
sa_radii = 0.4, 0.9
oe_dims = 8; 16
max_k = 32
"""


def test_criterion_7_deterministic_cli_training(tmp_path):
    cfg = tmp_path / "net.cfg"
    cfg.write_text(CFG)
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--scenes", "4",
                 "--points", "64", "--seed", "3", "--normalize"]) == 0
    blobs = []
    for name in ("one", "two"):
        ckpt = tmp_path / f"{name}.ckpt"
        assert main(["train", "--config", str(cfg), "--data", str(data),
                     "--epochs", "3", "--out", str(ckpt), "--deterministic"]) == 0
        blobs.append((ckpt.read_bytes(), ckpt.with_suffix(".csv").read_bytes()))
    assert blobs[0][0] == blobs[1][0]  # checkpoint bytes
    assert blobs[0][1] == blobs[1][1]  # training log bytes


# ---------------------------------------------------------------------------
# criterion 8: format round-trips


def test_criterion_8_format_roundtrips(tmp_path):
    rng = np.random.default_rng(7)
    for i in range(100):
        n = int(rng.integers(1, 60))
        cloud = PointCloud(rng.normal(scale=10.0, size=(n, 3)),
                           colors=rng.uniform(size=(n, 3)) if i % 2 else None,
                           labels=rng.integers(0, 5, size=n))
        path = tmp_path / "scene.xyzl"
        save_xyzl(cloud, path)
        back = load_xyzl(path)
        assert np.array_equal(back.positions, cloud.positions)
        assert np.array_equal(back.labels, cloud.labels)
        if cloud.colors is None:
            assert back.colors is None
        else:
            assert np.array_equal(back.colors, cloud.colors)
    for i in range(100):
        count = int(rng.integers(1, 6))
        params = [Parameter(f"p{j}", rng.normal(size=tuple(rng.integers(1, 5, size=rng.integers(1, 4)))), None)
                  for j in range(count)]
        for p in params:
            p.grad = np.zeros_like(p.data)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        fresh = [Parameter(p.name, np.zeros_like(p.data), np.zeros_like(p.data))
                 for p in params]
        load_checkpoint(fresh, path)
        for orig, loaded in zip(params, fresh):
            assert np.array_equal(orig.data, loaded.data)
