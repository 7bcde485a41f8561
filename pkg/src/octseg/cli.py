"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, coverage, scale-exp,
compare-grouping. All outputs are CSV or the binary checkpoint format; exit
codes are 0 success, 2 usage or configuration error, 3 runtime error,
4 verification failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainSettings, load_config
from .data import (
    XyzlFormatError,
    generate_scene,
    load_xyzl,
    normalize_unit_cube,
    random_scene_specs,
    Scene,
    save_xyzl,
)
from .experiments import (
    compare_grouping,
    coverage_experiment,
    scale_awareness_experiment,
)
from .gradcheck import network_gradient_check
from .metrics import MetricsReport
from .network import NetworkConfig, build_plan, init_network, input_features
from .training import DivergenceError, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3
EXIT_VERIFY = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        self.code = code
        super().__init__(message)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _load_scenes(data_dir: Path, config: NetworkConfig) -> list[Scene]:
    files = sorted(data_dir.glob("*.xyzl"))
    if not files:
        raise CliError(f"no .xyzl files in {data_dir}", EXIT_USAGE)
    scenes = []
    for f in files:
        cloud = load_xyzl(f)
        if len(cloud) != config.input_points:
            raise CliError(f"{f.name}: {len(cloud)} points, config expects "
                           f"{config.input_points}", EXIT_USAGE)
        if cloud.labels is None:
            raise CliError(f"{f.name}: missing labels", EXIT_USAGE)
        scenes.append(Scene(cloud=cloud, provenance=np.zeros(len(cloud), dtype=np.int64),
                            specs=[], seed=0))
    return scenes


def _read_config(path: str | None) -> tuple[NetworkConfig, TrainSettings]:
    if path is None:
        return NetworkConfig(), TrainSettings()
    try:
        return load_config(path)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", EXIT_USAGE) from None
    except ConfigError as exc:
        raise CliError(f"config error: {exc}", EXIT_USAGE) from None


def _metrics_csv(report: MetricsReport) -> str:
    lines = ["metric,value",
             f"overall_accuracy,{report.overall_accuracy:.10g}",
             f"mean_iou,{report.mean_iou:.10g}"]
    for c, iou in enumerate(report.per_class_iou):
        lines.append(f"iou_class{c},{iou:.10g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    if args.scale_min > args.scale_max:
        raise CliError("invalid scale range: --scale-min exceeds --scale-max",
                       EXIT_USAGE)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}", EXIT_USAGE) from None
    rng = np.random.default_rng(args.seed)
    manifest = ["filename,seed,shape_kinds,scales"]
    for i in range(args.scenes):
        specs = random_scene_specs(rng, num_classes=args.classes,
                                   scale_range=(args.scale_min, args.scale_max))
        scene_seed = int(rng.integers(2**31))
        scene = generate_scene(specs, args.points, seed=scene_seed)
        if args.normalize:
            normalize_unit_cube(scene.cloud)
        name = f"scene_{i:05d}.xyzl"
        save_xyzl(scene.cloud, out / name)
        kinds = ";".join(s.kind for s in specs)
        scales = ";".join(f"{s.scale:.6g}" for s in specs)
        manifest.append(f"{name},{scene_seed},{kinds},{scales}")
    _write(out / "manifest.csv", "\n".join(manifest) + "\n")
    print(f"wrote {args.scenes} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config, settings = _read_config(args.config)
    scenes = _load_scenes(Path(args.data), config)
    try:
        result = train(config, scenes, epochs=args.epochs, settings=settings,
                       batch_scenes=args.batch_scenes)
    except DivergenceError as exc:
        raise CliError(str(exc), EXIT_RUNTIME) from None
    save_checkpoint(result.params.parameters(), args.out)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".csv")
    _write(log_path, result.history_csv())
    report = evaluate(result.params, config, scenes)
    print(f"final: loss {result.final_loss:.6g} accuracy "
          f"{report.overall_accuracy:.6g} miou {report.mean_iou:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config, _ = _read_config(args.config)
    scenes = _load_scenes(Path(args.data), config)
    params = init_network(config)
    try:
        load_checkpoint(params.parameters(), args.ckpt)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {args.ckpt}", EXIT_USAGE) from None
    except CheckpointError as exc:
        raise CliError(f"checkpoint error: {exc}", EXIT_USAGE) from None
    report = evaluate(params, config, scenes)
    _write(Path(args.out), _metrics_csv(report))
    print(f"accuracy {report.overall_accuracy:.6g} miou {report.mean_iou:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    config = NetworkConfig(input_points=16, stage_sizes=(4,), stage_widths=(8,),
                           input_width=4, oe_radii=(0.35,), sa_radii=(0.45,),
                           oe_dims=((4,),), max_k=16, seed=args.seed)
    positions = rng.uniform(0, 1, size=(config.input_points, 3))
    labels = rng.integers(0, config.num_classes, size=config.input_points)
    params = init_network(config)
    for p in params.parameters():
        p.data += rng.normal(scale=0.1, size=p.data.shape)
    plan = build_plan(positions, config)
    from .cloud import PointCloud
    feats = input_features(PointCloud(positions), config)
    err = network_gradient_check(params, config, plan, feats, labels)
    print(f"max relative error {err:.3e}")
    if err >= 1e-4:
        raise CliError(f"gradient check failed: {err:.3e} >= 1e-4", EXIT_VERIFY)
    return EXIT_OK


def cmd_coverage(args) -> int:
    result = coverage_experiment(n_scenes=args.scenes, seed=args.seed)
    _write(Path(args.out), result.to_csv())
    n_stages = max(r.stage for r in result.rows) + 1
    for variant in ("orientation", "ballquery"):
        means = [float(np.mean(result.counts(variant, s))) for s in range(n_stages)]
        print(f"{variant}: mean captured per stage {means}")
    full = all(r.captured == r.input_size for r in result.rows
               if r.variant == "orientation")
    if not full:
        raise CliError("orientation pipeline did not capture every point",
                       EXIT_VERIFY)
    return EXIT_OK


def cmd_scale_exp(args) -> int:
    result = scale_awareness_experiment(seed=args.seed, n_train=args.train_scenes,
                                        n_test=args.test_scenes, epochs=args.epochs)
    _write(Path(args.out), result.to_csv())
    print(f"alignment rate {result.rate:.4f} (chance {result.chance:.4f})")
    if result.rate <= 2 * result.chance:
        raise CliError(f"alignment rate {result.rate:.4f} not above "
                       f"2x chance {2 * result.chance:.4f}", EXIT_VERIFY)
    return EXIT_OK


def cmd_compare_grouping(args) -> int:
    result = compare_grouping(epochs=args.epochs, seeds=tuple(range(args.runs)))
    _write(Path(args.out), result.to_csv())
    for name, count in sorted(result.param_counts.items()):
        print(f"{name}: {count} parameters")
    wins = result.wins("orientation", "ballconv")
    print(f"orientation beats or ties ball-query grouping in {wins} of "
          f"{len(result.seeds())} runs")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="octseg",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic labeled scenes as XYZL")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale-min", type=float, default=0.1)
    p.add_argument("--scale-max", type=float, default=3.2)
    p.add_argument("--normalize", action="store_true",
                   help="rescale each scene into the unit cube")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a network on XYZL scenes")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="loss curve CSV (default: out with .csv)")
    p.add_argument("--batch-scenes", type=int, default=1)
    p.add_argument("--deterministic", action="store_true",
                   help="sequential execution (always on; flag kept for scripts)")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the network")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("coverage", help="captured-point counts per stage")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("scale-exp", help="module/scale-bin alignment experiment")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-scenes", type=int, default=200)
    p.add_argument("--test-scenes", type=int, default=120)
    p.add_argument("--epochs", type=int, default=6)
    p.set_defaults(func=cmd_scale_exp)

    p = sub.add_parser("compare-grouping", help="grouping-strategy accuracy curves")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--runs", type=int, default=5, help="number of seeded runs")
    p.set_defaults(func=cmd_compare_grouping)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help/--version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except XyzlFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - last-resort runtime guard
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
