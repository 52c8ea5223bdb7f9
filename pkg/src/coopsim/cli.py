"""Command-line driver: dataset generation, training, evaluation, sweeps.

Every command reads one TOML config (defaults if omitted), honors
COOPSIM_ environment overrides and the --seed/--out flags, and writes all
artifacts under the configured output directory. Exit codes: 0 success,
1 runtime failure, 2 bad configuration, 3 missing input artifact (for
example weights that `train` has not produced yet).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from coopsim.config import ConfigError, RunConfig, load_config, parse_method_token
from coopsim.dataio import load_dataset, write_dataset, build_frame
from coopsim.detector import VALUES_PER_ANCHOR, default_anchors
from coopsim.evaluation import (
    Method,
    SweepResult,
    evaluate_methods,
    sweep_noise,
    sweep_scale,
    write_sweep_csv,
    write_svg_lines,
)
from coopsim.nn.network import build_network, load_checkpoint, save_checkpoint
from coopsim.pipelines import bandwidth_report, frame_participants
from coopsim.rng import substream
from coopsim.training import train
from coopsim.worldgen import gen_scene

__all__ = ["main"]

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BAD_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3

_COMMANDS = ("gen", "train", "eval", "sweep-noise", "sweep-scale",
             "bandwidth", "selftest")


class MissingArtifact(Exception):
    """A required input file has not been produced yet."""


def _dataset_dir(cfg: RunConfig, split: str) -> Path:
    return Path(cfg.output_dir) / "dataset" / split


def _checkpoint_path(cfg: RunConfig, strategy: str) -> Path:
    return Path(cfg.output_dir) / "weights" / f"{strategy}.ckpt"


def _fresh_network(cfg: RunConfig):
    return build_network(
        in_channels=3,
        encoder_widths=list(cfg.network.encoder_widths),
        encoder_pools=cfg.network.encoder_pools,
        head_widths=list(cfg.network.head_widths),
        out_channels=len(default_anchors()) * VALUES_PER_ANCHOR,
        rng=substream(cfg.seed, "init"),
    )


def _load_frames(cfg: RunConfig, split: str):
    root = _dataset_dir(cfg, split)
    try:
        return load_dataset(root)
    except FileNotFoundError as exc:
        raise MissingArtifact(
            f"{split} dataset not found under {root}; run `coopsim gen` first"
        ) from exc


def _load_methods(cfg: RunConfig) -> list[Method]:
    nets = {}
    methods = []
    for token in cfg.eval.methods:
        pipeline, aggregation, strategy = parse_method_token(token)
        if strategy not in nets:
            path = _checkpoint_path(cfg, strategy)
            if not path.exists():
                raise MissingArtifact(
                    f"missing weights {path}; run `coopsim train` with "
                    f"training.strategy = \"{strategy}\" first"
                )
            nets[strategy], _epoch, _seed = load_checkpoint(path)
        methods.append(Method(
            name=token, pipeline=pipeline, net=nets[strategy],
            strategy=strategy, aggregation=aggregation,
            tma=cfg.eval.alignment, conf_threshold=cfg.eval.conf_threshold,
        ))
    return methods


def _scene_seed(root_seed: int, split_index: int, frame_index: int) -> int:
    return int(
        substream(root_seed, "gen", split_index, frame_index).integers(0, 2**31 - 1)
    )


def cmd_gen(cfg: RunConfig) -> int:
    splits = (("train", cfg.dataset.train_frames), ("test", cfg.dataset.test_frames))
    for split_index, (split, count) in enumerate(splits):
        frames = []
        for i in range(count):
            scene = gen_scene(cfg.world, _scene_seed(cfg.seed, split_index, i))
            frames.append(build_frame(scene, frame_id=i, lidar=cfg.lidar))
        root = _dataset_dir(cfg, split)
        root.mkdir(parents=True, exist_ok=True)
        write_dataset(root, frames)
        print(f"wrote {count} frames to {root}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    frames = _load_frames(cfg, "train")
    net = _fresh_network(cfg)
    result = train(frames, net, cfg.grid, cfg.train_config())
    path = _checkpoint_path(cfg, cfg.training.strategy)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, path, epoch=cfg.training.epochs, seed=cfg.seed)
    curve_path = path.with_name(f"{cfg.training.strategy}_curve.csv")
    lines = ["step,loss"] + [f"{step},{value:.6f}" for step, value in result.curve]
    curve_path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    last = result.curve[-1][1] if result.curve else float("nan")
    print(
        f"trained {cfg.training.strategy} on {result.samples} samples "
        f"({result.skipped} skipped); final batch loss {last:.4f}"
    )
    print(f"wrote {path} and {curve_path}")
    return EXIT_OK


def _write_sweep(cfg: RunConfig, result: SweepResult, stem: str, x_axis: str) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    write_sweep_csv(csv_path, result)
    print(f"wrote {csv_path} ({len(result.rows)} rows, "
          f"{result.skipped_frames} frames skipped)")
    for cls in sorted({r.cls for r in result.rows}):
        series = {}
        for row in result.rows:
            if row.cls != cls:
                continue
            x = row.noise_m if x_axis == "noise" else row.n_coop
            series.setdefault(row.method, []).append((float(x), row.ap))
        svg_path = out / f"{stem}_{cls}.svg"
        label = "coop position error (m)" if x_axis == "noise" else "cooperators"
        write_svg_lines(
            svg_path, series,
            title=f"{cls} average precision vs {label}",
            x_label=label, y_label="average precision",
        )
        print(f"wrote {svg_path}")


def cmd_eval(cfg: RunConfig) -> int:
    frames = _load_frames(cfg, "test")
    methods = _load_methods(cfg)
    result = evaluate_methods(
        methods, frames, cfg.grid, n_coop=cfg.eval.n_coop,
        radius_m=cfg.sweep.radius_m, seed=cfg.seed,
    )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "eval.csv"
    write_sweep_csv(csv_path, result)
    for row in result.rows:
        print(f"{row.method} {row.cls}: ap {row.ap:.3f} "
              f"precision {row.precision:.3f} recall {row.recall:.3f}")
    print(f"wrote {csv_path} ({result.skipped_frames} frames skipped)")
    return EXIT_OK


def cmd_sweep_noise(cfg: RunConfig) -> int:
    frames = _load_frames(cfg, "test")
    methods = _load_methods(cfg)
    result = sweep_noise(
        methods, frames, cfg.grid, magnitudes=cfg.sweep.noise_magnitudes,
        n_coop=cfg.sweep.n_coop, radius_m=cfg.sweep.radius_m, seed=cfg.seed,
    )
    _write_sweep(cfg, result, "sweep_noise", x_axis="noise")
    return EXIT_OK


def cmd_sweep_scale(cfg: RunConfig) -> int:
    frames = _load_frames(cfg, "test")
    methods = _load_methods(cfg)
    result = sweep_scale(
        methods, frames, cfg.grid, counts=cfg.sweep.coop_counts,
        radius_m=cfg.sweep.radius_m, seed=cfg.seed,
    )
    _write_sweep(cfg, result, "sweep_scale", x_axis="coops")
    return EXIT_OK


def cmd_bandwidth(cfg: RunConfig) -> int:
    frames = _load_frames(cfg, "test")
    methods = _load_methods(cfg)
    net = methods[0].net
    parts = frame_participants(frames[0])
    if len(parts) < 2:
        raise MissingArtifact(
            "bandwidth needs at least two vehicles with sensors in test frame 0"
        )
    ego, coops = parts[0], parts[1:]
    report = bandwidth_report(
        ego, coops, net, cfg.grid, conf_threshold=cfg.eval.conf_threshold
    )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"frame 0, ego vehicle {ego.vehicle_id}, {len(coops)} cooperators",
        "method payload_bytes message_bytes",
    ]
    for method in ("raw", "feature", "hypothesis"):
        name, payload, message = report.row(method)
        lines.append(f"{name} {payload} {message}")
    for method, senders in report.per_sender.items():
        for vid, size in sorted(senders.items()):
            lines.append(f"{method} sender {vid}: {size} payload bytes")
    text = "\n".join(lines)
    (out / "bandwidth.txt").write_text(text + "\n", encoding="utf-8", newline="\n")
    print(text)
    print(f"wrote {out / 'bandwidth.txt'}")
    return EXIT_OK


def cmd_selftest(_cfg: RunConfig) -> int:
    from coopsim.selftest import run_selftest

    results = run_selftest()
    failed = 0
    for check in results:
        status = "PASS" if check.ok else "FAIL"
        print(f"{status} {check.name} ({check.seconds:.2f}s): {check.detail}")
        failed += not check.ok
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_ERROR


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML config file")
    common.add_argument("--seed", type=int, metavar="N", help="override the root seed")
    common.add_argument(
        "--jobs", type=int, default=os.cpu_count() or 1, metavar="N",
        help="worker pool size; results do not depend on it",
    )
    common.add_argument("--out", metavar="DIR", help="override the output directory")
    parser = argparse.ArgumentParser(
        prog="coopsim",
        description="Cooperative perception simulator and evaluation driver.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "generate the train/test scene datasets",
        "train": "train the detector on the generated train split",
        "eval": "score the configured methods on the test split",
        "sweep-noise": "AP versus coop localization error (CSV + SVG)",
        "sweep-scale": "AP versus number of cooperators (CSV + SVG)",
        "bandwidth": "per-frame payload accounting for all three pipelines",
        "selftest": "run the built-in property checks",
    }
    for name in _COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = args.out
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    handlers = {
        "gen": cmd_gen,
        "train": cmd_train,
        "eval": cmd_eval,
        "sweep-noise": cmd_sweep_noise,
        "sweep-scale": cmd_sweep_scale,
        "bandwidth": cmd_bandwidth,
        "selftest": cmd_selftest,
    }
    try:
        return handlers[args.command](cfg)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except Exception as exc:  # surface anything else as a plain failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
