"""Command-line entry points.

Subcommands: gen (synthesize a dataset), train (fit and checkpoint),
eval (task-metric report from a checkpoint), score (drive-log metrics),
bench (throughput and peak memory). Exit codes: 0 success, 2 bad
config/usage, 3 numeric failure, 4 corrupt data. The SKGE_SEED
environment variable overrides --seed wherever one is accepted.
"""

from __future__ import annotations

import argparse
import os
import resource
import sys
import time
from typing import Dict, List

import numpy as np

from . import checkpoint, scoring
from .config import RunConfig
from .data import SceneConfig, load_dataset, save_dataset, synth_scene
from .errors import ConfigError, DataError, NumericError
from .heads import NUM_CLASSES, seg_argmax
from .model import build_model, make_batch
from .skge import parse_route, route_from_code
from .training import TASKS, compute_task_losses, fit

REPORT_FIELDS = ("ss_metric", "wp_metric", "str_metric", "thr_metric",
                 "brk_metric", "redl_metric", "stops_metric")


def _seed(args) -> int:
    env = os.environ.get("SKGE_SEED")
    return int(env) if env is not None else int(args.seed)


def cmd_gen(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    if args.size < 16:
        raise ConfigError(f"--size must be >= 16, got {args.size}")
    seed = _seed(args)
    scene = SceneConfig(size=args.size, with_lidar=args.with_lidar)
    samples = [synth_scene(seed + i, scene) for i in range(args.count)]
    save_dataset(args.out, samples, [seed + i for i in range(args.count)])
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def _train_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg.load_file(args.config)
    if args.skge_route is not None:
        route = str(parse_route(args.skge_route))
        cfg.set("skge.route_a", route)
        cfg.set("skge.route_b", route)
    if args.seed is not None or os.environ.get("SKGE_SEED") is not None:
        env = os.environ.get("SKGE_SEED")
        cfg.set("train.seed", int(env) if env is not None else int(args.seed))
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    samples = load_dataset(args.data)
    metrics = args.metrics or args.out + ".metrics.ndjson"
    state = fit(samples, cfg, args.out, metrics_path=metrics,
                epochs=args.epochs, resume=args.resume)
    print(f"trained {state.epoch} epochs; best validation loss "
          f"{state.best_val:.6f}; checkpoint {args.out}; metrics {metrics}")
    if state.stopped_early:
        print(f"stopped early after {state.stagnant} stagnant epochs")
    return 0


def _config_from_meta(meta: Dict[str, float]) -> RunConfig:
    cfg = RunConfig()
    cfg.set("backbone.input_size", int(meta["input_size"]))
    cfg.set("backbone.patch", int(meta["patch"]))
    cfg.set("backbone.window", int(meta["window"]))
    cfg.set("backbone.embed_dim", int(meta["embed_dim"]))
    cfg.set("backbone.depths", ",".join(str(int(meta[f"depth{i}"])) for i in range(4)))
    cfg.set("backbone.heads", ",".join(str(int(meta[f"head{i}"])) for i in range(4)))
    cfg.set("bev.size", int(meta["bev_size"]))
    cfg.set("bev.resolution_m", float(meta["bev_resolution_m"]))
    cfg.set("bev.use_lidar", int(meta["use_lidar"]))
    cfg.set("skge.route_a", str(route_from_code(meta["route_a"])))
    cfg.set("skge.route_b", str(route_from_code(meta["route_b"])))
    return cfg


def _load_model_from_ckpt(path):
    meta = checkpoint.read_meta(path)
    needed = {"input_size", "patch", "window", "embed_dim", "route_a", "route_b"}
    missing = needed - set(meta)
    if missing:
        raise ConfigError(f"{path}: checkpoint metadata missing {sorted(missing)}")
    cfg = _config_from_meta(meta)
    model = build_model(cfg, np.random.default_rng(0))
    checkpoint.load_model(path, model)
    return model, cfg


def evaluate_dataset(model, cfg, samples, batch_size: int = 8) -> Dict[str, float]:
    """The 7-field task-metric report plus the combined test metric."""
    use_lidar = bool(int(cfg["bev.use_lidar"]))
    pred_masks: List[np.ndarray] = []
    gt_masks: List[np.ndarray] = []
    wp_pred, wp_gt = [], []
    ctrl_pred, ctrl_gt = [], []
    tl_pred, tl_gt, ss_pred, ss_gt = [], [], [], []
    loss_sums = np.zeros(len(TASKS))
    seen = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = make_batch(chunk, use_lidar)
        out = model.forward(batch)
        losses = compute_task_losses(out, batch)
        loss_sums += np.array([losses[t].item() for t in TASKS]) * len(chunk)
        seen += len(chunk)

        cls = seg_argmax(out.seg_logits.data)
        onehot = np.eye(NUM_CLASSES, dtype=bool)[cls].transpose(0, 3, 1, 2)
        pred_masks.append(onehot)
        gt_masks.append(batch["seg_gt"].astype(bool))
        wp_pred.append(out.waypoints.data)
        wp_gt.append(batch["waypoints_gt"])
        ctrl_pred.append(np.concatenate(
            [out.steering.data, out.throttle.data, out.brake.data], axis=1))
        ctrl_gt.append(batch["controls_gt"])
        tl_pred.append(out.tl_prob.data)
        tl_gt.append(batch["tl_gt"])
        ss_pred.append(out.ss_prob.data)
        ss_gt.append(batch["ss_gt"])

    pred_all = np.concatenate(pred_masks).transpose(1, 0, 2, 3)
    gt_all = np.concatenate(gt_masks).transpose(1, 0, 2, 3)
    _, mean_iou = scoring.iou(pred_all, gt_all)
    ctrl_p = np.concatenate(ctrl_pred)
    ctrl_g = np.concatenate(ctrl_gt)
    report = {
        "ss_metric": mean_iou,
        "wp_metric": scoring.mae(np.concatenate(wp_pred), np.concatenate(wp_gt)),
        "str_metric": scoring.mae(ctrl_p[:, 0], ctrl_g[:, 0]),
        "thr_metric": scoring.mae(ctrl_p[:, 1], ctrl_g[:, 1]),
        "brk_metric": scoring.mae(ctrl_p[:, 2], ctrl_g[:, 2]),
        "redl_metric": scoring.accuracy(np.concatenate(tl_pred), np.concatenate(tl_gt)),
        "stops_metric": scoring.accuracy(np.concatenate(ss_pred), np.concatenate(ss_gt)),
    }
    report["test_metric"] = float(loss_sums.sum() / (seen * len(TASKS)))
    return report


def cmd_eval(args) -> int:
    model, cfg = _load_model_from_ckpt(args.ckpt)
    samples = load_dataset(args.data)
    report = evaluate_dataset(model, cfg, samples)
    for key in REPORT_FIELDS + ("test_metric",):
        print(f"{key}={report[key]:.6f}")
    return 0


def cmd_score(args) -> int:
    if not os.path.isdir(args.logs):
        raise ConfigError(f"--logs {args.logs} is not a directory")
    files = sorted(os.path.join(args.logs, f) for f in os.listdir(args.logs)
                   if os.path.isfile(os.path.join(args.logs, f)))
    if not files:
        raise ConfigError(f"no log files in {args.logs}")
    logs = [scoring.read_drive_log(f) for f in files]
    result = scoring.score_routes(logs)
    print(f"{'route':<16}{'RC':>10}{'IP':>10}{'DS':>10}")
    for row in result["routes"]:
        print(f"{row['route_id']:<16}{row['rc']:>10.4f}{row['ip']:>10.4f}"
              f"{row['ds']:>10.4f}")
    print(f"{'mean':<16}{result['mean_rc']:>10.4f}{result['mean_ip']:>10.4f}"
          f"{result['driving_score']:>10.4f}")
    aggregate = result["mean_rc"] * result["mean_ip"]
    print(f"note: mean_rc x mean_ip = {aggregate:.4f}; the driving score is "
          f"the per-route mean of rc x ip, so the two differ whenever "
          f"penalties vary across routes")
    print(f"driving_score={result['driving_score']:.4f}")
    return 0


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise ConfigError(f"--iters must be >= 1, got {args.iters}")
    model, cfg = _load_model_from_ckpt(args.ckpt)
    sample = synth_scene(_seed(args),
                         SceneConfig(size=int(cfg["backbone.input_size"])))
    batch = make_batch([sample], bool(int(cfg["bev.use_lidar"])))
    for _ in range(10):
        model.forward(batch)
    start = time.perf_counter()
    for _ in range(args.iters):
        model.forward(batch)
    elapsed = time.perf_counter() - start
    fps = args.iters / elapsed if elapsed > 0 else float("inf")
    peak_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    print(f"fps={fps:.3f}")
    print(f"peak_rss_mb={peak_kb / 1024.0:.1f}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skgedrive",
                                     description="desk-scale driving pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--with-lidar", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train and checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default=None)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--skge-route", default=None,
                   help="skip route for both encoders, e.g. '1->4' or 'none'")
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="task-metric report")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score drive logs")
    p.add_argument("--logs", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("bench", help="throughput and memory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"corrupt data: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
