import argparse
import logging
import os
import sys

import numpy as np

from . import config as cfg
from .bench import DEFAULT_BATCHES, SAMPLERS, parse_batches, run_benchmark, write_bench_csv
from .cameras import load_cameras, save_cameras
from .deform import apply_deformation, load_deformation
from .errors import DatasetError, IrisError, UsageError
from .field import FieldModel, bake
from .images import read_image, write_image
from .rca import RcaConfig
from .render import RenderConfig, render_image
from .ris import SamplerConfig
from .scene_io import load_point_cloud, load_scene, save_model, save_scene, scene_from_points
from .synthetic import LAYOUTS, generate_synthetic_scene
from .train import PruneConfig, TrainConfig, train

logger = logging.getLogger(__name__)


def _sampler_config(args):
    values = {}
    if getattr(args, "unbounded", False) or cfg.RIS_UNBOUNDED:
        values.update(lam=cfg.RIS_LAMBDA_UNBOUNDED, quota=cfg.RIS_QUOTA_UNBOUNDED)
    if getattr(args, "quota", None) is not None:
        values["quota"] = args.quota
    if getattr(args, "lam", None) is not None:
        values["lam"] = args.lam
    return SamplerConfig(**values)


def _render_config(args):
    tau = getattr(args, "tau_dist", None)
    return RenderConfig(sampler=_sampler_config(args), rca=RcaConfig(tau_dist=tau) if tau else RcaConfig(),
                        background=args.background, threads=args.threads)


def _add_sampler_flags(parser):
    parser.add_argument("--quota", type=int, default=None, help="Max samples per ray (default: 128, 256 unbounded)")
    parser.add_argument("--lambda", dest="lam", type=float, default=None,
                        help="Squared Mahalanobis threshold (default: 6.25, 11.3449 unbounded)")
    parser.add_argument("--unbounded", action="store_true", help="Use the unbounded-scene quota and lambda")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (default: all cores)")


def _cmd_render(args):
    scene = load_scene(args.scene, args.model)
    cameras = load_cameras(args.cameras)
    render_cfg = _render_config(args)
    if len(scene.anchors):
        render_cfg = render_cfg.resolved(scene.anchors)
    os.makedirs(args.out, exist_ok=True)
    for index, camera in enumerate(cameras):
        image = render_image(scene, camera, args.width, args.height, render_cfg)
        path = os.path.join(args.out, f"eval_img_{index:04}.ppm")
        write_image(path, image)
        logger.info("Wrote %s", path)
    return 0


def _load_training_images(cameras, image_dir):
    images, missing = [], []
    for index, camera in enumerate(cameras):
        name = os.path.basename(camera.image_path) if camera.image_path else f"r_{index}"
        candidates = [os.path.join(image_dir, name)] if os.path.splitext(name)[1] else [
            os.path.join(image_dir, name + ext) for ext in (".ppm", ".png")]
        found = next((path for path in candidates if os.path.exists(path)), None)
        if found is None:
            missing.append(name)
            continue
        images.append(read_image(found))
    if missing:
        raise DatasetError("no images for frames", missing)
    return images


def _cmd_train(args):
    scene = load_scene(args.scene, args.model)
    if scene.model is None:
        scene.model = FieldModel.initialize(seed=args.seed, with_hash_grid=not scene.baked)
    cameras = load_cameras(args.cameras)
    images = _load_training_images(cameras, args.images)
    train_cfg = TrainConfig(
        batch_size=args.batch, iterations=args.iters, seed=args.seed, val_every=args.val_every,
        threads=args.threads, render=_render_config(args), prune=PruneConfig(),
        prune_enabled=not args.no_prune, target_psnr=args.target_psnr,
    )
    os.makedirs(args.out, exist_ok=True)
    result = train(scene, cameras, images, train_cfg, args.out)
    save_scene(scene, os.path.join(args.out, "scene.iris"))
    save_model(scene.model, os.path.join(args.out, "model.irsm"))
    if result.history:
        logger.info("Final loss %.6g after %s iterations", result.final_loss, len(result.history))
    return 0


def _cmd_edit(args):
    scene = load_scene(args.scene)
    apply_deformation(scene, load_deformation(args.deform))
    save_scene(scene, args.out)
    return 0


def _cmd_bake(args):
    scene = load_scene(args.scene, args.model)
    bake(scene)
    save_scene(scene, args.out)
    if args.model_out and scene.model is not None:
        save_model(scene.model, args.model_out)
    return 0


def _cmd_info(args):
    scene = load_scene(args.scene)
    lo, hi = scene.anchors.bounds()
    print(f"anchors: {len(scene.anchors)}, baked: {str(scene.baked).lower()}, dim: {scene.anchors.feature_dim}")
    print(f"bounds: min {np.round(lo, 6).tolist()} max {np.round(hi, 6).tolist()}")
    print(f"edited: {str(scene.edited).lower()}")
    if len(scene.anchors):
        confidences = scene.anchors.confidences
        below = int(np.count_nonzero(confidences < cfg.PRUNE_TAU))
        print(f"confidence: min {confidences.min():.4f} mean {confidences.mean():.4f}, below prune tau: {below}")
    return 0


def _cmd_bench(args):
    scene = load_scene(args.scene)
    samplers = [name.strip() for name in args.samplers.split(",") if name.strip()]
    unknown = [name for name in samplers if name not in SAMPLERS]
    if unknown:
        raise ValueError(f"unknown samplers: {', '.join(unknown)}")
    rows = run_benchmark(scene, parse_batches(args.batches), samplers, args.repeats, args.threads,
                         args.baseline_max_batch, _sampler_config(args))
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as handle:
            write_bench_csv(rows, handle)
    else:
        write_bench_csv(rows, sys.stdout)
    return 0


def _cmd_init(args):
    grid_options = {"log2_table_size": args.hash_log2_size} if args.hash_log2_size else {}
    if args.points:
        scene = scene_from_points(load_point_cloud(args.points), seed=args.seed, feature_init=args.feature_init,
                                  **grid_options)
        cameras = None
    else:
        scene, cameras = generate_synthetic_scene(args.synthetic, args.count, seed=args.seed,
                                                  feature_init=args.feature_init, **grid_options)
    save_scene(scene, args.out)
    if args.model_out:
        save_model(scene.model, args.model_out)
    if args.cameras_out and cameras is not None:
        save_cameras(cameras, args.cameras_out)
    print(f"anchors: {len(scene.anchors)}, baked: {str(scene.baked).lower()}, dim: {scene.anchors.feature_dim}")
    return 0


class _ArgumentParser(argparse.ArgumentParser):
    """Raises on bad arguments so main() reports them as one `error:` line."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser():
    parser = _ArgumentParser(prog="iris", description="Hybrid Gaussian-neural ray renderer.")
    parser.add_argument("--log-level", default=None, help="Logging level (default: IRIS_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    render = sub.add_parser("render", help="Render one image per camera frame")
    render.add_argument("--scene", required=True)
    render.add_argument("--model", required=True)
    render.add_argument("--cameras", required=True, help="transforms.json manifest")
    render.add_argument("--out", required=True, help="Output directory")
    render.add_argument("--width", type=int, default=64)
    render.add_argument("--height", type=int, default=64)
    render.add_argument("--background", choices=("white", "black"), default="white")
    render.add_argument("--tau-dist", type=float, default=None, help="Aggregation validity radius")
    _add_sampler_flags(render)
    render.set_defaults(handler=_cmd_render)

    trainer = sub.add_parser("train", help="Fit anchors, features and MLPs to posed images")
    trainer.add_argument("--scene", required=True)
    trainer.add_argument("--model", default=None, help="Initial model (default: fresh model from --seed)")
    trainer.add_argument("--cameras", required=True)
    trainer.add_argument("--images", required=True, help="Directory with one image per frame")
    trainer.add_argument("--out", required=True)
    trainer.add_argument("--iters", type=int, default=cfg.TRAIN_ITERS)
    trainer.add_argument("--batch", type=int, default=cfg.TRAIN_BATCH)
    trainer.add_argument("--seed", type=int, default=cfg.TRAIN_SEED)
    trainer.add_argument("--val-every", type=int, default=cfg.TRAIN_VAL_EVERY)
    trainer.add_argument("--background", choices=("white", "black"), default="white")
    trainer.add_argument("--tau-dist", type=float, default=None)
    trainer.add_argument("--no-prune", action="store_true", help="Disable visibility-aware pruning")
    trainer.add_argument("--target-psnr", type=float, default=None, help="Stop once batch PSNR reaches this (dB)")
    _add_sampler_flags(trainer)
    trainer.set_defaults(handler=_cmd_train)

    edit = sub.add_parser("edit", help="Apply a deformation file to a baked scene")
    edit.add_argument("--scene", required=True)
    edit.add_argument("--deform", required=True)
    edit.add_argument("--out", required=True)
    edit.set_defaults(handler=_cmd_edit)

    baker = sub.add_parser("bake", help="Store hash-grid features on the anchors")
    baker.add_argument("--scene", required=True)
    baker.add_argument("--model", required=True)
    baker.add_argument("--out", required=True)
    baker.add_argument("--model-out", default=None, help="Write the grid-free model here")
    baker.set_defaults(handler=_cmd_bake)

    bench = sub.add_parser("bench-sampler", help="Sampler throughput vs batch size as CSV")
    bench.add_argument("--scene", required=True)
    bench.add_argument("--batches", default=f"{DEFAULT_BATCHES[0]}..{DEFAULT_BATCHES[-1]}",
                       help="e.g. 2^6..2^16 or 64,256,1024")
    bench.add_argument("--samplers", default=",".join(SAMPLERS))
    bench.add_argument("--repeats", type=int, default=cfg.BENCH_REPEATS)
    bench.add_argument("--baseline-max-batch", type=int, default=cfg.BENCH_BASELINE_MAX_BATCH)
    bench.add_argument("--out", default=None, help="CSV path (default: stdout)")
    _add_sampler_flags(bench)
    bench.set_defaults(handler=_cmd_bench)

    info = sub.add_parser("info", help="Print anchor count, bake flag, bounds and feature dim")
    info.add_argument("--scene", required=True)
    info.set_defaults(handler=_cmd_info)

    init = sub.add_parser("init", help="Create a scene and model from points or a synthetic layout")
    source = init.add_mutually_exclusive_group(required=True)
    source.add_argument("--points", default=None, help="PLY or .xyz point cloud")
    source.add_argument("--synthetic", choices=LAYOUTS, default=None)
    init.add_argument("--count", type=int, default=3)
    init.add_argument("--seed", type=int, default=cfg.MODEL_SEED)
    init.add_argument("--feature-init", choices=("hash", "random"), default="random")
    init.add_argument("--hash-log2-size", type=int, default=None)
    init.add_argument("--out", required=True, help="Scene file to write")
    init.add_argument("--model-out", default=None)
    init.add_argument("--cameras-out", default=None)
    init.set_defaults(handler=_cmd_init)
    return parser


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
        if args.log_level:
            logging.getLogger().setLevel(getattr(logging, args.log_level.upper(), logging.INFO))
        return args.handler(args)
    except (IrisError, OSError, ValueError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {message}", file=sys.stderr)
        return 1
