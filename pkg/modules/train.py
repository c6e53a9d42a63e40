"""Photometric training: recorded forward pass, hand-derived reverse-mode
gradients, Adam updates and visibility-aware pruning."""
import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import config as cfg
from .errors import GradientError
from .field import composite_batch, decode_batch
from .gaussian import quat_normalize, quat_to_rotmat, rotmat_grad_to_quat
from .images import to_float, write_image
from .rca import rca_aggregate
from .render import RenderConfig, render_image
from .ris import RayBatch, ris_sample_batch

logger = logging.getLogger(__name__)

LOG_HEADER = ["iter", "loss", "psnr", "num_anchors", "rays_per_second"]
GEOMETRY_GROUPS = ("anchors.means", "anchors.rotations", "anchors.scales")


@dataclass
class PruneConfig:
    decay: float = cfg.PRUNE_DECAY
    tau: float = cfg.PRUNE_TAU
    boost_policy: str = cfg.PRUNE_BOOST_POLICY
    boost_increment: float = cfg.PRUNE_BOOST_INCREMENT
    initial_confidence: float = cfg.INITIAL_CONFIDENCE

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("prune decay must lie in (0, 1)")
        if not 0.0 < self.tau < self.initial_confidence:
            raise ValueError("prune tau must lie in (0, initial confidence)")
        if self.boost_policy not in ("reset", "increment"):
            raise ValueError(f"unknown boost policy {self.boost_policy!r}")

    def survival_iterations(self):
        """Iteration at which a never-selected anchor is removed."""
        return math.ceil(math.log(self.tau / self.initial_confidence) / math.log(self.decay))


@dataclass
class TrainConfig:
    lr_hash: float = cfg.LR_HASH
    lr_mlp: float = cfg.LR_MLP
    lr_features: float = cfg.LR_FEATURES
    lr_geometry: float = cfg.LR_GEOMETRY
    lr_opacity: float = cfg.LR_OPACITY
    batch_size: int = cfg.TRAIN_BATCH
    iterations: int = cfg.TRAIN_ITERS
    seed: int = cfg.TRAIN_SEED
    beta1: float = cfg.ADAM_BETA1
    beta2: float = cfg.ADAM_BETA2
    eps: float = cfg.ADAM_EPS
    log_every: int = cfg.TRAIN_LOG_EVERY
    val_every: int = cfg.TRAIN_VAL_EVERY
    threads: Optional[int] = None
    train_geometry: bool = True
    prune_enabled: bool = True
    target_psnr: Optional[float] = None
    render: RenderConfig = field(default_factory=RenderConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)

    def __post_init__(self):
        for name in ("lr_hash", "lr_mlp", "lr_features", "lr_geometry", "lr_opacity"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")

    def learning_rate(self, name):
        if name.startswith("hash."):
            return self.lr_hash
        if name.startswith(("geometry.", "color.")):
            return self.lr_mlp
        if name == "anchors.features":
            return self.lr_features
        if name == "anchors.opacity_logits":
            return self.lr_opacity
        return self.lr_geometry


def loss(rendered, target):
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: rendered {rendered.shape} vs target {target.shape}")
    return float(np.mean((rendered - target) ** 2))


def psnr(mse):
    if mse <= 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


@dataclass
class FrameContext:
    """Per-iteration state shared read-only by every ray chunk."""

    render: RenderConfig
    features: np.ndarray
    grid_cache: object
    whitening: np.ndarray
    bvh: object


def prepare_context(scene, render_cfg: RenderConfig = None) -> FrameContext:
    render_cfg = render_cfg or RenderConfig()
    render_cfg = RenderConfig(render_cfg.sampler, render_cfg.rca.resolve(scene.anchors), render_cfg.background,
                              render_cfg.threads)
    features, grid_cache = scene.anchor_features(cache=True)
    return FrameContext(render_cfg, features, grid_cache, scene.anchors.whitening(), scene.bvh(render_cfg.sampler.lam))


@dataclass
class ForwardRecord:
    rays: RayBatch
    stream: object
    aggregation: object
    decoded: object
    composite: object
    context: FrameContext

    @property
    def rgb(self):
        return self.composite.rgb


def forward(scene, rays: RayBatch, render_cfg: RenderConfig = None, samples=None, context=None) -> ForwardRecord:
    """Recorded forward pass; passing `samples` freezes the RIS selection and positions."""
    context = context or prepare_context(scene, render_cfg)
    anchors = scene.anchors
    stream = samples
    if stream is None:
        stream = ris_sample_batch(rays, context.bvh, anchors, context.render.sampler, context.render.threads)
    agg = rca_aggregate(stream, anchors, context.render.rca, context.features, context.whitening)
    decoded = decode_batch(agg.feature_hat, agg.alpha_hat, rays.directions[stream.ray_slot],
                           anchors.deform_rotations[stream.anchor_index], scene.model, record=True)
    comp = composite_batch(decoded.sigma_eff, decoded.alpha, decoded.color, stream.offsets,
                           np.asarray(context.render.background))
    return ForwardRecord(rays, stream, agg, decoded, comp, context)


@dataclass
class GradientBundle:
    groups: Dict[str, np.ndarray]
    loss: float = 0.0
    selected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __getitem__(self, name):
        return self.groups[name]

    def __contains__(self, name):
        return name in self.groups

    def names(self):
        return list(self.groups)


def _suffix_exclusive(values, offsets):
    """Per-group sum over the samples strictly behind each sample."""
    counts = np.diff(offsets)
    rays = counts.shape[0]
    slot = np.repeat(np.arange(rays), counts)
    local = np.arange(values.shape[0]) - offsets[slot]
    width = int(counts.max()) if rays and counts.max() > 0 else 0
    padded = np.zeros((rays, width + 1) + values.shape[1:])
    padded[slot, local] = values
    behind = np.cumsum(padded[:, ::-1], axis=1)[:, ::-1]
    return behind[slot, local + 1]


def _backward_partial(record: ForwardRecord, targets, scene, normalizer):
    """Raw per-chunk gradients before hash-grid and quaternion reduction."""
    model = scene.model
    anchors = scene.anchors
    stream, agg, dec, comp = record.stream, record.aggregation, record.decoded, record.composite
    background = np.asarray(record.context.render.background)
    count, dim = len(anchors), record.context.features.shape[1]

    residual = comp.rgb - targets
    inside = (comp.unclamped >= -1e-12) & (comp.unclamped <= 1.0 + 1e-12)
    grad_rgb = 2.0 * residual / normalizer * inside

    slot = stream.ray_slot
    grad_k = grad_rgb[slot]
    trans = comp.transmittance
    weights = trans * dec.alpha
    grad_color = grad_k * weights[:, None]
    behind = _suffix_exclusive(weights[:, None] * dec.color, stream.offsets) + comp.residual[slot][:, None] * background
    trans_next = trans * np.exp(-dec.sigma_eff)
    grad_sigma = np.sum(grad_k * (trans_next[:, None] * dec.color - behind), axis=1)

    grad_alpha_hat = grad_sigma * dec.sigma_prime
    pre = dec.raw_density + model.density_bias
    grad_raw = grad_sigma * agg.alpha_hat * dec.sigma_prime * (np.abs(pre) < model.exp_clamp)

    partial = {}
    grad_color_in, color_grads = model.color.backward(dec.color_trace, grad_color)
    grad_geo_out = np.concatenate([grad_raw[:, None], grad_color_in[:, :cfg.GEOMETRY_OUT - 1]], axis=1)
    grad_f_hat, geo_grads = model.geometry.backward(dec.geometry_trace, grad_geo_out)
    for head, grads in (("geometry", geo_grads), ("color", color_grads)):
        for index, (grad_w, grad_b) in enumerate(grads):
            partial[f"{head}.W{index}"] = grad_w
            partial[f"{head}.b{index}"] = grad_b

    w = agg.weights
    ids = agg.anchors.reshape(-1)
    grad_w = np.einsum("kd,kwd->kw", grad_f_hat, agg.window_features) + grad_alpha_hat[:, None] * agg.alpha_raw
    grad_alpha_raw = grad_alpha_hat[:, None] * w

    grad_features = np.zeros((count, dim))
    np.add.at(grad_features, ids, (w[:, :, None] * grad_f_hat[:, None, :]).reshape(-1, dim))

    grad_opacity = np.zeros(count)
    np.add.at(grad_opacity, ids, (grad_alpha_raw * agg.falloff * agg.opacity * (1.0 - agg.opacity)).reshape(-1))

    grad_logits = w * (grad_w - np.sum(w * grad_w, axis=1, keepdims=True)) + grad_alpha_raw * agg.alpha_raw
    grad_logits = np.where(agg.mask, grad_logits, 0.0)
    grad_delta = -agg.logit_scale * grad_logits
    grad_y = 2.0 * agg.whitened * grad_delta[..., None]
    grad_y_scaled = grad_y / anchors.scales[agg.anchors]
    rot = quat_to_rotmat(anchors.rotations)[agg.anchors]

    grad_means = np.zeros((count, 3))
    np.add.at(grad_means, ids, -np.einsum("kwij,kwj->kwi", rot, grad_y_scaled).reshape(-1, 3))
    grad_scales = np.zeros((count, 3))
    np.add.at(grad_scales, ids, (-agg.whitened * grad_y_scaled).reshape(-1, 3))
    grad_rot = np.zeros((count, 3, 3))
    np.add.at(grad_rot, ids, np.einsum("kwm,kwi->kwmi", agg.diff, grad_y_scaled).reshape(-1, 3, 3))

    partial["features"] = grad_features
    partial["means"] = grad_means
    partial["scales"] = grad_scales
    partial["rot"] = grad_rot
    partial["opacity"] = grad_opacity
    partial["loss_sum"] = float(np.sum(residual ** 2))
    return partial


def _finalize(partial, scene, context: FrameContext, normalizer, selected):
    anchors = scene.anchors
    groups = {name: value for name, value in partial.items()
              if name.startswith(("geometry.", "color."))}
    grad_means = partial["means"]
    if context.grid_cache is not None:
        grid = scene.model.hash_grid
        groups["hash.tables"] = grid.backward_tables(context.grid_cache, partial["features"])
        grad_unit = grid.backward_points(context.grid_cache, partial["features"])
        grad_means = grad_means + grad_unit @ scene.normalization[:, :3]
    else:
        groups["anchors.features"] = partial["features"]
    groups["anchors.means"] = grad_means
    groups["anchors.rotations"] = rotmat_grad_to_quat(anchors.rotations, partial["rot"]) if len(anchors) else np.zeros((0, 4))
    groups["anchors.scales"] = partial["scales"]
    groups["anchors.opacity_logits"] = partial["opacity"]
    for name, grad in groups.items():
        if not np.all(np.isfinite(grad)):
            raise GradientError(name)
    return GradientBundle(groups, partial["loss_sum"] / normalizer, selected)


def backward(record: ForwardRecord, targets, scene) -> GradientBundle:
    """Exact gradients of the MSE loss of one recorded forward pass."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    normalizer = 3.0 * max(1, len(record.rays))
    partial = _backward_partial(record, targets, scene, normalizer)
    return _finalize(partial, scene, record.context, normalizer, record.stream.selected_anchors())


def compute_gradients(scene, rays: RayBatch, targets, render_cfg: RenderConfig = None, threads=None,
                      samples=None, context=None) -> GradientBundle:
    """Forward + backward over contiguous ray chunks, partials summed in chunk order."""
    context = context or prepare_context(scene, render_cfg)
    threads = max(1, int(threads or context.render.threads or cfg.THREADS))
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if samples is None:
        samples = ris_sample_batch(rays, context.bvh, scene.anchors, context.render.sampler, threads)
    count = len(rays)
    normalizer = 3.0 * max(1, count)
    size = max(1, math.ceil(count / threads))
    spans = [(start, min(count, start + size)) for start in range(0, count, size)] or [(0, 0)]

    def run(span):
        start, stop = span
        record = forward(scene, rays.take(slice(start, stop)), samples=samples.slice_rays(start, stop), context=context)
        return _backward_partial(record, targets[start:stop], scene, normalizer)

    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(run, spans))
    else:
        partials = [run(span) for span in spans]

    total = partials[0]
    for part in partials[1:]:
        total = {name: total[name] + part[name] for name in total}
    return _finalize(total, scene, context, normalizer, samples.selected_anchors())


class Adam:
    """Adam with per-group learning rates over a dict of named arrays."""

    def __init__(self, learning_rate, beta1=cfg.ADAM_BETA1, beta2=cfg.ADAM_BETA2, eps=cfg.ADAM_EPS):
        self.learning_rate = learning_rate if callable(learning_rate) else (lambda name: float(learning_rate))
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, param in params.items():
            if name not in grads:
                continue
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(param)
                self.v[name] = np.zeros_like(param)
            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * g
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(self.v[name] * (1.0 / bc2)) + self.eps
            param -= (self.learning_rate(name) / bc1) * self.m[name] / denom

    def keep_rows(self, keep):
        """Drop moment rows of removed anchors."""
        for name in list(self.m):
            if name.startswith("anchors."):
                self.m[name] = self.m[name][keep]
                self.v[name] = self.v[name][keep]


def make_optimizer(train_cfg: TrainConfig) -> Adam:
    return Adam(train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)


def scene_parameters(scene, train_geometry=True):
    params = dict(scene.model.parameters())
    anchors = scene.anchors
    if scene.baked or scene.model.hash_grid is None:
        params["anchors.features"] = anchors.features
    params["anchors.opacity_logits"] = anchors.opacity_logits
    if train_geometry:
        params["anchors.means"] = anchors.means
        params["anchors.rotations"] = anchors.rotations
        params["anchors.scales"] = anchors.scales
    return params


def step(scene, bundle: GradientBundle, optimizer: Adam, train_cfg: TrainConfig = None):
    train_cfg = train_cfg or TrainConfig()
    params = scene_parameters(scene, train_cfg.train_geometry)
    for name, param in params.items():
        if name in bundle.groups and bundle.groups[name].shape != param.shape:
            raise ValueError(f"gradient shape {bundle.groups[name].shape} does not match {name} {param.shape}")
    optimizer.step(params, bundle.groups)
    anchors = scene.anchors
    if train_cfg.train_geometry and len(anchors):
        anchors.rotations[:] = quat_normalize(anchors.rotations)
        np.maximum(anchors.scales, cfg.MIN_SCALE, out=anchors.scales)
        scene.mark_stale()
    return scene


def prune_update(scene, selected, prune_cfg: PruneConfig = None, optimizer: Adam = None):
    prune_cfg = prune_cfg or PruneConfig()
    anchors = scene.anchors
    confidences = anchors.confidences
    confidences *= prune_cfg.decay
    selected = np.unique(np.asarray(selected, dtype=np.int64))
    if selected.size:
        if prune_cfg.boost_policy == "reset":
            confidences[selected] = prune_cfg.initial_confidence
        else:
            confidences[selected] = np.minimum(1.0, confidences[selected] + prune_cfg.boost_increment)
    keep = confidences >= prune_cfg.tau
    if not np.all(keep):
        removed = int(np.count_nonzero(~keep))
        scene.remove_anchors(keep)
        if optimizer is not None:
            optimizer.keep_rows(keep)
        logger.info("Pruned %s anchors (%s remain)", removed, len(scene.anchors))
    return scene


@dataclass
class TrainResult:
    history: List[tuple] = field(default_factory=list)

    @property
    def losses(self):
        return [row[1] for row in self.history]

    @property
    def final_loss(self):
        return self.history[-1][1] if self.history else None


def _pixel_pool(cameras, images):
    origins, directions, targets = [], [], []
    for camera, image in zip(cameras, images):
        height, width = image.shape[:2]
        rays = camera.generate_rays(width, height)
        origins.append(rays.origins)
        directions.append(rays.directions)
        targets.append(to_float(image).reshape(-1, 3))
    return RayBatch(np.concatenate(origins), np.concatenate(directions)), np.concatenate(targets)


def train(scene, cameras, images, train_cfg: TrainConfig = None, out_dir=None) -> TrainResult:
    train_cfg = train_cfg or TrainConfig()
    result = TrainResult()
    if train_cfg.iterations <= 0:
        return result
    if len(scene.anchors):
        train_cfg.render = train_cfg.render.resolved(scene.anchors)
    pool, pool_targets = _pixel_pool(cameras, images)
    rng = np.random.default_rng(train_cfg.seed)
    optimizer = make_optimizer(train_cfg)

    log_handle = None
    writer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_handle = open(os.path.join(out_dir, "train_log.csv"), "w", newline="", encoding="utf-8")
        writer = csv.writer(log_handle)
        writer.writerow(LOG_HEADER)

    try:
        for iteration in range(1, train_cfg.iterations + 1):
            started = time.perf_counter()
            if train_cfg.batch_size >= len(pool):
                rows = np.arange(len(pool))
            else:
                rows = np.sort(rng.choice(len(pool), size=train_cfg.batch_size, replace=False))
            bundle = compute_gradients(scene, pool.take(rows), pool_targets[rows], train_cfg.render, train_cfg.threads)
            step(scene, bundle, optimizer, train_cfg)
            if train_cfg.prune_enabled:
                prune_update(scene, bundle.selected, train_cfg.prune, optimizer)
            elapsed = max(time.perf_counter() - started, 1e-9)
            row = (iteration, bundle.loss, psnr(bundle.loss), len(scene.anchors), len(rows) / elapsed)
            result.history.append(row)

            reached = train_cfg.target_psnr is not None and row[2] >= train_cfg.target_psnr
            if iteration % train_cfg.log_every == 0 or iteration == train_cfg.iterations or reached:
                logger.info("iter %s loss %.6g psnr %.3f anchors %s", iteration, row[1], row[2], row[3])
                if writer is not None:
                    writer.writerow([iteration, f"{row[1]:.9g}", f"{row[2]:.6f}", row[3], f"{row[4]:.3f}"])
            if out_dir and train_cfg.val_every and iteration % train_cfg.val_every == 0 and len(cameras):
                height, width = images[0].shape[:2]
                image = render_image(scene, cameras[0], width, height, train_cfg.render)
                write_image(os.path.join(out_dir, f"val_{iteration:06d}.ppm"), image)
            if reached:
                logger.info("Reached target PSNR %.3f at iter %s", train_cfg.target_psnr, iteration)
                break
    finally:
        if log_handle is not None:
            log_handle.close()
    return result
