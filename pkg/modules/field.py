"""Implicit appearance model: view encodings, the geometry/color MLPs,
density gating and front-to-back compositing."""
import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from . import config as cfg
from .gaussian import quat_to_rotmat
from .hashgrid import HashGrid

logger = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

ACTIVATIONS = {"linear": 0, "relu": 1, "sigmoid": 2}
ACTIVATION_NAMES = {value: key for key, value in ACTIVATIONS.items()}
VIEW_ENCODINGS = {"sh": 0, "frequency": 1}

_warned_non_unit = False


def _unit_directions(directions):
    global _warned_non_unit
    directions = np.asarray(directions, dtype=np.float64)
    norms = np.linalg.norm(directions, axis=-1, keepdims=True)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        if not _warned_non_unit:
            logger.warning("Non-unit view direction passed to the encoder; normalizing")
            _warned_non_unit = True
        directions = directions / np.where(norms > 0.0, norms, 1.0)
    return directions


def sh_encode(direction, degree=cfg.VIEW_DEGREE):
    """Real SH basis values for bands 0..degree-1, (..., 3) -> (..., degree**2)."""
    if not 1 <= degree <= 4:
        raise ValueError("sh degree must be between 1 and 4")
    d = _unit_directions(direction)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree > 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2.0 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree > 3:
        out += [SH_C3[0] * y * (3.0 * xx - yy), SH_C3[1] * x * y * z, SH_C3[2] * y * (4.0 * zz - xx - yy),
                SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy), SH_C3[4] * x * (4.0 * zz - xx - yy),
                SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3.0 * yy)]
    return np.stack(out, axis=-1)


def frequency_encode(direction, degree=cfg.VIEW_DEGREE):
    """[d, sin(2^l pi d), cos(2^l pi d)] for l < degree; width 3 + 6 * degree."""
    d = _unit_directions(direction)
    parts = [d]
    for level in range(degree):
        parts.append(np.sin((2.0 ** level) * np.pi * d))
        parts.append(np.cos((2.0 ** level) * np.pi * d))
    return np.concatenate(parts, axis=-1)


def view_encoding_width(kind, degree):
    return degree * degree if kind == "sh" else 3 + 6 * degree


def encode_view(directions, kind, degree):
    if kind == "sh":
        return sh_encode(directions, degree)
    return frequency_encode(directions, degree)


def trunc_exp(x, clamp=cfg.TRUNC_EXP_CLAMP):
    return np.exp(np.clip(x, -clamp, clamp))


class Dense:
    def __init__(self, weight, bias, activation="linear"):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64).reshape(self.weight.shape[1])
        self.activation = activation

    @property
    def shape(self):
        return self.weight.shape

    def forward(self, x):
        z = x @ self.weight + self.bias
        if self.activation == "relu":
            return z, np.maximum(z, 0.0)
        if self.activation == "sigmoid":
            return z, 0.5 * (1.0 + np.tanh(0.5 * z))
        return z, z

    def backward(self, x, z, y, grad_y):
        if self.activation == "relu":
            grad_z = grad_y * (z > 0.0)
        elif self.activation == "sigmoid":
            grad_z = grad_y * y * (1.0 - y)
        else:
            grad_z = grad_y
        return grad_z @ self.weight.T, x.T @ grad_z, grad_z.sum(axis=0)


class Mlp:
    def __init__(self, layers: List[Dense]):
        self.layers = layers

    @classmethod
    def create(cls, widths, activations, rng):
        layers = []
        for fan_in, fan_out, activation in zip(widths[:-1], widths[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(Dense(rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out), activation))
        return cls(layers)

    @property
    def in_features(self):
        return self.layers[0].weight.shape[0]

    def copy(self):
        return Mlp([Dense(layer.weight.copy(), layer.bias.copy(), layer.activation) for layer in self.layers])

    def forward(self, x, record=False):
        trace = []
        for layer in self.layers:
            z, y = layer.forward(x)
            trace.append((x, z, y))
            x = y
        return (x, trace) if record else x

    def backward(self, trace, grad_out):
        """Returns (d input, [(dW, db) per layer])."""
        grads = [None] * len(self.layers)
        grad = grad_out
        for index in range(len(self.layers) - 1, -1, -1):
            x, z, y = trace[index]
            grad, grad_w, grad_b = self.layers[index].backward(x, z, y, grad)
            grads[index] = (grad_w, grad_b)
        return grad, grads


@dataclass
class FieldModel:
    geometry: Mlp
    color: Mlp
    hash_grid: Optional[HashGrid] = None
    view_encoding: str = cfg.VIEW_ENCODING
    view_degree: int = cfg.VIEW_DEGREE
    seed: int = cfg.MODEL_SEED
    density_bias: float = cfg.DENSITY_BIAS
    exp_clamp: float = cfg.TRUNC_EXP_CLAMP

    @classmethod
    def initialize(cls, seed=cfg.MODEL_SEED, feature_dim=cfg.FEATURE_DIM, hidden=cfg.MLP_HIDDEN,
                   view_encoding=cfg.VIEW_ENCODING, view_degree=cfg.VIEW_DEGREE, with_hash_grid=True, **grid_options):
        rng = np.random.default_rng(seed)
        geometry = Mlp.create([feature_dim, hidden, hidden, cfg.GEOMETRY_OUT], ["relu", "relu", "linear"], rng)
        color_in = cfg.GEOMETRY_OUT - 1 + view_encoding_width(view_encoding, view_degree)
        color = Mlp.create([color_in, hidden, hidden, 3], ["relu", "relu", "sigmoid"], rng)
        grid = HashGrid.create(seed=seed + 1, **grid_options) if with_hash_grid else None
        if grid is not None and grid.output_dim != feature_dim:
            raise ValueError(f"hash grid width {grid.output_dim} does not match feature dim {feature_dim}")
        return cls(geometry, color, grid, view_encoding, int(view_degree), int(seed))

    def copy(self):
        return FieldModel(self.geometry.copy(), self.color.copy(),
                          self.hash_grid.copy() if self.hash_grid is not None else None,
                          self.view_encoding, self.view_degree, self.seed, self.density_bias, self.exp_clamp)

    def parameters(self):
        """Named views of every trainable array in this model."""
        params = {}
        for head, mlp in (("geometry", self.geometry), ("color", self.color)):
            for index, layer in enumerate(mlp.layers):
                params[f"{head}.W{index}"] = layer.weight
                params[f"{head}.b{index}"] = layer.bias
        if self.hash_grid is not None:
            params["hash.tables"] = self.hash_grid.tables
        return params


class DecodedSample(NamedTuple):
    sigma_eff: float
    alpha: float
    color: np.ndarray


@dataclass
class DecodedBatch:
    sigma_eff: np.ndarray
    alpha: np.ndarray
    color: np.ndarray
    sigma_prime: np.ndarray = None
    raw_density: np.ndarray = None
    geometry_trace: list = field(default=None, repr=False)
    color_trace: list = field(default=None, repr=False)

    def __len__(self):
        return int(self.alpha.shape[0])

    def sample(self, k):
        return DecodedSample(float(self.sigma_eff[k]), float(self.alpha[k]), self.color[k])


def decode_batch(f_hat, alpha_hat, directions, deform_rotations, model: FieldModel, record=False) -> DecodedBatch:
    f_hat = np.asarray(f_hat, dtype=np.float64).reshape(-1, model.geometry.in_features)
    alpha_hat = np.asarray(alpha_hat, dtype=np.float64).reshape(-1)
    rot = quat_to_rotmat(np.asarray(deform_rotations, dtype=np.float64).reshape(-1, 4))
    local_dirs = np.einsum("kji,kj->ki", rot, np.asarray(directions, dtype=np.float64).reshape(-1, 3))
    encoded = encode_view(local_dirs, model.view_encoding, model.view_degree)

    geo_out, geo_trace = model.geometry.forward(f_hat, record=True)
    raw_density = geo_out[:, 0]
    color, col_trace = model.color.forward(np.concatenate([geo_out[:, 1:], encoded], axis=1), record=True)
    sigma_prime = trunc_exp(raw_density + model.density_bias, model.exp_clamp)
    sigma_eff = sigma_prime * alpha_hat
    alpha = -np.expm1(-sigma_eff)
    if record:
        return DecodedBatch(sigma_eff, alpha, color, sigma_prime, raw_density, geo_trace, col_trace)
    return DecodedBatch(sigma_eff, alpha, color)


def decode(f_hat, alpha_hat, direction, anchor_R_def, model: FieldModel) -> DecodedSample:
    batch = decode_batch(np.asarray(f_hat)[None, :], [alpha_hat], np.asarray(direction)[None, :],
                         np.asarray(anchor_R_def)[None, :], model)
    return batch.sample(0)


@dataclass
class Composite:
    rgb: np.ndarray            # (R, 3) clamped
    unclamped: np.ndarray      # (R, 3)
    transmittance: np.ndarray  # (K,) T_k
    residual: np.ndarray       # (R,) T_{K+1}


def composite_batch(sigma_eff, alpha, color, offsets, background) -> Composite:
    """Front-to-back compositing of per-ray sample groups laid out by offsets."""
    sigma_eff = np.asarray(sigma_eff, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64).reshape(-1, 3)
    offsets = np.asarray(offsets, dtype=np.int64)
    background = np.asarray(background, dtype=np.float64).reshape(3)
    rays = offsets.shape[0] - 1
    counts = np.diff(offsets)
    slot = np.repeat(np.arange(rays), counts)
    local = np.arange(sigma_eff.shape[0]) - offsets[slot]

    # -log(1 - alpha) == sigma_eff, so transmittance is an exclusive per-ray sum
    width = int(counts.max()) if rays and counts.size and counts.max() > 0 else 0
    padded = np.zeros((rays, width + 1))
    padded[slot, local + 1] = sigma_eff
    optical = np.cumsum(padded, axis=1)
    transmittance = np.exp(-optical[slot, local]) if sigma_eff.size else np.zeros(0)
    residual = np.exp(-optical[np.arange(rays), counts])

    weights = transmittance * alpha
    rgb = np.zeros((rays, 3))
    np.add.at(rgb, slot, weights[:, None] * color)
    rgb += residual[:, None] * background[None, :]
    return Composite(np.clip(rgb, 0.0, 1.0), rgb, transmittance, residual)


def composite(decoded, background):
    """RGB of one ray from its t-sorted DecodedSample list."""
    decoded = list(decoded)
    if decoded:
        sigma = np.array([d.sigma_eff for d in decoded])
        alpha = np.array([d.alpha for d in decoded])
        color = np.stack([np.asarray(d.color, dtype=np.float64) for d in decoded])
    else:
        sigma, alpha, color = np.zeros(0), np.zeros(0), np.zeros((0, 3))
    return composite_batch(sigma, alpha, color, [0, len(decoded)], background).rgb[0]


def bake(scene):
    """Store hash-grid features on the anchors and drop the grid; idempotent."""
    if scene.baked:
        return scene
    if getattr(scene.model, "hash_grid", None) is not None:
        scene.anchors.features = scene.anchor_features()
        scene.model.hash_grid = None
    scene.baked = True
    logger.info("Baked features for %s anchors", len(scene.anchors))
    return scene
