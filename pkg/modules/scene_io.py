"""Binary scene/model files (little-endian, float32 payloads), a lossy JSON
export and point-cloud ingestion."""
import json
import logging
import os
import struct

import numpy as np
from plyfile import PlyData, PlyParseError

from . import config as cfg
from .errors import DatasetError, SceneFormatError
from .field import ACTIVATION_NAMES, ACTIVATIONS, VIEW_ENCODINGS, Dense, FieldModel, Mlp
from .hashgrid import HashGrid
from .scene import AnchorSet, Scene, fit_normalization

logger = logging.getLogger(__name__)

SCENE_MAGIC = b"IRIS"
SCENE_VERSION = 1
SCENE_HEADER = struct.Struct("<4sIIQI12d")
FLAG_BAKED = 1
FLAG_EDITED = 2

MODEL_MAGIC = b"IRSM"
MODEL_VERSION = 1
MODEL_HEADER = struct.Struct("<4sIQIII")
LAYER_ENTRY = struct.Struct("<IIII")
HASH_ENTRY = struct.Struct("<IIIIII")
HEADS = ("geometry", "color")
QUAT_TOL = 1e-4


def record_dtype(feature_dim=cfg.FEATURE_DIM):
    return np.dtype([
        ("mean", "<f4", (3,)),
        ("rotation", "<f4", (4,)),
        ("scale", "<f4", (3,)),
        ("opacity", "<f4"),
        ("confidence", "<f4"),
        ("deform_rotation", "<f4", (4,)),
        ("feature", "<f4", (feature_dim,)),
    ])


def encode_scene(scene) -> bytes:
    anchors = scene.anchors
    dim = anchors.feature_dim
    flags = (FLAG_BAKED if scene.baked else 0) | (FLAG_EDITED if scene.edited else 0)
    header = SCENE_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, flags, len(anchors), dim,
                               *np.asarray(scene.normalization, dtype=np.float64).reshape(12))
    records = np.zeros(len(anchors), dtype=record_dtype(dim))
    records["mean"] = anchors.means
    records["rotation"] = anchors.rotations
    records["scale"] = anchors.scales
    records["opacity"] = anchors.opacity_logits
    records["confidence"] = anchors.confidences
    records["deform_rotation"] = anchors.deform_rotations
    records["feature"] = anchors.features
    return header + records.tobytes()


def _checked_quats(quats, label):
    norms = np.linalg.norm(quats, axis=1)
    bad = np.abs(norms - 1.0) > QUAT_TOL
    if np.any(bad):
        logger.warning("Re-normalized %s %s quaternions that were not unit length", int(bad.sum()), label)
        quats = quats / np.where(norms > 0.0, norms, 1.0)[:, None]
    return quats


def decode_scene(data: bytes, model=None) -> Scene:
    if len(data) < 4 or data[:4] != SCENE_MAGIC:
        raise SceneFormatError("not an IRIS scene file")
    if len(data) < SCENE_HEADER.size:
        raise SceneFormatError("truncated scene header", offset=len(data))
    fields = SCENE_HEADER.unpack_from(data, 0)
    _, version, flags, count, dim = fields[:5]
    normalization = np.array(fields[5:], dtype=np.float64).reshape(3, 4)
    if version != SCENE_VERSION:
        raise SceneFormatError(f"unsupported scene version {version}", offset=4)
    if dim != cfg.FEATURE_DIM:
        raise SceneFormatError(f"unsupported feature dim {dim}", offset=20)

    dtype = record_dtype(dim)
    expected = SCENE_HEADER.size + count * dtype.itemsize
    if len(data) < expected:
        index = (len(data) - SCENE_HEADER.size) // dtype.itemsize
        raise SceneFormatError(f"truncated scene file: record {index} of {count} is incomplete",
                               offset=SCENE_HEADER.size + index * dtype.itemsize)
    if len(data) > expected:
        raise SceneFormatError(f"scene file declares {count} records but has trailing bytes", offset=expected)

    records = np.frombuffer(data, dtype=dtype, count=count, offset=SCENE_HEADER.size)
    anchors = AnchorSet(
        means=records["mean"].astype(np.float64),
        rotations=_checked_quats(records["rotation"].astype(np.float64), "anchor"),
        scales=records["scale"].astype(np.float64),
        opacity_logits=records["opacity"].astype(np.float64),
        features=records["feature"].astype(np.float64),
        confidences=records["confidence"].astype(np.float64),
        deform_rotations=_checked_quats(records["deform_rotation"].astype(np.float64), "deformation"),
    )
    return Scene(anchors, model, normalization, baked=bool(flags & FLAG_BAKED), edited=bool(flags & FLAG_EDITED))


def save_scene(scene, path):
    with open(path, "wb") as handle:
        handle.write(encode_scene(scene))


def load_scene(path, model_path=None) -> Scene:
    with open(path, "rb") as handle:
        data = handle.read()
    model = load_model(model_path) if model_path else None
    scene = decode_scene(data, model)
    logger.info("Loaded scene %s: %s anchors, baked=%s", path, len(scene.anchors), scene.baked)
    return scene


def _model_layers(model):
    for head_id, head in enumerate(HEADS):
        for layer in getattr(model, head).layers:
            yield head_id, layer


def encode_model(model: FieldModel) -> bytes:
    layers = list(_model_layers(model))
    parts = [MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, int(model.seed) & 0xFFFFFFFFFFFFFFFF,
                               VIEW_ENCODINGS[model.view_encoding], int(model.view_degree), len(layers))]
    for head_id, layer in layers:
        fan_in, fan_out = layer.weight.shape
        parts.append(LAYER_ENTRY.pack(head_id, fan_in, fan_out, ACTIVATIONS[layer.activation]))
    grid = model.hash_grid
    if grid is None:
        parts.append(HASH_ENTRY.pack(0, 0, 0, 0, 0, 0))
    else:
        parts.append(HASH_ENTRY.pack(1, grid.levels, grid.features_per_level, grid.log2_table_size,
                                     grid.n_min, grid.n_max))
    for _, layer in layers:
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    if grid is not None:
        parts.append(np.ascontiguousarray(grid.tables, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_model(data: bytes) -> FieldModel:
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise SceneFormatError("not an IRIS model file")
    if len(data) < MODEL_HEADER.size:
        raise SceneFormatError("truncated model header", offset=len(data))
    _, version, seed, view_id, view_degree, layer_count = MODEL_HEADER.unpack_from(data, 0)
    if version != MODEL_VERSION:
        raise SceneFormatError(f"unsupported model version {version}", offset=4)
    view_names = {value: key for key, value in VIEW_ENCODINGS.items()}
    if view_id not in view_names:
        raise SceneFormatError(f"unknown view encoding id {view_id}", offset=16)

    offset = MODEL_HEADER.size
    meta_size = layer_count * LAYER_ENTRY.size + HASH_ENTRY.size
    if len(data) < offset + meta_size:
        raise SceneFormatError("truncated model layer table", offset=len(data))
    entries = []
    for index in range(layer_count):
        head_id, fan_in, fan_out, act_id = LAYER_ENTRY.unpack_from(data, offset)
        if head_id >= len(HEADS) or act_id not in ACTIVATION_NAMES:
            raise SceneFormatError(f"bad descriptor for layer {index}", offset=offset)
        entries.append((head_id, fan_in, fan_out, act_id, offset))
        offset += LAYER_ENTRY.size
    has_hash, levels, fpl, log2_size, n_min, n_max = HASH_ENTRY.unpack_from(data, offset)
    offset += HASH_ENTRY.size

    for head_id in range(len(HEADS)):
        chain = [e for e in entries if e[0] == head_id]
        if not chain:
            raise SceneFormatError(f"model has no {HEADS[head_id]} layers", offset=MODEL_HEADER.size)
        for prev, cur in zip(chain, chain[1:]):
            if prev[2] != cur[1]:
                raise SceneFormatError(f"layer shapes do not chain for {HEADS[head_id]}", offset=cur[4])

    expected = offset + sum(4 * (e[1] * e[2] + e[2]) for e in entries)
    if has_hash:
        expected += 4 * levels * (1 << log2_size) * fpl
    if len(data) != expected:
        raise SceneFormatError(f"model file length mismatch: header declares {expected} bytes, file has {len(data)}",
                               offset=min(len(data), expected))

    heads = {0: [], 1: []}
    for head_id, fan_in, fan_out, act_id, _ in entries:
        weight = np.frombuffer(data, dtype="<f4", count=fan_in * fan_out, offset=offset).reshape(fan_in, fan_out)
        offset += 4 * fan_in * fan_out
        bias = np.frombuffer(data, dtype="<f4", count=fan_out, offset=offset)
        offset += 4 * fan_out
        heads[head_id].append(Dense(weight.astype(np.float64), bias.astype(np.float64), ACTIVATION_NAMES[act_id]))
    grid = None
    if has_hash:
        tables = np.frombuffer(data, dtype="<f4", count=levels * (1 << log2_size) * fpl, offset=offset)
        grid = HashGrid(tables.reshape(levels, 1 << log2_size, fpl).astype(np.float32), levels, fpl, log2_size, n_min, n_max)
    return FieldModel(Mlp(heads[0]), Mlp(heads[1]), grid, view_names[view_id], int(view_degree), int(seed))


def save_model(model, path):
    with open(path, "wb") as handle:
        handle.write(encode_model(model))


def load_model(path) -> FieldModel:
    with open(path, "rb") as handle:
        return decode_model(handle.read())


def export_scene_json(scene, path):
    """Human-readable dump for debugging; not a round-trip format."""
    anchors = scene.anchors
    payload = {
        "baked": scene.baked,
        "edited": scene.edited,
        "feature_dim": anchors.feature_dim,
        "normalization": scene.normalization.tolist(),
        "anchors": [
            {
                "mean": anchors.means[i].round(6).tolist(),
                "rotation": anchors.rotations[i].round(6).tolist(),
                "scale": anchors.scales[i].round(6).tolist(),
                "opacity_logit": round(float(anchors.opacity_logits[i]), 6),
                "confidence": round(float(anchors.confidences[i]), 6),
                "deform_rotation": anchors.deform_rotations[i].round(6).tolist(),
                "feature": anchors.features[i].round(4).tolist(),
            }
            for i in range(len(anchors))
        ],
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)


def _read_ply(path):
    try:
        ply = PlyData.read(path)
    except PlyParseError as exc:
        raise DatasetError(f"{path} is not a readable PLY file: {exc}") from exc
    if "vertex" not in ply:
        raise DatasetError(f"{path}: PLY has no vertex element")
    vertex = ply["vertex"]
    names = vertex.data.dtype.names or ()
    missing = [axis for axis in ("x", "y", "z") if axis not in names]
    if missing:
        raise DatasetError(f"{path}: PLY vertices lack properties", missing)
    return np.column_stack([vertex["x"], vertex["y"], vertex["z"]]).astype(np.float64).reshape(-1, 3)


def load_point_cloud(path):
    """(N, 3) points from a PLY (ASCII or binary) or whitespace-separated .xyz file."""
    if os.path.splitext(path)[1].lower() == ".ply":
        points = _read_ply(path)
    else:
        points = np.loadtxt(path, dtype=np.float64, usecols=(0, 1, 2), ndmin=2, comments="#")
    if points.shape[0] == 0:
        raise DatasetError(f"{path} contains no points")
    return points


def scene_from_points(points, seed=cfg.MODEL_SEED, feature_init="hash", opacity_logit=0.0, **model_options):
    """Isotropic anchors at the points, scale 0.5 * (bbox volume / N)^(1/3)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    extent = points.max(axis=0) - points.min(axis=0)
    extent = np.maximum(extent, max(float(extent.max()) * 1e-3, 1e-6))
    scale = 0.5 * (float(np.prod(extent)) / points.shape[0]) ** (1.0 / 3.0)
    anchors = AnchorSet.create(points, scales=np.full((points.shape[0], 3), scale),
                               opacity_logits=np.full(points.shape[0], opacity_logit))
    model = FieldModel.initialize(seed=seed, with_hash_grid=feature_init == "hash", **model_options)
    scene = Scene(anchors, model, fit_normalization(points))
    if feature_init != "hash":
        rng = np.random.default_rng(seed)
        anchors.features = rng.normal(0.0, 1.0, size=anchors.features.shape)
        scene.baked = True
    return scene
