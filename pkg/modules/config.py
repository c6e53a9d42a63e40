import os
import json
import logging
try:
    from dotenv import load_dotenv
except ImportError:
    def load_dotenv():
        return False

load_dotenv()


def _load_json_config():
    path = os.getenv("IRIS_CONFIG_JSON_PATH", "config.json")
    if not os.path.exists(path):
        return {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
            return data if isinstance(data, dict) else {}
    except (OSError, json.JSONDecodeError):
        return {}


_JSON_CONFIG = _load_json_config()


def _cfg(name, default=None):
    env_value = os.getenv(f"IRIS_{name}")
    if env_value is not None and env_value != "":
        return env_value
    return _JSON_CONFIG.get(name, default)


def _cfg_bool(name, default=False):
    value = _cfg(name, default)
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in {"1", "true", "yes", "on"}


def _cfg_int(name, default):
    value = _cfg(name, default)
    try:
        return int(value)
    except (TypeError, ValueError):
        return int(default)


def _cfg_float(name, default):
    value = _cfg(name, default)
    try:
        return float(value)
    except (TypeError, ValueError):
        return float(default)


def _cfg_choice(name, default, choices):
    value = str(_cfg(name, default)).strip().lower()
    return value if value in choices else default


LOG_LEVEL = str(_cfg("LOG_LEVEL", "INFO")).strip().upper() or "INFO"

logging.basicConfig(level=getattr(logging, LOG_LEVEL, logging.INFO), format='%(asctime)s %(levelname)s: %(message)s')

# ────────────────────────────────────────────────
# CONFIG
# ────────────────────────────────────────────────
THREADS = max(1, _cfg_int("THREADS", os.cpu_count() or 1))

# sampler: 90% / 99% chi-square(3) mass
RIS_LAMBDA = max(1e-6, _cfg_float("RIS_LAMBDA", 6.25))
RIS_QUOTA = max(1, _cfg_int("RIS_QUOTA", 128))
RIS_LAMBDA_UNBOUNDED = max(1e-6, _cfg_float("RIS_LAMBDA_UNBOUNDED", 11.3449))
RIS_QUOTA_UNBOUNDED = max(1, _cfg_int("RIS_QUOTA_UNBOUNDED", 256))
RIS_UNBOUNDED = _cfg_bool("UNBOUNDED", False)
HIT_BUFFER_CAPACITY = max(2, _cfg_int("HIT_BUFFER_CAPACITY", 16))
DEGENERATE_DIR_EPS = 1e-24

RCA_HALF_WINDOW = max(0, _cfg_int("RCA_HALF_WINDOW", 2))
RCA_TAU_DIST = max(0.0, _cfg_float("RCA_TAU_DIST", 0.0))  # 0 -> derived from anchor scales
RCA_TAU_SCALE_MULT = max(1e-6, _cfg_float("RCA_TAU_SCALE_MULT", 4.0))
RCA_LOGIT_SCALE = max(1e-6, _cfg_float("RCA_LOGIT_SCALE", 0.5))

FEATURE_DIM = 32
HASH_LEVELS = max(1, _cfg_int("HASH_LEVELS", 16))
HASH_FEATURES_PER_LEVEL = max(1, _cfg_int("HASH_FEATURES_PER_LEVEL", 2))
HASH_LOG2_TABLE_SIZE = max(4, min(24, _cfg_int("HASH_LOG2_TABLE_SIZE", 21)))
HASH_N_MIN = max(2, _cfg_int("HASH_N_MIN", 16))
HASH_N_MAX = max(HASH_N_MIN, _cfg_int("HASH_N_MAX", 8192))
HASH_INIT_RANGE = max(0.0, _cfg_float("HASH_INIT_RANGE", 1e-4))

MLP_HIDDEN = max(1, _cfg_int("MLP_HIDDEN", 64))
GEOMETRY_OUT = 16
VIEW_ENCODING = _cfg_choice("VIEW_ENCODING", "sh", {"sh", "frequency"})
VIEW_DEGREE = max(1, _cfg_int("VIEW_DEGREE", 4))
MODEL_SEED = _cfg_int("MODEL_SEED", 0)
TRUNC_EXP_CLAMP = max(1.0, _cfg_float("TRUNC_EXP_CLAMP", 15.0))
DENSITY_BIAS = _cfg_float("DENSITY_BIAS", -1.0)
SCENE_MARGIN = max(0.0, _cfg_float("SCENE_MARGIN", 0.05))

LR_HASH = max(1e-12, _cfg_float("LR_HASH", 1e-2))
LR_MLP = max(1e-12, _cfg_float("LR_MLP", 1e-3))
LR_FEATURES = max(1e-12, _cfg_float("LR_FEATURES", 1e-2))
LR_GEOMETRY = max(1e-12, _cfg_float("LR_GEOMETRY", 1e-4))
LR_OPACITY = max(1e-12, _cfg_float("LR_OPACITY", 5e-2))
ADAM_BETA1 = max(0.0, min(0.999999, _cfg_float("ADAM_BETA1", 0.9)))
ADAM_BETA2 = max(0.0, min(0.999999, _cfg_float("ADAM_BETA2", 0.999)))
ADAM_EPS = max(0.0, _cfg_float("ADAM_EPS", 1e-15))
MIN_SCALE = 1e-6
TRAIN_BATCH = max(1, _cfg_int("TRAIN_BATCH", 1024))
TRAIN_ITERS = max(0, _cfg_int("TRAIN_ITERS", 2000))
TRAIN_SEED = _cfg_int("TRAIN_SEED", 0)
TRAIN_LOG_EVERY = max(1, _cfg_int("TRAIN_LOG_EVERY", 10))
TRAIN_VAL_EVERY = max(0, _cfg_int("TRAIN_VAL_EVERY", 500))

PRUNE_DECAY = max(1e-6, min(0.999999, _cfg_float("PRUNE_DECAY", 0.995)))
PRUNE_TAU = max(1e-12, min(0.999999, _cfg_float("PRUNE_TAU", 0.01)))
PRUNE_BOOST_POLICY = _cfg_choice("PRUNE_BOOST_POLICY", "reset", {"reset", "increment"})
PRUNE_BOOST_INCREMENT = max(0.0, _cfg_float("PRUNE_BOOST_INCREMENT", 0.1))
INITIAL_CONFIDENCE = 1.0

BENCH_REPEATS = max(1, _cfg_int("BENCH_REPEATS", 3))
BENCH_BASELINE_MAX_BATCH = max(1, _cfg_int("BENCH_BASELINE_MAX_BATCH", 4096))
BENCH_UNIFORM_SAMPLES = max(1, _cfg_int("BENCH_UNIFORM_SAMPLES", 32))
BENCH_GRID_RESOLUTION = max(2, _cfg_int("BENCH_GRID_RESOLUTION", 128))
BENCH_FIELD_LOG2_TABLE_SIZE = max(4, min(24, _cfg_int("BENCH_FIELD_LOG2_TABLE_SIZE", 19)))
