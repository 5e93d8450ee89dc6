# Configuration for the FireSight IR/thermal fusion toolkit
# Defaults below can be overridden with FIRESIGHT_* environment variables
# (or a .env file next to main.py, loaded before this module is imported).

from __future__ import annotations

import os
import configparser
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from errors import ValidationError

TOOL_NAME = 'firesight'
TOOL_VERSION = '1.0.0'


def _env_int(name: str, default: int) -> int:
    try:
        return int(os.environ.get(name, str(default)))
    except ValueError:
        return default


def _env_float(name: str, default: float) -> float:
    try:
        return float(os.environ.get(name, str(default)))
    except ValueError:
        return default


# Reproducibility
DEFAULT_SEED = _env_int('FIRESIGHT_SEED', 0)
DEFAULT_OUTPUT_DIR = os.environ.get('FIRESIGHT_OUTPUT', 'runs')

# Calibration
CALIB_MAX_ITER = _env_int('FIRESIGHT_CALIB_MAX_ITER', 200)
CALIB_REL_TOL = 1e-12
CALIB_INITIAL_DAMPING = 1e-3
CALIB_DEFAULT_VIEWS = 12

# Undistortion inverse (radial seed, damped Newton)
UNDISTORT_MAX_ITER = 20
UNDISTORT_TOL = 1e-14

# Alignment
LABEL_MIN_AREA_RATIO = _env_float('FIRESIGHT_LABEL_MIN_AREA', 0.2)
WARP_FILL = 0.0

# Detector / training (reference setup: 416 input, 100 epochs, batch 32, lr 0.003)
REFERENCE_INPUT_SIZE = 416
DEFAULT_INPUT_SIZE = _env_int('FIRESIGHT_INPUT_SIZE', 128)
DEFAULT_WIDTH_MULTIPLIER = _env_float('FIRESIGHT_ALPHA', 0.25)
DEFAULT_EPOCHS = _env_int('FIRESIGHT_EPOCHS', 100)
DEFAULT_BATCH = _env_int('FIRESIGHT_BATCH', 32)
DEFAULT_LR = _env_float('FIRESIGHT_LR', 0.003)

# Inference / evaluation
DEFAULT_CONF_THRESHOLD = _env_float('FIRESIGHT_CONF', 0.25)
DEFAULT_NMS_IOU = _env_float('FIRESIGHT_NMS_IOU', 0.45)
MAP_CONF_THRESHOLD = 0.001
LETTERBOX_FILL = 0.5

# Synthetic data (desk-scale stand-in for the 3,000-photo smoke-room set)
SYNTH_FRAMES = _env_int('FIRESIGHT_SYNTH_FRAMES', 300)
SYNTH_SIZE = _env_int('FIRESIGHT_SYNTH_SIZE', 128)
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)

# Benchmark
BENCH_WARMUP = 10
BENCH_MEASURED = 100
BENCH_RUNS = 3


# --- RunConfig ----------------------------------------------------------------
# Each subcommand accepts exactly the keys listed in its schema:
#   key -> (type, default, help)

def _to_bool(raw: Any) -> bool:
    if isinstance(raw, bool):
        return raw
    s = str(raw).strip().lower()
    if s in ('1', 'true', 'yes', 'on'):
        return True
    if s in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


_COMMON = {
    'seed': (int, DEFAULT_SEED, 'master random seed'),
    'output': (str, DEFAULT_OUTPUT_DIR, 'output directory'),
}

_BOARD = {
    'rows': (int, 6, 'inner corner rows of the chessboard'),
    'cols': (int, 9, 'inner corner columns of the chessboard'),
    'square': (float, 25.0, 'square size in millimeters'),
}

SCHEMAS: Dict[str, Dict[str, Tuple[Callable[[Any], Any], Any, str]]] = {
    'calibrate': {
        **_COMMON, **_BOARD,
        'corners': (str, '', 'corner CSV (view_id,corner_index,u,v)'),
        'max_iter': (int, CALIB_MAX_ITER, 'LM iteration cap per pass'),
        'two_pass': (_to_bool, True, 'freeze k3 in pass one, release in pass two'),
        'out_json': (str, 'calibration.json', 'output calibration file name'),
    },
    'undistort': {
        **_COMMON,
        'image': (str, '', 'input 8-bit PNG'),
        'calibration': (str, '', 'calibration JSON'),
        'out_image': (str, 'undistorted.png', 'output file name'),
    },
    'align': {
        **_COMMON, **_BOARD,
        'ir_corners': (str, '', 'IR corner CSV'),
        'thermal_corners': (str, '', 'thermal corner CSV'),
        'ir_calibration': (str, '', 'IR calibration JSON'),
        'thermal_calibration': (str, '', 'thermal calibration JSON'),
        'ir_image': (str, '', 'IR image to align'),
        'thermal_image': (str, '', 'thermal image to align'),
        'view': (str, '', 'view id used for correspondences (default: first common)'),
        'all_corners': (_to_bool, False, 'use every corner instead of the four outer ones'),
        'fill': (float, WARP_FILL, 'fill value outside the warped thermal image'),
    },
    'synth': {
        **_COMMON,
        'frames': (int, SYNTH_FRAMES, 'number of paired frames'),
        'size': (int, SYNTH_SIZE, 'square render size in pixels'),
        'corruption': (str, 'mixed', 'mixed | complementary'),
        'noise_sigma': (float, 0.02, 'Gaussian pixel noise'),
        'max_humans': (int, 3, 'maximum humans per frame'),
    },
    'train': {
        **_COMMON,
        'data': (str, '', 'dataset root written by synth'),
        'epochs': (int, DEFAULT_EPOCHS, 'training epochs'),
        'batch': (int, DEFAULT_BATCH, 'minibatch size'),
        'lr': (float, DEFAULT_LR, 'Adam learning rate'),
        'input_size': (int, DEFAULT_INPUT_SIZE, 'network input size (multiple of 32)'),
        'alpha': (float, DEFAULT_WIDTH_MULTIPLIER, 'width multiplier in (0,1]'),
        'mode': (str, 'fusion', 'fusion | single_ir | single_thermal'),
        'activation': (str, 'mish', 'mish | leaky_relu'),
        'loc_loss': (str, 'ciou', 'ciou | iou'),
        'eval_every': (int, 0, 'validate every N epochs (0: final epoch only)'),
        'dtype': (str, 'float32', 'float32 | float64'),
        'progress': (_to_bool, True, 'show a progress bar'),
    },
    'detect': {
        **_COMMON,
        'weights': (str, '', 'weights file (FVW1) with .json sidecar'),
        'data': (str, '', 'dataset root'),
        'split': (str, 'test', 'train | val | test | all'),
        'conf': (float, DEFAULT_CONF_THRESHOLD, 'confidence threshold'),
        'nms_iou': (float, DEFAULT_NMS_IOU, 'NMS IoU threshold'),
        'overlays': (_to_bool, True, 'write overlay PNGs'),
        'limit': (int, 0, 'maximum frames (0: all)'),
    },
    'eval': {
        **_COMMON,
        'weights': (str, '', 'weights file; empty when detections is given'),
        'detections': (str, '', 'JSON-lines detections to score instead of running a model'),
        'data': (str, '', 'dataset root'),
        'split': (str, 'test', 'train | val | test | all'),
        'conf': (float, DEFAULT_CONF_THRESHOLD, 'confidence threshold for P/R/F1'),
        'nms_iou': (float, DEFAULT_NMS_IOU, 'NMS IoU threshold'),
    },
    'bench': {
        **_COMMON,
        'weights': (str, '', 'weights file'),
        'data': (str, '', 'dataset root'),
        'split': (str, 'test', 'frames to time'),
        'warmup': (int, BENCH_WARMUP, 'warm-up frames'),
        'measured': (int, BENCH_MEASURED, 'measured frames per run'),
        'runs': (int, BENCH_RUNS, 'timed runs (median reported)'),
    },
}


@dataclass
class RunConfig:
    subcommand: str
    values: Dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def as_dict(self) -> Dict[str, Any]:
        return dict(sorted(self.values.items()))


def schema_help(subcommand: str) -> str:
    """Text listing every accepted key (used as the --help epilog)."""
    lines = ['accepted keys (config file section or --set key=value):']
    for key, (typ, default, text) in sorted(SCHEMAS[subcommand].items()):
        tname = 'bool' if typ is _to_bool else typ.__name__
        lines.append(f"  {key:<20} {tname:<6} default={default!r}  {text}")
    return '\n'.join(lines)


def parse_overrides(tokens: Optional[Iterable[str]]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for tok in tokens or []:
        if '=' not in tok:
            raise ValidationError(f"override must be key=value, got {tok!r}")
        k, v = tok.split('=', 1)
        out[k.strip()] = v.strip()
    return out


def load_run_config(subcommand: str, path: Optional[str] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults < INI file section < overrides. Unknown keys are rejected."""
    if subcommand not in SCHEMAS:
        raise ValidationError(f"unknown subcommand {subcommand!r}")
    schema = SCHEMAS[subcommand]
    raw: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ValidationError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding='utf-8')
        except configparser.Error as e:
            raise ValidationError(f"{path}: {e}") from e
        if parser.has_section(subcommand):
            raw.update(dict(parser.items(subcommand)))
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v

    unknown: List[str] = sorted(k for k in raw if k not in schema)
    if unknown:
        raise ValidationError(
            f"unknown key(s) for {subcommand}: {', '.join(unknown)}")

    values: Dict[str, Any] = {}
    for key, (typ, default, _text) in schema.items():
        if key not in raw:
            values[key] = default
            continue
        try:
            values[key] = typ(raw[key])
        except (TypeError, ValueError) as e:
            raise ValidationError(f"bad value for {key}: {raw[key]!r} ({e})") from e
    return RunConfig(subcommand=subcommand, values=values)
