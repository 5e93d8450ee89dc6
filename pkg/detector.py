"""
Dual-stream IR + thermal detector in the YOLOv4-Tiny style.

Each modality runs its own CSP-Tiny backbone; the stride-16 and stride-32
taps are concatenated across streams and reduced back to single-stream width
with 1x1 conv blocks, then a tiny FPN neck feeds two YOLO heads. The
single-stream modes (``single_ir`` / ``single_thermal``) drop the second
backbone and the fusion blocks and keep everything else identical.

Training, target assignment, the three-term loss (CIoU localization,
objectness BCE, class BCE), decoding, NMS, letterboxing and overlays live
here too.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from tqdm import tqdm

import config
from audit_logger import log_event
from boxes import Detection, GroundTruthBox, ciou, iou, iou_matrix, to_corners
from errors import NumericalError, ShapeMismatchError, StateError, ValidationError
from geometry import GrayImage
from nn_core import (
    Conv2d,
    ConvBlock,
    Layer,
    MaxPool2d,
    Parameter,
    Sequential,
    Upsample,
    adam_step,
    adopt_initial_stats,
    assign_records,
    concat_channels,
    layer_records,
    load_weights,
    parameter_count,
    save_weights,
    sigmoid,
    split_channels,
    zero_grad,
)

__all__ = [
    'ModelConfig', 'DetectorModel', 'RawPrediction', 'BackboneFeatures', 'GroundTruthBox', 'Detection',
    'build_model', 'forward', 'fuse_features', 'decode_predictions', 'encode_box', 'assign_targets',
    'loss', 'loss_and_grad', 'ciou', 'iou', 'nms', 'train', 'infer_pair', 'letterbox',
    'save_model', 'load_model', 'compare_modalities', 'load_dataset', 'Sample',
]

BASE_ANCHORS = ((10, 14), (23, 27), (37, 58), (81, 82), (135, 169), (344, 319))
STRIDES = (16, 32)
MODES = ('fusion', 'single_ir', 'single_thermal')


def default_anchors(input_size: int) -> Tuple[Tuple[float, float], ...]:
    s = input_size / float(config.REFERENCE_INPUT_SIZE)
    return tuple((w * s, h * s) for w, h in BASE_ANCHORS)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = config.REFERENCE_INPUT_SIZE
    width_multiplier: float = 1.0
    num_classes: int = 1
    anchors: Optional[Tuple[Tuple[float, float], ...]] = None
    mode: str = 'fusion'
    activation: str = 'mish'
    loc_loss: str = 'ciou'
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 0.5)
    ignore_iou_threshold: float = 0.5
    final_kernel: int = 1
    dtype: str = 'float32'

    def __post_init__(self):
        if self.input_size < 32 or self.input_size % 32:
            raise ValidationError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ValidationError(f"width multiplier must lie in (0,1], got {self.width_multiplier}")
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.activation not in ('mish', 'leaky_relu'):
            raise ValidationError(f"activation must be mish or leaky_relu, got {self.activation!r}")
        if self.loc_loss not in ('ciou', 'iou'):
            raise ValidationError(f"loc_loss must be ciou or iou, got {self.loc_loss!r}")
        if self.final_kernel not in (1, 3):
            raise ValidationError(f"final_kernel must be 1 or 3, got {self.final_kernel}")
        if self.dtype not in ('float32', 'float64'):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        anchors = self.anchors if self.anchors is not None else default_anchors(self.input_size)
        anchors = tuple((float(w), float(h)) for w, h in anchors)
        if len(anchors) != 6 or any(w <= 0 or h <= 0 for w, h in anchors):
            raise ValidationError("anchors must be 6 positive (w, h) pairs (3 per scale)")
        object.__setattr__(self, 'anchors', anchors)
        object.__setattr__(self, 'loss_weights', tuple(float(v) for v in self.loss_weights))

    def ch(self, base: int) -> int:
        return int(math.ceil(base * self.width_multiplier))

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == 'float32' else np.float64

    @property
    def grids(self) -> Tuple[int, int]:
        return self.input_size // STRIDES[0], self.input_size // STRIDES[1]

    @property
    def head_channels(self) -> int:
        return 3 * (5 + self.num_classes)

    def scale_anchors(self, scale: int) -> np.ndarray:
        return np.array(self.anchors[3 * scale:3 * scale + 3], dtype=float)

    def to_dict(self) -> Dict:
        d = asdict(self)
        d['anchors'] = [list(a) for a in self.anchors]
        d['loss_weights'] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelConfig':
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown model config key(s): {unknown}")
        if data.get('anchors') is not None:
            data['anchors'] = tuple(tuple(a) for a in data['anchors'])
        if 'loss_weights' in data:
            data['loss_weights'] = tuple(data['loss_weights'])
        return cls(**data)


@dataclass
class BackboneFeatures:
    p4: np.ndarray
    p5: np.ndarray


@dataclass
class RawPrediction:
    """Head outputs: p4 at stride 16 and p5 at stride 32, each (N, 3*(5+C), G, G)."""
    p4: np.ndarray
    p5: np.ndarray

    @property
    def scales(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.p4, self.p5


# ---------- graph pieces ----------

class CSPStage:
    """c1 -> split tail -> c2 -> c3 -> cat(c3, c2) -> c4 (tap) -> cat(c1, c4) -> maxpool."""

    def __init__(self, in_ch: int, width: int, act: str, rng, dtype, name: str):
        half = width - int(round(width * 0.5))
        self.width = width
        self.half = half
        self.c1 = ConvBlock(in_ch, width, 3, 1, act, rng=rng, dtype=dtype, name=f"{name}.c1")
        self.c2 = ConvBlock(half, half, 3, 1, act, rng=rng, dtype=dtype, name=f"{name}.c2")
        self.c3 = ConvBlock(half, half, 3, 1, act, rng=rng, dtype=dtype, name=f"{name}.c3")
        self.c4 = ConvBlock(2 * half, width, 1, 1, act, rng=rng, dtype=dtype, name=f"{name}.c4")
        self.pool = MaxPool2d(2)
        self.out_channels = 2 * width

    @property
    def layers(self) -> List[Layer]:
        return [self.c1, self.c2, self.c3, self.c4, self.pool]

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        a = self.c1.forward(x)
        _, tail = split_channels(a, 0.5)
        b = self.c2.forward(tail)
        c = self.c3.forward(b)
        tap = self.c4.forward(concat_channels(c, b))
        return self.pool.forward(concat_channels(a, tap)), tap

    def backward(self, g_out: np.ndarray, g_tap: Optional[np.ndarray] = None) -> np.ndarray:
        w, h = self.width, self.half
        g_cat = self.pool.backward(g_out)
        g_a = g_cat[:, :w].copy()
        g_tap_total = g_cat[:, w:] if g_tap is None else g_cat[:, w:] + g_tap
        g_cb = self.c4.backward(g_tap_total)
        g_b = g_cb[:, h:] + self.c3.backward(np.ascontiguousarray(g_cb[:, :h]))
        g_a[:, w - h:] += self.c2.backward(g_b)
        return self.c1.backward(g_a)


class Backbone:
    def __init__(self, cfg: ModelConfig, rng, name: str):
        act, dt = cfg.activation, cfg.np_dtype
        self.stem1 = ConvBlock(1, cfg.ch(32), 3, 2, act, pad=(1, 0), rng=rng, dtype=dt, name=f"{name}.stem1")
        self.stem2 = ConvBlock(cfg.ch(32), cfg.ch(64), 3, 2, act, pad=(1, 0), rng=rng, dtype=dt, name=f"{name}.stem2")
        self.stage1 = CSPStage(cfg.ch(64), cfg.ch(64), act, rng, dt, f"{name}.stage1")
        self.stage2 = CSPStage(self.stage1.out_channels, cfg.ch(128), act, rng, dt, f"{name}.stage2")
        self.stage3 = CSPStage(self.stage2.out_channels, cfg.ch(256), act, rng, dt, f"{name}.stage3")
        self.final = ConvBlock(self.stage3.out_channels, cfg.ch(512), cfg.final_kernel, 1, act,
                               rng=rng, dtype=dt, name=f"{name}.final")

    @property
    def layers(self) -> List[Layer]:
        return [self.stem1, self.stem2, *self.stage1.layers, *self.stage2.layers,
                *self.stage3.layers, self.final]

    def forward(self, x: np.ndarray) -> BackboneFeatures:
        x = self.stem2.forward(self.stem1.forward(x))
        x, _ = self.stage1.forward(x)
        x, _ = self.stage2.forward(x)
        x, p4 = self.stage3.forward(x)
        return BackboneFeatures(p4=p4, p5=self.final.forward(x))

    def backward(self, g: BackboneFeatures) -> np.ndarray:
        gx = self.final.backward(g.p5)
        gx = self.stage3.backward(gx, g.p4)
        gx = self.stage2.backward(gx)
        gx = self.stage1.backward(gx)
        return self.stem1.backward(self.stem2.backward(gx))


class FusionBlock:
    """Channel concat of two streams followed by a 1x1 conv block back to one stream's width."""

    def __init__(self, channels: int, act: str, rng, dtype, name: str):
        self.channels = channels
        self.reduce = ConvBlock(2 * channels, channels, 1, 1, act, rng=rng, dtype=dtype, name=name)

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape[2:] != b.shape[2:]:
            raise ShapeMismatchError(f"cannot fuse features of spatial size {a.shape[2:]} and {b.shape[2:]}")
        return self.reduce.forward(concat_channels(a, b))

    def backward(self, g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        gc = self.reduce.backward(g)
        return gc[:, :self.channels], gc[:, self.channels:]


class Neck:
    def __init__(self, cfg: ModelConfig, rng):
        act, dt = cfg.activation, cfg.np_dtype
        c128, c256, c512 = cfg.ch(128), cfg.ch(256), cfg.ch(512)
        out = cfg.head_channels
        self.lateral5 = ConvBlock(c512, c256, 1, 1, act, rng=rng, dtype=dt, name='neck.lateral5')
        self.head5 = Sequential([ConvBlock(c256, c512, 3, 1, act, rng=rng, dtype=dt, name='head5.block'),
                                 Conv2d(c512, out, 1, rng=rng, dtype=dt, name='head5.out')])
        self.reduce_up = ConvBlock(c256, c128, 1, 1, act, rng=rng, dtype=dt, name='neck.reduce_up')
        self.up = Upsample(2)
        self.up_channels = c128
        self.head4 = Sequential([ConvBlock(c128 + c256, c256, 3, 1, act, rng=rng, dtype=dt, name='head4.block'),
                                 Conv2d(c256, out, 1, rng=rng, dtype=dt, name='head4.out')])

    @property
    def layers(self) -> List[Layer]:
        return [self.lateral5, self.head5, self.reduce_up, self.up, self.head4]

    def forward(self, f: BackboneFeatures) -> RawPrediction:
        n5 = self.lateral5.forward(f.p5)
        o5 = self.head5.forward(n5)
        u = self.up.forward(self.reduce_up.forward(n5))
        o4 = self.head4.forward(concat_channels(u, f.p4))
        return RawPrediction(p4=o4, p5=o5)

    def backward(self, g: RawPrediction) -> BackboneFeatures:
        g_n5 = self.head5.backward(g.p5)
        g_cat = self.head4.backward(g.p4)
        c = self.up_channels
        g_n5 = g_n5 + self.reduce_up.backward(self.up.backward(np.ascontiguousarray(g_cat[:, :c])))
        return BackboneFeatures(p4=np.ascontiguousarray(g_cat[:, c:]), p5=self.lateral5.backward(g_n5))


class DetectorModel:
    def __init__(self, cfg: ModelConfig, seed: int = config.DEFAULT_SEED):
        self.config = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.streams: Dict[str, Backbone] = {}
        if cfg.mode in ('fusion', 'single_ir'):
            self.streams['ir'] = Backbone(cfg, rng, 'ir')
        if cfg.mode in ('fusion', 'single_thermal'):
            self.streams['thermal'] = Backbone(cfg, rng, 'thermal')
        self.fuse4 = self.fuse5 = None
        if cfg.mode == 'fusion':
            self.fuse4 = FusionBlock(cfg.ch(256), cfg.activation, rng, cfg.np_dtype, 'fuse.p4')
            self.fuse5 = FusionBlock(cfg.ch(512), cfg.activation, rng, cfg.np_dtype, 'fuse.p5')
        self.neck = Neck(cfg, rng)
        self.training = True
        self._forwarded = False
        adopt_initial_stats(self.layers)

    @property
    def layers(self) -> List[Layer]:
        out: List[Layer] = []
        for name in ('ir', 'thermal'):
            if name in self.streams:
                out.extend(self.streams[name].layers)
        if self.fuse4 is not None:
            out.extend([self.fuse4.reduce, self.fuse5.reduce])
        out.extend(self.neck.layers)
        return out

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    @property
    def parameter_count(self) -> int:
        return parameter_count(self.parameters())

    def train(self, mode: bool = True):
        self.training = mode
        for layer in self.layers:
            layer.train(mode)

    def eval(self):
        self.train(False)

    def _check_input(self, name: str, x: Optional[np.ndarray]) -> np.ndarray:
        S = self.config.input_size
        if x is None:
            raise ValidationError(f"mode {self.config.mode} requires the {name} input")
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != (1, S, S):
            raise ShapeMismatchError(f"{name} input must be (N,1,{S},{S}), got {x.shape}")
        return x.astype(self.config.np_dtype, copy=False)

    def forward(self, ir: Optional[np.ndarray], thermal: Optional[np.ndarray] = None) -> RawPrediction:
        mode = self.config.mode
        if mode == 'fusion':
            a = self._check_input('ir', ir)
            b = self._check_input('thermal', thermal)
            if a.shape[0] != b.shape[0]:
                raise ShapeMismatchError(f"batch sizes differ: ir {a.shape[0]}, thermal {b.shape[0]}")
            fi = self.streams['ir'].forward(a)
            ft = self.streams['thermal'].forward(b)
            feats = fuse_features(fi, ft, self.fuse4, self.fuse5)
        elif mode == 'single_ir':
            feats = self.streams['ir'].forward(self._check_input('ir', ir))
        else:
            feats = self.streams['thermal'].forward(self._check_input('thermal', thermal))
        raw = self.neck.forward(feats)
        if not (np.all(np.isfinite(raw.p4)) and np.all(np.isfinite(raw.p5))):
            raise NumericalError("non-finite values in detector output")
        self._forwarded = True
        return raw

    def predict(self, ir: Optional[np.ndarray], thermal: Optional[np.ndarray] = None) -> RawPrediction:
        """Forward pass for inference; no backward is left pending."""
        raw = self.forward(ir, thermal)
        self._forwarded = False
        return raw

    def backward(self, grad: RawPrediction):
        if not self._forwarded:
            raise StateError("backward called before forward")
        self._forwarded = False
        g = self.neck.backward(grad)
        if self.config.mode == 'fusion':
            g4i, g4t = self.fuse4.backward(g.p4)
            g5i, g5t = self.fuse5.backward(g.p5)
            self.streams['ir'].backward(BackboneFeatures(np.ascontiguousarray(g4i), np.ascontiguousarray(g5i)))
            self.streams['thermal'].backward(BackboneFeatures(np.ascontiguousarray(g4t), np.ascontiguousarray(g5t)))
        else:
            next(iter(self.streams.values())).backward(g)

    __call__ = forward


def build_model(cfg: ModelConfig, seed: int = config.DEFAULT_SEED) -> DetectorModel:
    return DetectorModel(cfg, seed)


def forward(model: DetectorModel, ir: Optional[np.ndarray], thermal: Optional[np.ndarray] = None) -> RawPrediction:
    return model.forward(ir, thermal)


def fuse_features(ir_feats: BackboneFeatures, thermal_feats: BackboneFeatures,
                  fuse4: FusionBlock, fuse5: FusionBlock) -> BackboneFeatures:
    return BackboneFeatures(p4=fuse4.forward(ir_feats.p4, thermal_feats.p4),
                            p5=fuse5.forward(ir_feats.p5, thermal_feats.p5))


# ---------- decoding ----------

def _split_head(out: np.ndarray, num_classes: int) -> np.ndarray:
    N, C, G, _ = out.shape
    if C != 3 * (5 + num_classes):
        raise ShapeMismatchError(f"head has {C} channels, expected {3 * (5 + num_classes)}")
    return out.reshape(N, 3, 5 + num_classes, G, G)


def decode_arrays(raw: RawPrediction, cfg: ModelConfig) -> np.ndarray:
    """(N, A, 5 + C) rows of [cx, cy, w, h, objectness, class probs...] in input pixels."""
    per_scale = []
    for s, out in enumerate(raw.scales):
        P = _split_head(np.asarray(out, dtype=float), cfg.num_classes)
        N, _, _, G, _ = P.shape
        stride = cfg.input_size / G
        gy, gx = np.mgrid[0:G, 0:G]
        anchors = cfg.scale_anchors(s)
        cx = (sigmoid(P[:, :, 0]) + gx) * stride
        cy = (sigmoid(P[:, :, 1]) + gy) * stride
        w = anchors[None, :, 0, None, None] * np.exp(np.clip(P[:, :, 2], -20, 20))
        h = anchors[None, :, 1, None, None] * np.exp(np.clip(P[:, :, 3], -20, 20))
        obj = sigmoid(P[:, :, 4])
        cls = sigmoid(P[:, :, 5:])
        rows = np.concatenate([np.stack([cx, cy, w, h, obj], axis=2), cls], axis=2)  # (N,3,5+C,G,G)
        per_scale.append(rows.transpose(0, 1, 3, 4, 2).reshape(N, -1, 5 + cfg.num_classes))
    return np.concatenate(per_scale, axis=1)


def decode_predictions(raw: RawPrediction, cfg: ModelConfig, batch_index: int = 0,
                       min_score: float = 0.0) -> List[Detection]:
    """One Detection per anchor per cell (optionally pre-filtered by score)."""
    rows = decode_arrays(raw, cfg)[batch_index]
    scores = rows[:, 4] * rows[:, 5:].max(axis=1)
    out = []
    for r, sc in zip(rows, scores):
        if sc < min_score:
            continue
        out.append(Detection(float(r[0]), float(r[1]), float(r[2]), float(r[3]),
                             float(r[4]), tuple(float(p) for p in r[5:]), float(sc)))
    return out


def _logit(p: float) -> float:
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    return math.log(p / (1.0 - p))


def encode_box(box: GroundTruthBox, cfg: ModelConfig, scale: int, anchor: int) -> Tuple[float, float, float, float]:
    """Raw (t_x, t_y, t_w, t_h) that decode to ``box`` at its cell for the given anchor."""
    G = cfg.grids[scale]
    stride = cfg.input_size / G
    gx = min(int(box.cx // stride), G - 1)
    gy = min(int(box.cy // stride), G - 1)
    aw, ah = cfg.scale_anchors(scale)[anchor]
    return (_logit(box.cx / stride - gx), _logit(box.cy / stride - gy),
            math.log(box.w / aw), math.log(box.h / ah))


# ---------- targets ----------

@dataclass
class ScaleTargets:
    pos: np.ndarray      # (N,3,G,G) bool
    ignore: np.ndarray   # (N,3,G,G) bool
    boxes: np.ndarray    # (N,3,G,G,4) gt cx,cy,w,h
    cls: np.ndarray      # (N,3,G,G,C)


@dataclass
class Targets:
    scales: List[ScaleTargets]
    # (image, scale, anchor, gy, gx, gt index)
    assignments: List[Tuple[int, int, int, int, int, int]] = field(default_factory=list)


def shape_iou(w: float, h: float, anchors: np.ndarray) -> np.ndarray:
    """IoU of a (w,h) box against anchors with all centers aligned."""
    inter = np.minimum(w, anchors[:, 0]) * np.minimum(h, anchors[:, 1])
    return inter / (w * h + anchors[:, 0] * anchors[:, 1] - inter)


def assign_targets(gt_boxes, cfg: ModelConfig) -> Targets:
    """Give every GT its best-shape anchor (over both scales) at its cell.

    ``gt_boxes`` is a batch (list of per-image box lists) or a single flat
    list. Anchors with shape IoU above the ignore threshold that were not
    chosen are excluded from the objectness loss. A slot already claimed by
    an earlier GT keeps that GT.
    """
    batch = list(gt_boxes)
    if batch and isinstance(batch[0], GroundTruthBox):
        batch = [batch]
    N = len(batch)
    S = cfg.input_size
    anchors = np.array(cfg.anchors)
    scales = []
    for G in cfg.grids:
        scales.append(ScaleTargets(
            pos=np.zeros((N, 3, G, G), dtype=bool), ignore=np.zeros((N, 3, G, G), dtype=bool),
            boxes=np.zeros((N, 3, G, G, 4)), cls=np.zeros((N, 3, G, G, cfg.num_classes))))
    assignments = []
    for n, boxes in enumerate(batch):
        for gi, b in enumerate(boxes):
            x0, y0, x1, y1 = b.corners
            if x0 < -1e-6 or y0 < -1e-6 or x1 > S + 1e-6 or y1 > S + 1e-6:
                raise ValidationError(f"ground-truth box {b} lies outside the {S}x{S} input frame")
            if not 0 <= b.class_id < cfg.num_classes:
                raise ValidationError(f"class id {b.class_id} outside [0, {cfg.num_classes})")
            ious = shape_iou(b.w, b.h, anchors)
            best = int(np.argmax(ious))
            for a in range(6):
                s, k = divmod(a, 3)
                G = cfg.grids[s]
                stride = S / G
                gx = min(int(b.cx // stride), G - 1)
                gy = min(int(b.cy // stride), G - 1)
                t = scales[s]
                if a == best:
                    if t.pos[n, k, gy, gx]:
                        continue
                    t.pos[n, k, gy, gx] = True
                    t.ignore[n, k, gy, gx] = False
                    t.boxes[n, k, gy, gx] = (b.cx, b.cy, b.w, b.h)
                    t.cls[n, k, gy, gx, b.class_id] = 1.0
                    assignments.append((n, s, k, gy, gx, gi))
                elif ious[a] > cfg.ignore_iou_threshold and not t.pos[n, k, gy, gx]:
                    t.ignore[n, k, gy, gx] = True
    return Targets(scales=scales, assignments=assignments)


# ---------- loss ----------

@dataclass
class LossResult:
    total: float
    loc: float
    obj: float
    cls: float

    def as_dict(self) -> Dict[str, float]:
        return {'loss_total': self.total, 'loss_loc': self.loc, 'loss_obj': self.obj, 'loss_cls': self.cls}


def _bce_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))


def ciou_with_grad(pred: np.ndarray, gt: np.ndarray, plain_iou: bool = False):
    """Vectorized CIoU (or IoU) of (M,4) pred vs gt boxes and d/d(pred).

    Returns (values (M,), grad (M,4)) with grad over (cx, cy, w, h).
    """
    x, y, w, h = pred.T
    gx, gy, gw, gh = gt.T
    px0, px1, py0, py1 = x - w / 2, x + w / 2, y - h / 2, y + h / 2
    qx0, qx1, qy0, qy1 = gx - gw / 2, gx + gw / 2, gy - gh / 2, gy + gh / 2
    zero = np.zeros_like(x)
    one = np.ones_like(x)

    iw_raw = np.minimum(px1, qx1) - np.maximum(px0, qx0)
    ih_raw = np.minimum(py1, qy1) - np.maximum(py0, qy0)
    ovx = iw_raw > 0
    ovy = ih_raw > 0
    iw = np.where(ovx, iw_raw, 0.0)
    ih = np.where(ovy, ih_raw, 0.0)
    # d iw / d(px0, px1)
    d_iw_px1 = np.where(ovx & (px1 < qx1), one, zero)
    d_iw_px0 = np.where(ovx & (px0 > qx0), -one, zero)
    d_ih_py1 = np.where(ovy & (py1 < qy1), one, zero)
    d_ih_py0 = np.where(ovy & (py0 > qy0), -one, zero)
    d_iw = np.stack([d_iw_px0 + d_iw_px1, zero, 0.5 * (d_iw_px1 - d_iw_px0), zero], axis=1)
    d_ih = np.stack([zero, d_ih_py0 + d_ih_py1, zero, 0.5 * (d_ih_py1 - d_ih_py0)], axis=1)
    inter = iw * ih
    d_inter = d_iw * ih[:, None] + d_ih * iw[:, None]
    union = w * h + gw * gh - inter
    d_union = np.stack([zero, zero, h, w], axis=1) - d_inter
    value = inter / union
    d_value = (d_inter * union[:, None] - inter[:, None] * d_union) / (union ** 2)[:, None]
    if plain_iou:
        return value, d_value

    cw = np.maximum(px1, qx1) - np.minimum(px0, qx0)
    chh = np.maximum(py1, qy1) - np.minimum(py0, qy0)
    d_cw_px1 = np.where(px1 > qx1, one, zero)
    d_cw_px0 = np.where(px0 < qx0, -one, zero)
    d_ch_py1 = np.where(py1 > qy1, one, zero)
    d_ch_py0 = np.where(py0 < qy0, -one, zero)
    d_cw = np.stack([d_cw_px0 + d_cw_px1, zero, 0.5 * (d_cw_px1 - d_cw_px0), zero], axis=1)
    d_ch = np.stack([zero, d_ch_py0 + d_ch_py1, zero, 0.5 * (d_ch_py1 - d_ch_py0)], axis=1)
    c2 = cw * cw + chh * chh
    d_c2 = 2 * cw[:, None] * d_cw + 2 * chh[:, None] * d_ch
    rho2 = (x - gx) ** 2 + (y - gy) ** 2
    d_rho2 = np.stack([2 * (x - gx), 2 * (y - gy), zero, zero], axis=1)
    dist = rho2 / c2
    d_dist = (d_rho2 * c2[:, None] - rho2[:, None] * d_c2) / (c2 ** 2)[:, None]

    k = 4.0 / math.pi ** 2
    diff = np.arctan(gw / gh) - np.arctan(w / h)
    v = k * diff ** 2
    r2 = w * w + h * h
    d_v = np.stack([zero, zero, -2 * k * diff * h / r2, 2 * k * diff * w / r2], axis=1)
    denom = 1.0 - value + v
    safe = denom > 1e-12
    dsafe = np.where(safe, denom, 1.0)
    av = np.where(safe, v * v / dsafe, 0.0)
    d_av = np.where(safe[:, None],
                    (2 * v[:, None] * d_v * dsafe[:, None] - (v * v)[:, None] * (d_v - d_value))
                    / (dsafe ** 2)[:, None], 0.0)
    return value - dist - av, d_value - d_dist - d_av


def loss_and_grad(raw: RawPrediction, targets: Targets, cfg: ModelConfig) -> Tuple[LossResult, RawPrediction]:
    lam_loc, lam_obj, lam_cls = cfg.loss_weights
    N = raw.p4.shape[0]
    loc = obj = cls = 0.0
    grads = []
    for s, out in enumerate(raw.scales):
        P = _split_head(np.asarray(out, dtype=np.float64), cfg.num_classes)
        t = targets.scales[s]
        G = P.shape[-1]
        if t.pos.shape != (N, 3, G, G):
            raise ShapeMismatchError(f"targets {t.pos.shape} do not match predictions {(N, 3, G, G)}")
        stride = cfg.input_size / G
        anchors = cfg.scale_anchors(s)
        g = np.zeros_like(P)

        # objectness on every non-ignored anchor
        z = P[:, :, 4]
        y = t.pos.astype(float)
        keep = t.pos | ~t.ignore
        obj += float(np.sum(_bce_logits(z, y) * keep))
        g[:, :, 4] = (sigmoid(z) - y) * keep * lam_obj

        if t.pos.any():
            idx = np.nonzero(t.pos)
            n_i, a_i, gy_i, gx_i = idx
            tx = P[n_i, a_i, 0, gy_i, gx_i]
            ty = P[n_i, a_i, 1, gy_i, gx_i]
            tw = P[n_i, a_i, 2, gy_i, gx_i]
            th = P[n_i, a_i, 3, gy_i, gx_i]
            sx, sy = sigmoid(tx), sigmoid(ty)
            ew = np.exp(np.clip(tw, -20, 20))
            eh = np.exp(np.clip(th, -20, 20))
            pw = anchors[a_i, 0] * ew
            ph = anchors[a_i, 1] * eh
            pred = np.stack([(sx + gx_i) * stride, (sy + gy_i) * stride, pw, ph], axis=1)
            gt = t.boxes[idx]
            val, dval = ciou_with_grad(pred, gt, plain_iou=(cfg.loc_loss == 'iou'))
            loc += float(np.sum(1.0 - val))
            dl = -dval * lam_loc
            g[n_i, a_i, 0, gy_i, gx_i] = dl[:, 0] * stride * sx * (1 - sx)
            g[n_i, a_i, 1, gy_i, gx_i] = dl[:, 1] * stride * sy * (1 - sy)
            g[n_i, a_i, 2, gy_i, gx_i] = dl[:, 2] * np.where(np.abs(tw) < 20, pw, 0.0)
            g[n_i, a_i, 3, gy_i, gx_i] = dl[:, 3] * np.where(np.abs(th) < 20, ph, 0.0)

            zc = P[n_i, a_i, 5:, gy_i, gx_i]          # (M, C)
            yc = t.cls[idx]
            cls += float(np.sum(_bce_logits(zc, yc)))
            g[n_i, a_i, 5:, gy_i, gx_i] = (sigmoid(zc) - yc) * lam_cls

        grads.append((g / N).reshape(out.shape).astype(out.dtype))

    total = (lam_loc * loc + lam_obj * obj + lam_cls * cls) / N
    result = LossResult(total=total, loc=loc / N, obj=obj / N, cls=cls / N)
    return result, RawPrediction(p4=grads[0], p5=grads[1])


def loss(raw: RawPrediction, targets: Targets, cfg: ModelConfig) -> LossResult:
    return loss_and_grad(raw, targets, cfg)[0]


# ---------- NMS ----------

def _order_key(d: Detection):
    return (-d.score, d.cx, d.cy, d.w, d.h)


def nms(detections: Sequence[Detection], conf_threshold: float = config.DEFAULT_CONF_THRESHOLD,
        iou_threshold: float = config.DEFAULT_NMS_IOU) -> List[Detection]:
    """Greedy per-class suppression in (score desc, cx, cy) order."""
    cand = sorted((d for d in detections if d.score >= conf_threshold), key=_order_key)
    if not cand:
        return []
    arr = np.array([[d.cx, d.cy, d.w, d.h] for d in cand])
    classes = np.array([d.class_id for d in cand])
    ious = iou_matrix(arr, arr)
    suppressed = np.zeros(len(cand), dtype=bool)
    kept = []
    for i in range(len(cand)):
        if suppressed[i]:
            continue
        kept.append(cand[i])
        suppressed |= (ious[i] > iou_threshold) & (classes == classes[i])
    return kept


# ---------- letterbox / data ----------

@dataclass(frozen=True)
class Letterbox:
    scale: float
    pad_x: int
    pad_y: int
    src_w: int
    src_h: int

    def to_network(self, b):
        return replace(b, cx=b.cx * self.scale + self.pad_x, cy=b.cy * self.scale + self.pad_y,
                       w=b.w * self.scale, h=b.h * self.scale)

    def to_source(self, b):
        return replace(b, cx=(b.cx - self.pad_x) / self.scale, cy=(b.cy - self.pad_y) / self.scale,
                       w=b.w / self.scale, h=b.h / self.scale)


def letterbox(img: np.ndarray, size: int, fill: float = config.LETTERBOX_FILL) -> Tuple[np.ndarray, Letterbox]:
    """Aspect-preserving bilinear resize into a size x size canvas."""
    img = np.asarray(img, dtype=np.float32)
    H, W = img.shape
    scale = min(size / W, size / H)
    nw = max(1, int(round(W * scale)))
    nh = max(1, int(round(H * scale)))
    resized = img if (nw, nh) == (W, H) else cv2.resize(img, (nw, nh), interpolation=cv2.INTER_LINEAR)
    canvas = np.full((size, size), fill, dtype=np.float32)
    px, py = (size - nw) // 2, (size - nh) // 2
    canvas[py:py + nh, px:px + nw] = resized
    return canvas, Letterbox(scale, px, py, W, H)


@dataclass
class Sample:
    frame_id: str
    ir: np.ndarray         # (S,S) network frame
    thermal: np.ndarray    # (S,S)
    boxes: List[GroundTruthBox]
    transform: Optional[Letterbox] = None


def load_dataset(root: str, split: str, input_size: int) -> List[Sample]:
    """Letterboxed samples of one split ('train' | 'val' | 'test' | 'all')."""
    from alignment import read_labeled_frame, split_frame_ids

    ids = split_frame_ids(root, split)
    samples = []
    for fid in ids:
        frame = read_labeled_frame(root, fid)
        ir, lb = letterbox(frame.pair.ir.pixels, input_size)
        th, _ = letterbox(frame.pair.thermal_warped.pixels, input_size)
        samples.append(Sample(fid, ir, th, [lb.to_network(b) for b in frame.boxes], lb))
    return samples


def _stack(samples: Sequence[Sample], cfg: ModelConfig) -> Tuple[np.ndarray, np.ndarray]:
    dt = cfg.np_dtype
    ir = np.stack([s.ir for s in samples])[:, None].astype(dt)
    th = np.stack([s.thermal for s in samples])[:, None].astype(dt)
    return ir, th


# ---------- training ----------

@dataclass(frozen=True)
class TrainHyper:
    epochs: int = config.DEFAULT_EPOCHS
    batch: int = config.DEFAULT_BATCH
    lr: float = config.DEFAULT_LR
    seed: int = config.DEFAULT_SEED
    eval_every: int = 0
    progress: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or not self.lr > 0:
            raise ValidationError(f"invalid training hyper-parameters {self}")


@dataclass
class TrainResult:
    model: DetectorModel
    history: List[Dict[str, float]]


def predict_samples(model: DetectorModel, samples: Sequence[Sample],
                    conf: float = config.MAP_CONF_THRESHOLD, nms_iou: float = config.DEFAULT_NMS_IOU,
                    batch: int = 16) -> List[List[Detection]]:
    """Post-NMS detections per sample, in the network frame."""
    was_training = model.training
    model.eval()
    out: List[List[Detection]] = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        ir, th = _stack(chunk, model.config)
        raw = model.predict(ir, th)
        for n in range(len(chunk)):
            out.append(nms(decode_predictions(raw, model.config, n, min_score=conf), conf, nms_iou))
    model.train(was_training)
    return out


def train(model: DetectorModel, dataset: Sequence[Sample], hyper: TrainHyper = TrainHyper(),
          val_set: Optional[Sequence[Sample]] = None) -> TrainResult:
    """Shuffled minibatch Adam; deterministic for a given seed."""
    from evalkit import map_scores

    if not dataset:
        raise ValidationError("cannot train on an empty dataset")
    cfg = model.config
    rng = np.random.default_rng(hyper.seed)
    params = model.parameters()
    history: List[Dict[str, float]] = []
    epochs = tqdm(range(1, hyper.epochs + 1), desc='train', unit='epoch', disable=not hyper.progress)
    for epoch in epochs:
        model.train()
        order = rng.permutation(len(dataset))
        sums = np.zeros(4)
        steps = 0
        for i in range(0, len(order), hyper.batch):
            chunk = [dataset[j] for j in order[i:i + hyper.batch]]
            ir, th = _stack(chunk, cfg)
            targets = assign_targets([s.boxes for s in chunk], cfg)
            raw = model.forward(ir, th)
            result, grads = loss_and_grad(raw, targets, cfg)
            zero_grad(params)
            model.backward(grads)
            adam_step(params, hyper.lr)
            sums += (result.total, result.loc, result.obj, result.cls)
            steps += 1
        mean = sums / steps
        row = {'epoch': epoch, 'loss_total': float(mean[0]), 'loss_loc': float(mean[1]),
               'loss_obj': float(mean[2]), 'loss_cls': float(mean[3])}
        last = epoch == hyper.epochs
        if val_set and ((hyper.eval_every and epoch % hyper.eval_every == 0) or last):
            dets = predict_samples(model, val_set)
            row.update(map_scores(dets, [s.boxes for s in val_set]))
        history.append(row)
        log_event('train_epoch', row)
        epochs.set_postfix(loss=f"{row['loss_total']:.4f}")
    model.eval()
    log_event('train_done', {'epochs': hyper.epochs, 'final_loss': history[-1]['loss_total'],
                             'parameters': model.parameter_count, 'mode': cfg.mode})
    return TrainResult(model=model, history=history)


LOSS_CURVE_COLUMNS = ('epoch', 'loss_total', 'loss_loc', 'loss_obj', 'loss_cls')


def write_loss_curve(path: str, history: Sequence[Dict[str, float]]):
    """Loss columns only; validation metrics are reported separately."""
    import csv

    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_CURVE_COLUMNS, extrasaction='ignore')
        writer.writeheader()
        for row in history:
            writer.writerow(row)


# ---------- inference ----------

def infer_pair(model: DetectorModel, ir: Optional[GrayImage], thermal: Optional[GrayImage] = None,
               conf: float = config.DEFAULT_CONF_THRESHOLD,
               nms_iou: float = config.DEFAULT_NMS_IOU) -> List[Detection]:
    """Letterbox, forward, decode, NMS and map boxes back to the source frame."""
    cfg = model.config
    if ir is not None and thermal is not None and ir.size != thermal.size:
        raise ShapeMismatchError(f"IR {ir.size} and thermal {thermal.size} images differ in size")
    ref = ir if ir is not None else thermal
    if ref is None:
        raise ValidationError("infer_pair needs at least one image")
    S = cfg.input_size
    blank = np.full((S, S), config.LETTERBOX_FILL, dtype=np.float32)
    x_ir, lb = letterbox(ir.pixels, S) if ir is not None else (blank, None)
    x_th, lb_t = letterbox(thermal.pixels, S) if thermal is not None else (blank, None)
    lb = lb or lb_t
    model.eval()
    raw = model.predict(x_ir[None, None] if ir is not None else None,
                        x_th[None, None] if thermal is not None else None)
    dets = nms(decode_predictions(raw, cfg, 0, min_score=conf), conf, nms_iou)
    out = []
    for d in dets:
        m = lb.to_source(d)
        x0, y0, x1, y1 = to_corners(m.cx, m.cy, m.w, m.h)
        x0, y0 = max(x0, 0.0), max(y0, 0.0)
        x1, y1 = min(x1, float(ref.width)), min(y1, float(ref.height))
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            continue
        out.append(m.moved((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0))
    return out


def draw_overlay(img: GrayImage, detections: Sequence[Detection],
                 ground_truth: Sequence[GroundTruthBox] = ()) -> np.ndarray:
    """BGR uint8 image with detections (red, with score) and GT (green)."""
    canvas = cv2.cvtColor(img.to_uint8(), cv2.COLOR_GRAY2BGR)
    for b in ground_truth:
        x0, y0, x1, y1 = (int(round(v)) for v in b.corners)
        cv2.rectangle(canvas, (x0, y0), (x1, y1), (0, 200, 0), 1)
    for d in detections:
        x0, y0, x1, y1 = (int(round(v)) for v in d.corners)
        cv2.rectangle(canvas, (x0, y0), (x1, y1), (0, 0, 255), 1)
        cv2.putText(canvas, f"{d.score:.2f}", (x0, max(y0 - 2, 8)), cv2.FONT_HERSHEY_SIMPLEX,
                    0.3, (0, 0, 255), 1, cv2.LINE_AA)
    return canvas


def save_overlay(path: str, overlay: np.ndarray):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    if not cv2.imwrite(path, overlay):
        raise OSError(f"could not write overlay {path}")


def detections_to_json(frame: str, detections: Sequence[Detection]) -> str:
    return json.dumps({'frame': frame, 'boxes': [
        {'cx': d.cx, 'cy': d.cy, 'w': d.w, 'h': d.h, 'score': d.score} for d in detections]})


def read_detections_jsonl(path: str) -> Dict[str, List[Detection]]:
    if not os.path.exists(path):
        raise OSError(f"detections file not found: {path}")
    out: Dict[str, List[Detection]] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec['frame'])] = [Detection.scored(float(b['cx']), float(b['cy']), float(b['w']),
                                                           float(b['h']), float(b['score']))
                                          for b in rec['boxes']]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValidationError(f"{path}:{lineno}: malformed detection record ({e})") from e
    return out


# ---------- persistence ----------

def save_model(model: DetectorModel, path: str):
    """``path`` gets the FVW1 weights, ``path + '.json'`` the ModelConfig."""
    save_weights(path, layer_records(model.layers))
    with open(path + '.json', 'w', encoding='utf-8') as f:
        json.dump({'config': model.config.to_dict(), 'seed': model.seed}, f, indent=2, sort_keys=True)


def load_model(path: str) -> DetectorModel:
    sidecar = path + '.json'
    if not os.path.exists(sidecar):
        raise OSError(f"model sidecar not found: {sidecar}")
    with open(sidecar, 'r', encoding='utf-8') as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{sidecar}: invalid JSON ({e})") from e
    model = DetectorModel(ModelConfig.from_dict(meta['config']), int(meta.get('seed', 0)))
    assign_records(model.layers, load_weights(path))
    model.eval()
    return model


# ---------- modality comparison ----------

def compare_modalities(train_set: Sequence[Sample], val_set: Sequence[Sample], base: ModelConfig,
                       hyper: TrainHyper) -> Dict[str, float]:
    """Train fusion / IR-only / thermal-only identically; mAP@0.5 on val_set for each."""
    from evalkit import map_scores

    out: Dict[str, float] = {}
    for mode in MODES:
        model = build_model(replace(base, mode=mode), hyper.seed)
        trained = train(model, train_set, hyper).model
        dets = predict_samples(trained, val_set)
        out[mode] = map_scores(dets, [s.boxes for s in val_set])['map50']
    log_event('modality_comparison', out)
    return out
