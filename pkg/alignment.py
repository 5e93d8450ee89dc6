"""
Thermal-to-IR registration, common-frame cropping and label propagation.

The rig is fixed: one homography (thermal pixels -> IR pixels) is estimated
from chessboard corners seen by both cameras and reused for every frame.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

import config
from audit_logger import log_event
from boxes import GroundTruthBox
from calibration import ChessboardSpec, CornerObservations
from errors import NoOverlapError, ShapeMismatchError, ValidationError
from geometry import (
    GrayImage,
    Homography,
    PixelPoint,
    estimate_homography_arrays,
    transfer_errors,
    warp_coverage,
    warp_image,
)


@dataclass(frozen=True)
class CorrespondenceSet:
    """(ir, thermal) pixel pairs of the same physical points."""
    pairs: Tuple[Tuple[PixelPoint, PixelPoint], ...]

    def __post_init__(self):
        object.__setattr__(self, 'pairs', tuple((a, b) for a, b in self.pairs))
        if len(self.pairs) < 4:
            raise ValidationError(f"need at least 4 correspondences, got {len(self.pairs)}")

    @property
    def ir(self) -> np.ndarray:
        return np.array([[a.u, a.v] for a, _ in self.pairs])

    @property
    def thermal(self) -> np.ndarray:
        return np.array([[b.u, b.v] for _, b in self.pairs])

    def check_bounds(self, ir_size: Tuple[int, int], thermal_size: Tuple[int, int]):
        for name, pts, (w, h) in (('IR', self.ir, ir_size), ('thermal', self.thermal, thermal_size)):
            bad = (pts[:, 0] < 0) | (pts[:, 0] > w - 1) | (pts[:, 1] < 0) | (pts[:, 1] > h - 1)
            if np.any(bad):
                i = int(np.flatnonzero(bad)[0])
                raise ValidationError(f"{name} point {tuple(pts[i])} outside a {w}x{h} image")


@dataclass(frozen=True)
class CropRect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1 or self.x < 0 or self.y < 0:
            raise ValidationError(f"invalid crop {self}")

    def fits(self, width: int, height: int) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height

    def as_dict(self) -> dict:
        return {'x': self.x, 'y': self.y, 'w': self.w, 'h': self.h}


@dataclass(frozen=True)
class AlignedPair:
    ir: GrayImage
    thermal_warped: GrayImage
    crop: CropRect

    def __post_init__(self):
        for name, img in (('ir', self.ir), ('thermal_warped', self.thermal_warped)):
            if img.size != (self.crop.w, self.crop.h):
                raise ShapeMismatchError(
                    f"{name} is {img.width}x{img.height} but the crop is {self.crop.w}x{self.crop.h}")

    @property
    def size(self) -> Tuple[int, int]:
        return self.crop.w, self.crop.h


@dataclass(frozen=True)
class LabeledFrame:
    pair: AlignedPair
    boxes: Tuple[GroundTruthBox, ...]

    def __post_init__(self):
        object.__setattr__(self, 'boxes', tuple(self.boxes))
        w, h = self.pair.size
        for b in self.boxes:
            x0, y0, x1, y1 = b.corners
            if x0 < -1e-6 or y0 < -1e-6 or x1 > w + 1e-6 or y1 > h + 1e-6:
                raise ValidationError(f"box {b} lies outside the {w}x{h} frame")


# ---------- Correspondences / homography ----------

def outer_corner_correspondences(ir_corners: CornerObservations, thermal_corners: CornerObservations,
                                 spec: ChessboardSpec, all_corners: bool = False) -> CorrespondenceSet:
    """The four extreme inner corners of both views, paired TL, TR, BL, BR.

    With ``all_corners`` every corner is paired instead (least-squares H).
    """
    for name, obs in (('IR', ir_corners), ('thermal', thermal_corners)):
        if len(obs) != spec.corner_count:
            raise ValidationError(
                f"{name} view {obs.view_id}: expected {spec.corner_count} corners, got {len(obs)}")
    indices = range(spec.corner_count) if all_corners else spec.outer_corner_indices()
    pairs = tuple((PixelPoint(*map(float, ir_corners.corners[i])),
                   PixelPoint(*map(float, thermal_corners.corners[i]))) for i in indices)
    return CorrespondenceSet(pairs)


def estimate_alignment(corrs: CorrespondenceSet) -> Homography:
    """Homography mapping thermal pixels onto IR pixels."""
    h = estimate_homography_arrays(corrs.thermal, corrs.ir)
    err = transfer_errors(h, corrs.thermal, corrs.ir)
    log_event('homography_estimated', {
        'pairs': len(corrs.pairs), 'mean_transfer_px': float(err.mean()),
        'max_transfer_px': float(err.max())})
    return h


def align_thermal_to_ir(thermal: GrayImage, h: Homography, ir_size: Tuple[int, int],
                        fill: float = config.WARP_FILL) -> GrayImage:
    w, hgt = ir_size
    return warp_image(thermal, h, w, hgt, fill)


# ---------- Cropping ----------

def _largest_centered_rect(mask: np.ndarray) -> Tuple[int, int, int, int]:
    H, W = mask.shape
    ys, xs = np.nonzero(mask)
    gx, gy = xs.mean(), ys.mean()
    S = np.zeros((H + 1, W + 1), dtype=np.int64)
    S[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1)

    def full(x0: int, y0: int, w: int, h: int) -> bool:
        if x0 < 0 or y0 < 0 or x0 + w > W or y0 + h > H:
            return False
        total = S[y0 + h, x0 + w] - S[y0, x0 + w] - S[y0 + h, x0] + S[y0, x0]
        return total == w * h

    def start(center: float, length: int) -> int:
        return int(np.floor(center - (length - 1) / 2.0 + 0.5))

    best = (0, 0, 0, 0)
    best_area = 0
    for w in range(1, W + 1):
        x0 = start(gx, w)
        if not full(x0, start(gy, 1), w, 1):
            continue
        # rectangles grow outward around the centroid, so validity is monotone in h
        lo, hi = 1, H
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if full(x0, start(gy, mid), w, mid):
                lo = mid
            else:
                hi = mid - 1
        if w * lo > best_area:
            best_area = w * lo
            best = (x0, start(gy, lo), w, lo)
    return best


def crop_common(ir: GrayImage, thermal_warped: GrayImage, valid_mask: np.ndarray) -> AlignedPair:
    """Crop both images to the largest rectangle inside the warped-thermal
    coverage, centered on the coverage centroid."""
    if ir.size != thermal_warped.size:
        raise ShapeMismatchError(
            f"IR is {ir.width}x{ir.height} but warped thermal is {thermal_warped.width}x{thermal_warped.height}")
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != (ir.height, ir.width):
        raise ShapeMismatchError(f"valid mask shape {mask.shape} does not match image {ir.height}x{ir.width}")
    if not mask.any():
        raise NoOverlapError("no overlap: warped thermal image covers no IR pixel")
    x, y, w, h = _largest_centered_rect(mask)
    if w == 0:
        raise NoOverlapError("no overlap: no rectangle fits around the coverage centroid")
    crop = CropRect(x, y, w, h)
    log_event('alignment_cropped', {'crop': crop.as_dict(), 'source': [ir.width, ir.height],
                                    'coverage': float(mask.mean())})
    return AlignedPair(ir.crop(x, y, w, h), thermal_warped.crop(x, y, w, h), crop)


# ---------- Labels ----------

def propagate_labels(boxes: Sequence[GroundTruthBox], crop: CropRect,
                     min_area_ratio: float = config.LABEL_MIN_AREA_RATIO) -> List[GroundTruthBox]:
    """Shift boxes into the crop frame, clip, and drop boxes that keep at
    most ``min_area_ratio`` of their area."""
    out = []
    for b in boxes:
        x0, y0, x1, y1 = b.corners
        x0, x1 = x0 - crop.x, x1 - crop.x
        y0, y1 = y0 - crop.y, y1 - crop.y
        cx0, cy0 = max(x0, 0.0), max(y0, 0.0)
        cx1, cy1 = min(x1, float(crop.w)), min(y1, float(crop.h))
        if cx1 <= cx0 or cy1 <= cy0:
            continue
        ratio = (cx1 - cx0) * (cy1 - cy0) / b.area
        if ratio <= min_area_ratio + 1e-12:
            continue
        if (cx0, cy0, cx1, cy1) == (x0, y0, x1, y1):
            out.append(GroundTruthBox(b.cx - crop.x, b.cy - crop.y, b.w, b.h, b.class_id))
        else:
            out.append(GroundTruthBox.from_corners(cx0, cy0, cx1, cy1, b.class_id))
    return out


def align_frame(ir: GrayImage, thermal: GrayImage, h: Homography, boxes: Sequence[GroundTruthBox],
                fill: float = config.WARP_FILL,
                min_area_ratio: float = config.LABEL_MIN_AREA_RATIO) -> LabeledFrame:
    """Full per-frame pipeline: warp, crop, propagate the IR labels."""
    warped = align_thermal_to_ir(thermal, h, ir.size, fill)
    mask = warp_coverage(thermal.width, thermal.height, h, ir.width, ir.height)
    pair = crop_common(ir, warped, mask)
    return LabeledFrame(pair, tuple(propagate_labels(boxes, pair.crop, min_area_ratio)))


def checker_blend(a: GrayImage, b: GrayImage, tile: int = 16) -> GrayImage:
    """Checkerboard mosaic of two same-size images for eyeballing registration."""
    if a.size != b.size:
        raise ShapeMismatchError(f"cannot blend {a.size} with {b.size}")
    rows, cols = np.indices((a.height, a.width))
    pick = ((rows // tile + cols // tile) % 2).astype(bool)
    return GrayImage(np.where(pick, b.pixels, a.pixels))


# ---------- Dataset layout ----------

def write_label_file(path: str, boxes: Sequence[GroundTruthBox], frame_w: int, frame_h: int):
    """One line per box: ``class cx cy w h``, normalized to the frame."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for b in boxes:
            f.write(f"{b.class_id} {b.cx / frame_w:.10f} {b.cy / frame_h:.10f} "
                    f"{b.w / frame_w:.10f} {b.h / frame_h:.10f}\n")


def read_label_file(path: str, frame_w: int, frame_h: int) -> List[GroundTruthBox]:
    if not os.path.exists(path):
        raise OSError(f"label file not found: {path}")
    out = []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise ValidationError(f"{path}:{lineno}: expected 'class cx cy w h'")
            try:
                cls = int(parts[0])
                cx, cy, w, h = (float(p) for p in parts[1:])
            except ValueError as e:
                raise ValidationError(f"{path}:{lineno}: {e}") from e
            if cls != 0:
                raise ValidationError(f"{path}:{lineno}: only class 0 (person) is supported, got {cls}")
            if not all(0.0 <= v <= 1.0 for v in (cx, cy, w, h)):
                raise ValidationError(f"{path}:{lineno}: normalized values must lie in [0,1]")
            out.append(GroundTruthBox(cx * frame_w, cy * frame_h, w * frame_w, h * frame_h, cls))
    return out


def frame_paths(root: str, frame_id: str) -> Tuple[str, str, str]:
    return (os.path.join(root, 'ir', f"{frame_id}.png"),
            os.path.join(root, 'thermal', f"{frame_id}.png"),
            os.path.join(root, 'labels', f"{frame_id}.txt"))


def write_labeled_frame(root: str, frame_id: str, frame: LabeledFrame):
    ir_path, th_path, lb_path = frame_paths(root, frame_id)
    frame.pair.ir.save(ir_path)
    frame.pair.thermal_warped.save(th_path)
    w, h = frame.pair.size
    write_label_file(lb_path, frame.boxes, w, h)


def read_labeled_frame(root: str, frame_id: str) -> LabeledFrame:
    ir_path, th_path, lb_path = frame_paths(root, frame_id)
    ir = GrayImage.load(ir_path)
    thermal = GrayImage.load(th_path)
    if ir.size != thermal.size:
        raise ShapeMismatchError(f"frame {frame_id}: IR {ir.size} and thermal {thermal.size} differ")
    boxes = read_label_file(lb_path, ir.width, ir.height)
    return LabeledFrame(AlignedPair(ir, thermal, CropRect(0, 0, ir.width, ir.height)), tuple(boxes))


def split_frame_ids(root: str, split: str) -> List[str]:
    """Frame ids of one split ('train' | 'val' | 'test' | 'all') from the dataset manifest."""
    manifest_path = os.path.join(root, 'manifest.json')
    if not os.path.exists(manifest_path):
        raise OSError(f"dataset manifest not found: {manifest_path}")
    with open(manifest_path, 'r', encoding='utf-8') as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{manifest_path}: invalid JSON ({e})") from e
    splits = manifest.get('splits', {}) if isinstance(manifest, dict) else None
    if not isinstance(splits, dict):
        raise ValidationError(f"{manifest_path}: 'splits' must map split names to frame ids")
    if split == 'all':
        return [str(fid) for part in ('train', 'val', 'test') for fid in splits.get(part, [])]
    if split not in splits:
        raise ValidationError(f"unknown split {split!r}; dataset has {sorted(splits)}")
    return [str(fid) for fid in splits[split]]
