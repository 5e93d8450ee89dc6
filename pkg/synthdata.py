"""
Deterministic synthetic IR/thermal rig.

Humans are soft-edged ellipse stacks. Smoke attenuates and hazes the IR
view only; heat sources show up in the thermal view only. The two cameras
share an optical centre, so one homography (K_ir R K_th^-1) relates them
exactly. Scene renders are ideal pinhole images (post-undistortion);
distortion only enters the chessboard renders used for calibration.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from tqdm import tqdm

import config
from alignment import align_frame, write_labeled_frame
from audit_logger import log_event
from boxes import Detection, GroundTruthBox
from calibration import ChessboardSpec, CornerObservations, planar_target_array
from errors import ValidationError
from geometry import (
    Distortion,
    GrayImage,
    Homography,
    Intrinsics,
    Pose,
    project_points,
    rotation_from_axis_angle,
    undistort_points,
    warp_image,
)

POSTURES = ('standing', 'crouching', 'lying', 'arms_up')
CORRUPTION_MODES = ('mixed', 'complementary')

# (center x, center y, radius x, radius y) in units of body height, y down
_STANDING = (
    (0.0, -0.40, 0.065, 0.08),     # head
    (0.0, -0.12, 0.12, 0.20),      # torso
    (-0.055, 0.25, 0.05, 0.23),    # legs
    (0.055, 0.25, 0.05, 0.23),
    (-0.16, -0.10, 0.035, 0.18),   # arms
    (0.16, -0.10, 0.035, 0.18),
)
_ARMS_UP = _STANDING[:4] + (
    (-0.12, -0.50, 0.035, 0.16),
    (0.12, -0.50, 0.035, 0.16),
)

IR_BACKGROUND = (0.30, 0.10)     # base, field amplitude
IR_BODY = (0.65, 0.06)
THERMAL_BACKGROUND = (0.08, 0.04)
THERMAL_BODY = (0.85, 0.05)
THERMAL_FILL = 0.10
SMOKE_ATTENUATION = (0.97, 0.03)
SMOKE_HAZE = (0.55, 0.03)


def _body_parts(posture: str) -> Tuple[Tuple[float, float, float, float], ...]:
    if posture == 'standing':
        return _STANDING
    if posture == 'arms_up':
        return _ARMS_UP
    if posture == 'crouching':
        return tuple((x * 1.1, y * 0.65, rx * 1.1, ry * 0.65) for x, y, rx, ry in _STANDING)
    if posture == 'lying':
        return tuple((y, x, ry, rx) for x, y, rx, ry in _STANDING)
    raise ValidationError(f"unknown posture {posture!r}; expected one of {POSTURES}")


@dataclass(frozen=True)
class HumanSpec:
    cx: float
    cy: float
    height: float          # body height in pixels
    posture: str = 'standing'

    def __post_init__(self):
        if self.posture not in POSTURES:
            raise ValidationError(f"unknown posture {self.posture!r}; expected one of {POSTURES}")
        if not self.height >= 8:
            raise ValidationError(f"human height must be at least 8 px, got {self.height}")

    def ellipses(self) -> List[Tuple[float, float, float, float]]:
        s = self.height
        return [(self.cx + x * s, self.cy + y * s, rx * s, ry * s) for x, y, rx, ry in _body_parts(self.posture)]

    def extent(self) -> Tuple[float, float, float, float]:
        parts = self.ellipses()
        return (min(x - rx for x, _, rx, _ in parts), min(y - ry for _, y, _, ry in parts),
                max(x + rx for x, _, rx, _ in parts), max(y + ry for _, y, _, ry in parts))

    def to_dict(self) -> Dict:
        return {'cx': self.cx, 'cy': self.cy, 'height': self.height, 'posture': self.posture}


@dataclass(frozen=True)
class HeatSource:
    cx: float
    cy: float
    radius: float
    intensity: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError(f"heat source radius must be positive, got {self.radius}")
        if not 0.0 < self.intensity <= 1.0:
            raise ValidationError(f"heat source intensity must lie in (0,1], got {self.intensity}")

    def to_dict(self) -> Dict:
        return {'cx': self.cx, 'cy': self.cy, 'radius': self.radius, 'intensity': self.intensity}


@dataclass(frozen=True, eq=False)
class RigSpec:
    """Two cameras with a shared optical centre.

    ``rotation`` maps thermal-camera rays into the IR camera, so the
    thermal -> IR pixel homography is K_ir R K_th^-1.
    """
    ir: Intrinsics
    thermal: Intrinsics
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    ir_distortion: Distortion = Distortion()
    thermal_distortion: Distortion = Distortion()

    def __post_init__(self):
        # Pose validates orthonormality and det = +1
        object.__setattr__(self, 'rotation', Pose(self.rotation, np.zeros(3)).R)

    @property
    def homography(self) -> Homography:
        return Homography(self.ir.matrix @ self.rotation @ self.thermal.inverse_matrix)

    def thermal_pose(self, ir_pose: Pose) -> Pose:
        """Board pose seen from the thermal camera, given its IR pose."""
        rt = self.rotation.T
        return Pose(rt @ ir_pose.R, rt @ ir_pose.t)

    @classmethod
    def identity(cls, size: int) -> 'RigSpec':
        k = Intrinsics(1.2 * size, 1.2 * size, (size - 1) / 2.0, (size - 1) / 2.0)
        return cls(k, k)

    @classmethod
    def default(cls, size: int) -> 'RigSpec':
        c = (size - 1) / 2.0
        return cls(
            ir=Intrinsics(1.2 * size, 1.2 * size, c, c),
            thermal=Intrinsics(1.1 * size, 1.1 * size, c + 1.5, c - 1.0),
            rotation=rotation_from_axis_angle([0.012, -0.02, 0.008]),
            ir_distortion=Distortion(k1=-0.08, k2=0.02, p1=0.001, p2=-0.0005),
            thermal_distortion=Distortion(k1=-0.12, k2=0.03, p1=-0.001, p2=0.0008),
        )

    def to_dict(self) -> Dict:
        return {
            'ir': vars(self.ir), 'thermal': vars(self.thermal),
            'rotation_axis_angle': [float(v) for v in Pose(self.rotation, np.zeros(3)).axis_angle],
            'ir_distortion': vars(self.ir_distortion), 'thermal_distortion': vars(self.thermal_distortion),
            'homography_thermal_to_ir': self.homography.matrix.tolist(),
        }


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    humans: Tuple[HumanSpec, ...] = ()
    smoke_density: float = 0.0
    heat_sources: Tuple[HeatSource, ...] = ()
    rig: Optional[RigSpec] = None
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'humans', tuple(self.humans))
        object.__setattr__(self, 'heat_sources', tuple(self.heat_sources))
        if self.width < 16 or self.height < 16:
            raise ValidationError(f"scene must be at least 16x16, got {self.width}x{self.height}")
        if not 0.0 <= self.smoke_density <= 1.0:
            raise ValidationError(f"smoke_density must lie in [0,1], got {self.smoke_density}")
        if not self.noise_sigma >= 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for i, hmn in enumerate(self.humans):
            x0, y0, x1, y1 = hmn.extent()
            if x0 < 0 or y0 < 0 or x1 > self.width - 1 or y1 > self.height - 1:
                raise ValidationError(f"human {i} extends outside the {self.width}x{self.height} frame")
        for i, src in enumerate(self.heat_sources):
            if not (0 <= src.cx <= self.width - 1 and 0 <= src.cy <= self.height - 1):
                raise ValidationError(f"heat source {i} centre lies outside the frame")
        if self.rig is None:
            object.__setattr__(self, 'rig', RigSpec.identity(max(self.width, self.height)))

    def to_dict(self) -> Dict:
        return {'width': self.width, 'height': self.height,
                'humans': [h.to_dict() for h in self.humans],
                'smoke_density': self.smoke_density,
                'heat_sources': [s.to_dict() for s in self.heat_sources],
                'noise_sigma': self.noise_sigma, 'seed': self.seed}


@dataclass(frozen=True, eq=False)
class RenderedPair:
    ir: GrayImage
    thermal: GrayImage              # thermal camera's own frame
    gt_boxes: Tuple[GroundTruthBox, ...]
    gt_homography: Homography       # thermal -> IR
    body_alpha: np.ndarray          # union of human coverage, IR frame


# ---------- rendering ----------

def _smooth_field(rng: np.random.Generator, width: int, height: int, cells: int) -> np.ndarray:
    """Low-frequency noise in [0, 1]."""
    grid = rng.standard_normal((cells, cells)).astype(np.float32)
    f = cv2.resize(grid, (width, height), interpolation=cv2.INTER_CUBIC).astype(float)
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)


def _ellipse_alpha(xs: np.ndarray, ys: np.ndarray, ellipse: Tuple[float, float, float, float]) -> np.ndarray:
    """Coverage with a ~1 px soft edge; alpha >= 0.5 exactly inside the ellipse."""
    ex, ey, rx, ry = ellipse
    rr = np.sqrt(((xs - ex) / rx) ** 2 + ((ys - ey) / ry) ** 2)
    return np.clip(0.5 + (1.0 - rr) * min(rx, ry), 0.0, 1.0)


def _human_alpha(h: HumanSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    alpha = np.zeros_like(xs)
    for e in h.ellipses():
        alpha = np.maximum(alpha, _ellipse_alpha(xs, ys, e))
    return alpha


def _box_from_mask(mask: np.ndarray) -> Optional[GroundTruthBox]:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    H, W = mask.shape
    # pixel centres sit on integer coordinates
    x0, x1 = max(cols.min() - 0.5, 0.0), min(cols.max() + 0.5, float(W))
    y0, y1 = max(rows.min() - 0.5, 0.0), min(rows.max() + 0.5, float(H))
    return GroundTruthBox.from_corners(float(x0), float(y0), float(x1), float(y1))


def render_pair(spec: SceneSpec) -> RenderedPair:
    """IR and thermal views of one scene; every random draw comes from ``spec.seed``."""
    W, H = spec.width, spec.height
    rng = np.random.default_rng(spec.seed)
    ys, xs = np.mgrid[0:H, 0:W].astype(float)

    ir_bg_field = _smooth_field(rng, W, H, 5)
    texture = _smooth_field(rng, W, H, max(4, W // 6))
    smoke_field = _smooth_field(rng, W, H, 4)
    haze_field = _smooth_field(rng, W, H, 3)
    th_bg_field = _smooth_field(rng, W, H, 4)
    ir_noise = rng.standard_normal((H, W))
    th_noise = rng.standard_normal((H, W))

    alpha = np.zeros((H, W))
    boxes: List[GroundTruthBox] = []
    for hmn in spec.humans:
        a = _human_alpha(hmn, xs, ys)
        box = _box_from_mask(a >= 0.5)
        if box is not None:
            boxes.append(box)
        alpha = np.maximum(alpha, a)

    ir_bg = IR_BACKGROUND[0] + IR_BACKGROUND[1] * ir_bg_field
    ir_body = IR_BODY[0] + IR_BODY[1] * (2.0 * texture - 1.0)
    ir = ir_bg * (1.0 - alpha) + ir_body * alpha
    d = spec.smoke_density
    if d > 0:
        attenuation = 1.0 - d * (SMOKE_ATTENUATION[0] + SMOKE_ATTENUATION[1] * smoke_field)
        haze = d * (SMOKE_HAZE[0] + SMOKE_HAZE[1] * haze_field)
        ir = ir * attenuation + haze
    ir = ir + spec.noise_sigma * ir_noise

    th = THERMAL_BACKGROUND[0] + THERMAL_BACKGROUND[1] * th_bg_field
    th_body = THERMAL_BODY[0] + THERMAL_BODY[1] * (2.0 * texture - 1.0)
    th = th * (1.0 - alpha) + th_body * alpha
    for src in spec.heat_sources:
        sigma = src.radius / 2.0
        blob = src.intensity * np.exp(-((xs - src.cx) ** 2 + (ys - src.cy) ** 2) / (2.0 * sigma * sigma))
        th = np.maximum(th, blob)

    h = spec.rig.homography
    # out(p_th) = scene(H p_th): the thermal camera's own view
    thermal = warp_image(GrayImage.from_array(th), h.inverse(), W, H, THERMAL_FILL)
    thermal = GrayImage.from_array(thermal.pixels + spec.noise_sigma * th_noise)
    return RenderedPair(GrayImage.from_array(ir), thermal, tuple(boxes), h, alpha)


def render_chessboard(k: Intrinsics, d: Distortion, pose: Pose, spec: ChessboardSpec,
                      size: Tuple[int, int], supersample: int = 3,
                      view_id: str = '0') -> Tuple[GrayImage, CornerObservations]:
    """Anti-aliased board render plus the exact projected inner corners.

    The board has one extra square on every side of the inner-corner grid.
    """
    W, H = size
    corners = project_points(planar_target_array(spec), pose, k, d)
    inside = ((corners[:, 0] >= 0) & (corners[:, 0] <= W - 1)
              & (corners[:, 1] >= 0) & (corners[:, 1] <= H - 1))
    if not inside.any():
        raise ValidationError(f"view {view_id}: board fully out of view")
    if not inside.all():
        raise ValidationError(f"view {view_id}: {int((~inside).sum())} board corner(s) out of view")

    ss = int(supersample)
    offsets = (np.arange(ss) + 0.5) / ss - 0.5
    us = (np.arange(W)[:, None] + offsets[None]).ravel()
    vs = (np.arange(H)[:, None] + offsets[None]).ravel()
    uu, vv = np.meshgrid(us, vs)
    ideal = undistort_points(k.pixel_to_normalized(np.column_stack([uu.ravel(), vv.ravel()])), d)

    # plane Z=0: (x, y, 1) ~ [r1 r2 t] (X, Y, 1)
    plane = np.column_stack([pose.R[:, 0], pose.R[:, 1], pose.t])
    board = np.column_stack([ideal, np.ones(len(ideal))]) @ np.linalg.inv(plane).T
    w = board[:, 2]
    with np.errstate(divide='ignore', invalid='ignore'):
        X, Y = board[:, 0] / w, board[:, 1] / w
    i = np.floor(X / spec.square_size)
    j = np.floor(Y / spec.square_size)
    on_board = (w > 0) & (i >= -1) & (i < spec.inner_cols) & (j >= -1) & (j < spec.inner_rows)
    values = np.where(on_board, np.where((i + j) % 2 == 0, 0.1, 0.9), 0.5)
    img = values.reshape(H, ss, W, ss).mean(axis=(1, 3))
    return GrayImage.from_array(img), CornerObservations(view_id, corners)


def board_poses(spec: ChessboardSpec, k: Intrinsics, size: Tuple[int, int], n_views: int,
                fill: float = 0.5) -> List[Pose]:
    """Tilted board poses centred in view, covering about ``fill`` of the image width."""
    W, _ = size
    board_w = (spec.inner_cols + 1) * spec.square_size
    z = k.fx * board_w / (fill * W)
    centre = np.array([(spec.inner_cols - 1) / 2.0, (spec.inner_rows - 1) / 2.0, 0.0]) * spec.square_size
    poses = []
    for v in range(n_views):
        phase = 2.0 * math.pi * v / n_views
        rvec = [0.35 * math.sin(phase), 0.35 * math.cos(phase), 0.1 * math.sin(2 * phase)]
        R = rotation_from_axis_angle(rvec)
        shift = np.array([0.05 * z * math.cos(3 * phase), 0.05 * z * math.sin(3 * phase), z * (1 + 0.1 * math.sin(phase))])
        poses.append(Pose(R, shift - R @ centre))
    return poses


@dataclass
class RigViews:
    ir_images: List[GrayImage]
    ir_corners: List[CornerObservations]
    thermal_images: List[GrayImage]
    thermal_corners: List[CornerObservations]


def render_rig_views(rig: RigSpec, spec: ChessboardSpec, ir_poses: Sequence[Pose],
                     size: Tuple[int, int], supersample: int = 3) -> RigViews:
    """The same board poses seen by both cameras (with each camera's distortion)."""
    out = RigViews([], [], [], [])
    for v, pose in enumerate(ir_poses):
        vid = f"view{v:02d}"
        img, obs = render_chessboard(rig.ir, rig.ir_distortion, pose, spec, size, supersample, vid)
        out.ir_images.append(img)
        out.ir_corners.append(obs)
        img, obs = render_chessboard(rig.thermal, rig.thermal_distortion, rig.thermal_pose(pose),
                                     spec, size, supersample, vid)
        out.thermal_images.append(img)
        out.thermal_corners.append(obs)
    return out


# ---------- dataset ----------

@dataclass(frozen=True)
class GeneratorConfig:
    size: int = config.SYNTH_SIZE
    seed: int = config.DEFAULT_SEED
    corruption: str = 'mixed'
    noise_sigma: float = 0.02
    max_humans: int = 3
    rig: Optional[RigSpec] = None

    def __post_init__(self):
        if self.corruption not in CORRUPTION_MODES:
            raise ValidationError(f"corruption must be one of {CORRUPTION_MODES}, got {self.corruption!r}")
        if self.size < 32:
            raise ValidationError(f"render size must be at least 32, got {self.size}")
        if self.max_humans < 1:
            raise ValidationError(f"max_humans must be at least 1, got {self.max_humans}")
        if self.rig is None:
            object.__setattr__(self, 'rig', RigSpec.default(self.size))

    def to_dict(self) -> Dict:
        return {'size': self.size, 'seed': self.seed, 'corruption': self.corruption,
                'noise_sigma': self.noise_sigma, 'max_humans': self.max_humans,
                'rig': self.rig.to_dict()}


def _place_human(rng: np.random.Generator, size: int, taken: List[Tuple[float, float, float, float]]) -> HumanSpec:
    for _ in range(20):
        posture = POSTURES[int(rng.integers(len(POSTURES)))]
        height = float(rng.uniform(0.28, 0.5) * size)
        probe = HumanSpec(0.0, 0.0, height, posture)
        x0, y0, x1, y1 = probe.extent()
        margin = 0.04 * size
        cx = float(rng.uniform(margin - x0, size - 1 - margin - x1))
        cy = float(rng.uniform(margin - y0, size - 1 - margin - y1))
        box = (cx + x0, cy + y0, cx + x1, cy + y1)
        if all(_overlap(box, t) < 0.3 for t in taken):
            taken.append(box)
            return HumanSpec(cx, cy, height, posture)
    taken.append(box)
    return HumanSpec(cx, cy, height, posture)


def _overlap(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def sample_scene(gen: GeneratorConfig, index: int) -> SceneSpec:
    """Scene of frame ``index``; depends only on (gen.seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([gen.seed, index]))
    size = gen.size
    taken: List[Tuple[float, float, float, float]] = []
    humans = tuple(_place_human(rng, size, taken) for _ in range(int(rng.integers(1, gen.max_humans + 1))))
    if gen.corruption == 'complementary':
        heavy_smoke = index % 2 == 0
        smoke = float(rng.uniform(0.8, 1.0)) if heavy_smoke else float(rng.uniform(0.0, 0.2))
        n_heat = 0 if heavy_smoke else int(rng.integers(2, 5))
        intensity = (0.9, 1.0)
    else:
        smoke = float(rng.uniform(0.0, 1.0))
        n_heat = int(rng.integers(0, 3))
        intensity = (0.5, 1.0)
    heat = tuple(HeatSource(float(rng.uniform(0, size - 1)), float(rng.uniform(0, size - 1)),
                            float(rng.uniform(0.04, 0.1) * size), float(rng.uniform(*intensity)))
                 for _ in range(n_heat))
    return SceneSpec(size, size, humans, smoke, heat, gen.rig, gen.noise_sigma,
                     seed=int(rng.integers(0, 2 ** 31 - 1)))


def split_of(frame_id: str, seed: int) -> str:
    digest = hashlib.sha256(f"{seed}:{frame_id}".encode('utf-8')).hexdigest()
    u = int(digest[:8], 16) / float(2 ** 32)
    train, val, _ = config.SPLIT_FRACTIONS
    if u < train:
        return 'train'
    if u < train + val:
        return 'val'
    return 'test'


def frame_id(index: int) -> str:
    return f"frame_{index:05d}"


def make_dataset(n_frames: int, gen: GeneratorConfig, root: str, progress: bool = False) -> Dict:
    """Render, align and write ``n_frames`` labeled pairs plus ``manifest.json``.

    Returns the manifest. Output bytes depend only on (gen, n_frames).
    """
    if n_frames < 1:
        raise ValidationError(f"need at least one frame, got {n_frames}")
    os.makedirs(root, exist_ok=True)
    splits: Dict[str, List[str]] = {'train': [], 'val': [], 'test': []}
    frames = []
    for idx in tqdm(range(n_frames), desc='synth', unit='frame', disable=not progress):
        fid = frame_id(idx)
        scene = sample_scene(gen, idx)
        pair = render_pair(scene)
        labeled = align_frame(pair.ir, pair.thermal, pair.gt_homography, pair.gt_boxes)
        write_labeled_frame(root, fid, labeled)
        split = split_of(fid, gen.seed)
        splits[split].append(fid)
        frames.append({'id': fid, 'split': split, 'scene': scene.to_dict(),
                       'crop': labeled.pair.crop.as_dict(), 'boxes': len(labeled.boxes)})
        log_event('dataset_frame_written', {'frame': fid, 'split': split, 'boxes': len(labeled.boxes)})

    manifest = {
        'tool': config.TOOL_NAME, 'version': config.TOOL_VERSION,
        'n_frames': n_frames, 'generator': gen.to_dict(),
        'split_fractions': list(config.SPLIT_FRACTIONS), 'splits': splits, 'frames': frames,
    }
    if gen.corruption == 'complementary':
        manifest['recipe'] = ('even frames: heavy smoke (0.8-1.0), no heat sources; '
                              'odd frames: light smoke (0-0.2), 2-4 strong heat sources')
    path = os.path.join(root, 'manifest.json')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    log_event('dataset_written', {'root': root, 'frames': n_frames,
                                  'splits': {k: len(v) for k, v in splits.items()}})
    return manifest


# ---------- strawman ----------

def threshold_detector(img: GrayImage, threshold: Optional[float] = None, min_area: int = 16) -> List[Detection]:
    """Bright connected components as person boxes (Otsu threshold by default).

    Score is the mean intensity of the component.
    """
    u8 = img.to_uint8()
    if threshold is None:
        _, mask = cv2.threshold(u8, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    else:
        mask = (img.pixels >= threshold).astype(np.uint8) * 255
    n, labels, stats, _ = cv2.connectedComponentsWithStats(mask, connectivity=8)
    out = []
    for comp in range(1, n):
        x, y, w, h, area = (int(v) for v in stats[comp])
        if area < min_area:
            continue
        score = float(np.clip(img.pixels[labels == comp].mean(), 0.0, 1.0))
        out.append(Detection.scored(x + w / 2.0, y + h / 2.0, float(w), float(h), score))
    out.sort(key=lambda d: -d.score)
    return out
