"""
Planar chessboard calibration.

Per-view homographies -> closed-form zero-skew intrinsics -> per-view poses
-> Levenberg-Marquardt refinement of intrinsics, distortion and poses.
Corners come from annotation CSVs (or the synthetic renderer); there is no
corner detector here.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from audit_logger import log_event
from errors import (
    ArityError,
    DegenerateConfigurationError,
    FireSightError,
    NumericalError,
    PointBehindCameraError,
    RefinementDivergedError,
    ValidationError,
)
from geometry import (
    Distortion,
    Homography,
    Intrinsics,
    PixelPoint,
    Pose,
    WorldPoint,
    distort_points,
    estimate_homography_arrays,
    nearest_rotation,
    project_points,
    rotation_from_axis_angle,
    undistort_pixels,
)

# Parameter layout of the refinement vector: 9 shared, then 6 per view.
INTRINSIC_NAMES = ('fx', 'fy', 'cx', 'cy', 'k1', 'k2', 'k3', 'p1', 'p2')
_N_SHARED = len(INTRINSIC_NAMES)
_N_VIEW = 6


@dataclass(frozen=True)
class ChessboardSpec:
    inner_rows: int
    inner_cols: int
    square_size: float

    def __post_init__(self):
        # 2x2 is accepted here so tiny boards can be described; calibrate() needs 3x3
        if self.inner_rows < 2 or self.inner_cols < 2:
            raise ValidationError(
                f"chessboard needs at least 2x2 inner corners, got {self.inner_rows}x{self.inner_cols}")
        if not self.square_size > 0:
            raise ValidationError(f"square size must be positive, got {self.square_size}")

    @property
    def corner_count(self) -> int:
        return self.inner_rows * self.inner_cols

    def outer_corner_indices(self) -> Tuple[int, int, int, int]:
        """Row-major indices of the four extreme inner corners (TL, TR, BL, BR)."""
        r, c = self.inner_rows, self.inner_cols
        return 0, c - 1, (r - 1) * c, r * c - 1


@dataclass(frozen=True, eq=False)
class CornerObservations:
    """Corners of one view, row-major over inner corners, as an (N, 2) array."""
    view_id: str
    corners: np.ndarray

    def __post_init__(self):
        arr = np.array(self.corners, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"view {self.view_id}: non-finite corner coordinates")
        if np.any(arr < 0):
            raise ValidationError(f"view {self.view_id}: corner outside image bounds")
        arr.setflags(write=False)
        object.__setattr__(self, 'view_id', str(self.view_id))
        object.__setattr__(self, 'corners', arr)

    @classmethod
    def from_points(cls, view_id: str, points: Sequence[PixelPoint]) -> 'CornerObservations':
        return cls(view_id, np.array([[p.u, p.v] for p in points], dtype=float))

    @property
    def points(self) -> List[PixelPoint]:
        return [PixelPoint(float(u), float(v)) for u, v in self.corners]

    def __len__(self) -> int:
        return len(self.corners)


@dataclass(frozen=True)
class CalibrationResult:
    intrinsics: Intrinsics
    distortion: Distortion
    poses: Tuple[Pose, ...]
    rms_reprojection: float
    view_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'poses', tuple(self.poses))
        ids = tuple(str(v) for v in self.view_ids) or tuple(str(i) for i in range(len(self.poses)))
        if len(ids) != len(self.poses):
            raise ValidationError(f"{len(ids)} view ids for {len(self.poses)} poses")
        object.__setattr__(self, 'view_ids', ids)
        if not self.rms_reprojection >= 0:
            raise ValidationError(f"rms_reprojection must be >= 0, got {self.rms_reprojection}")

    def to_dict(self) -> Dict:
        k, d = self.intrinsics, self.distortion
        return {
            'fx': k.fx, 'fy': k.fy, 'cx': k.cx, 'cy': k.cy,
            'k1': d.k1, 'k2': d.k2, 'k3': d.k3, 'p1': d.p1, 'p2': d.p2,
            'rms': self.rms_reprojection,
            'views': [
                {'view_id': vid,
                 'rotation_axis_angle': [float(v) for v in pose.axis_angle],
                 'translation': [float(v) for v in pose.t]}
                for vid, pose in zip(self.view_ids, self.poses)
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'CalibrationResult':
        try:
            k = Intrinsics(float(data['fx']), float(data['fy']), float(data['cx']), float(data['cy']))
            d = Distortion(float(data['k1']), float(data['k2']), float(data['k3']),
                           float(data['p1']), float(data['p2']))
            views = data.get('views', [])
            poses = tuple(Pose.from_axis_angle(v['rotation_axis_angle'], v['translation']) for v in views)
            ids = tuple(str(v.get('view_id', i)) for i, v in enumerate(views))
            return cls(k, d, poses, float(data['rms']), ids)
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"malformed calibration data: missing or bad {e}") from e


# ---------- Board ----------

def planar_target_points(spec: ChessboardSpec) -> List[WorldPoint]:
    return [WorldPoint(col * spec.square_size, row * spec.square_size, 0.0)
            for row in range(spec.inner_rows) for col in range(spec.inner_cols)]


def planar_target_array(spec: ChessboardSpec) -> np.ndarray:
    """(N, 3) board points, same order as planar_target_points."""
    rows, cols = np.mgrid[0:spec.inner_rows, 0:spec.inner_cols]
    return np.column_stack([cols.ravel() * spec.square_size,
                            rows.ravel() * spec.square_size,
                            np.zeros(spec.corner_count)]).astype(float)


# ---------- Closed-form initialization ----------

def _conic_row(h: np.ndarray, i: int, j: int) -> np.ndarray:
    # v_ij for the zero-skew conic b = (B11, B22, B13, B23, B33)
    a, b = h[:, i], h[:, j]
    return np.array([a[0] * b[0],
                     a[1] * b[1],
                     a[2] * b[0] + a[0] * b[2],
                     a[2] * b[1] + a[1] * b[2],
                     a[2] * b[2]])


def init_intrinsics_zhang(view_homographies: Sequence[Homography]) -> Intrinsics:
    """Zero-skew intrinsics from >= 3 board-to-image homographies."""
    hs = list(view_homographies)
    if len(hs) < 3:
        raise ArityError(f"intrinsics initialization needs at least 3 views, got {len(hs)}")
    for i in range(len(hs)):
        for j in range(i + 1, len(hs)):
            if hs[i].distance(hs[j]) < 1e-12:
                raise DegenerateConfigurationError(
                    f"degenerate view set: views {i} and {j} have identical homographies")

    # condition the pixel frame: origin at the mean board-origin image, unit ~ 1
    origins = np.array([h.h[:2, 2] / h.h[2, 2] for h in hs])
    o = origins.mean(axis=0)
    s = 1.0 / max(float(np.mean(np.abs(origins))), 1.0)
    T = np.array([[s, 0.0, -s * o[0]], [0.0, s, -s * o[1]], [0.0, 0.0, 1.0]])

    rows = []
    for hom in hs:
        h = T @ hom.h
        h = h / np.linalg.norm(h)
        rows.append(_conic_row(h, 0, 1))
        rows.append(_conic_row(h, 0, 0) - _conic_row(h, 1, 1))
    V = np.array(rows)
    _, S, Vt = np.linalg.svd(V)
    if S[3] <= 1e-10 * S[0]:
        raise DegenerateConfigurationError("degenerate view set: conic system is rank deficient")
    b = Vt[-1]
    if b[0] < 0:
        b = -b
    B11, B22, B13, B23, B33 = b
    if B11 <= 0 or B22 <= 0:
        raise DegenerateConfigurationError("degenerate view set: conic is not positive definite")
    cx_n = -B13 / B11
    cy_n = -B23 / B22
    lam = B33 - B13 * B13 / B11 - B23 * B23 / B22
    if lam <= 0:
        raise DegenerateConfigurationError("degenerate view set: negative conic scale")
    fx_n = np.sqrt(lam / B11)
    fy_n = np.sqrt(lam / B22)
    # undo T: K = T^-1 K'
    return Intrinsics(fx=float(fx_n / s), fy=float(fy_n / s),
                      cx=float(cx_n / s + o[0]), cy=float(cy_n / s + o[1]))


def init_extrinsics(h: Homography, k: Intrinsics) -> Pose:
    M = k.inverse_matrix @ h.h
    lam = 1.0 / np.linalg.norm(M[:, 0])
    r1 = lam * M[:, 0]
    r2 = lam * M[:, 1]
    t = lam * M[:, 2]
    if t[2] < 0:
        r1, r2, t = -r1, -r2, -t
    if t[2] <= 0:
        raise PointBehindCameraError("board behind camera: recovered translation has t.z <= 0")
    R = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    return Pose(R, t)


# ---------- Reprojection ----------

def _check_views(poses: Sequence[Pose], observations: Sequence[CornerObservations], spec: ChessboardSpec):
    if len(poses) != len(observations):
        raise ValidationError(f"{len(observations)} observed views but {len(poses)} poses")
    for obs in observations:
        if len(obs) != spec.corner_count:
            raise ValidationError(
                f"view {obs.view_id}: expected {spec.corner_count} corners, got {len(obs)}")


def reprojection_rms(result: CalibrationResult, observations: Sequence[CornerObservations],
                     spec: ChessboardSpec) -> float:
    _check_views(result.poses, observations, spec)
    world = planar_target_array(spec)
    total = 0.0
    count = 0
    for pose, obs in zip(result.poses, observations):
        uv = project_points(world, pose, result.intrinsics, result.distortion)
        total += float(np.sum((uv - obs.corners) ** 2))
        count += len(obs)
    return float(np.sqrt(total / count)) if count else 0.0


def per_view_rms(result: CalibrationResult, observations: Sequence[CornerObservations],
                 spec: ChessboardSpec) -> Dict[str, float]:
    """RMS reprojection error of each view, keyed by view id."""
    _check_views(result.poses, observations, spec)
    world = planar_target_array(spec)
    out = {}
    for pose, obs in zip(result.poses, observations):
        uv = project_points(world, pose, result.intrinsics, result.distortion)
        out[obs.view_id] = float(np.sqrt(np.mean(np.sum((uv - obs.corners) ** 2, axis=1))))
    return out


def _project_view(world: np.ndarray, shared: np.ndarray, view: np.ndarray) -> np.ndarray:
    fx, fy, cx, cy = shared[:4]
    R = rotation_from_axis_angle(view[:3])
    cam = world @ R.T + view[3:]
    z = cam[:, 2]
    if np.any(z <= 0):
        raise PointBehindCameraError("point behind camera during refinement")
    xy = distort_points(cam[:, :2] / z[:, None], Distortion.from_array(shared[4:]))
    return np.column_stack([fx * xy[:, 0] + cx, fy * xy[:, 1] + cy])


class _Problem:
    """Stacked residuals and finite-difference Jacobian for the LM loop."""

    def __init__(self, world: np.ndarray, observations: Sequence[CornerObservations], free_shared: np.ndarray):
        self.world = world
        self.obs = [o.corners for o in observations]
        self.n_views = len(self.obs)
        self.n_res = 2 * len(world)
        self.free_shared = free_shared

    def residuals(self, p: np.ndarray) -> np.ndarray:
        shared = p[:_N_SHARED]
        if shared[0] <= 0 or shared[1] <= 0:
            raise NumericalError("non-positive focal length")
        out = np.empty(self.n_views * self.n_res)
        for v in range(self.n_views):
            view = p[_N_SHARED + _N_VIEW * v:_N_SHARED + _N_VIEW * (v + 1)]
            out[v * self.n_res:(v + 1) * self.n_res] = (_project_view(self.world, shared, view) - self.obs[v]).ravel()
        return out

    def jacobian(self, p: np.ndarray) -> np.ndarray:
        """Central differences, filled view block by view block in a fixed order."""
        n_params = _N_SHARED + _N_VIEW * self.n_views
        J = np.zeros((self.n_views * self.n_res, n_params))
        shared = p[:_N_SHARED]
        for v in range(self.n_views):
            lo = _N_SHARED + _N_VIEW * v
            view = p[lo:lo + _N_VIEW]
            rows = slice(v * self.n_res, (v + 1) * self.n_res)
            for j in range(_N_SHARED):
                if not self.free_shared[j]:
                    continue
                eps = 1e-6 * max(1.0, abs(shared[j]))
                sp, sm = shared.copy(), shared.copy()
                sp[j] += eps
                sm[j] -= eps
                J[rows, j] = (_project_view(self.world, sp, view)
                              - _project_view(self.world, sm, view)).ravel() / (2 * eps)
            for j in range(_N_VIEW):
                eps = 1e-6 * max(1.0, abs(view[j]))
                vp, vm = view.copy(), view.copy()
                vp[j] += eps
                vm[j] -= eps
                J[rows, lo + j] = (_project_view(self.world, shared, vp)
                                   - _project_view(self.world, shared, vm)).ravel() / (2 * eps)
        return J


def _pack(result: CalibrationResult) -> np.ndarray:
    k, d = result.intrinsics, result.distortion
    parts = [np.array([k.fx, k.fy, k.cx, k.cy]), d.as_array()]
    for pose in result.poses:
        parts.append(pose.axis_angle)
        parts.append(pose.t)
    return np.concatenate(parts)


def _unpack(p: np.ndarray, view_ids: Sequence[str], rms: float) -> CalibrationResult:
    k = Intrinsics(*(float(v) for v in p[:4]))
    d = Distortion.from_array(p[4:_N_SHARED])
    poses = []
    for v in range(len(view_ids)):
        lo = _N_SHARED + _N_VIEW * v
        poses.append(Pose.from_axis_angle(p[lo:lo + 3], p[lo + 3:lo + 6]))
    return CalibrationResult(k, d, tuple(poses), rms, tuple(view_ids))


def _cost(problem: _Problem, p: np.ndarray) -> float:
    try:
        r = problem.residuals(p)
    except (NumericalError, ValidationError):
        return float('inf')
    c = float(r @ r)
    return c if np.isfinite(c) else float('inf')


def refine_calibration(init: CalibrationResult, observations: Sequence[CornerObservations],
                       spec: ChessboardSpec, max_iter: int = config.CALIB_MAX_ITER,
                       frozen: Sequence[str] = ()) -> CalibrationResult:
    """Levenberg-Marquardt over the 9 shared parameters and all poses.

    Parameters named in ``frozen`` (e.g. ``('k3',)``) keep their input value.
    Damping starts at 1e-3 and moves by x10 / /10; the loop stops when the
    relative cost decrease falls below 1e-12 or after ``max_iter`` iterations.
    The returned rms is recomputed from the data and is never larger than
    the rms of the ``init`` parameters.
    """
    _check_views(init.poses, observations, spec)
    unknown = [n for n in frozen if n not in INTRINSIC_NAMES]
    if unknown:
        raise ValidationError(f"cannot freeze unknown parameter(s): {unknown}")
    free_shared = np.array([n not in frozen for n in INTRINSIC_NAMES])
    problem = _Problem(planar_target_array(spec), observations, free_shared)
    n_corners = spec.corner_count * len(observations)

    p = _pack(init)
    cost = _cost(problem, p)
    if not np.isfinite(cost):
        raise NumericalError("initial calibration does not project every corner")
    active = np.concatenate([free_shared, np.ones(_N_VIEW * len(observations), dtype=bool)])
    lam = config.CALIB_INITIAL_DAMPING
    accepted_any = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        if cost <= 1e-30:
            break
        r = problem.residuals(p)
        J = problem.jacobian(p)[:, active]
        A = J.T @ J
        g = J.T @ r
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1.0
        new_cost = float('inf')
        p_new = p
        while True:
            try:
                delta = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None:
                p_new = p.copy()
                p_new[active] += delta
                new_cost = _cost(problem, p_new)
                if new_cost < cost:
                    break
            lam *= 10.0
            if lam > 1e16:
                break
        if not new_cost < cost:
            # damping overflow: nothing reduces the cost from here
            if accepted_any or np.max(np.abs(g)) <= 1e-6 * max(1.0, cost):
                break
            best = _unpack(p, init.view_ids, float(np.sqrt(cost / n_corners)))
            raise RefinementDivergedError(
                f"refinement diverged: damping overflow at cost {cost:.6g}", best=best)
        accepted_any = True
        rel = (cost - new_cost) / cost
        p, cost = p_new, new_cost
        lam = max(lam / 10.0, 1e-15)
        if rel < config.CALIB_REL_TOL:
            break

    rms = float(np.sqrt(cost / n_corners))
    result = _unpack(p, init.view_ids, rms)
    log_event('calibration_pass_done', {
        'iterations': iterations, 'rms': result.rms_reprojection,
        'frozen': list(frozen), 'views': len(observations)})
    return result


# ---------- Pipeline ----------

@dataclass(frozen=True)
class CalibrationOptions:
    max_iter: int = config.CALIB_MAX_ITER
    two_pass: bool = True


def _with_view_context(view_id: str, err: FireSightError) -> FireSightError:
    wrapped = type(err)(f"view {view_id}: {err}")
    if isinstance(err, RefinementDivergedError):
        wrapped.best = err.best
    return wrapped


def view_homographies(observations: Sequence[CornerObservations], spec: ChessboardSpec) -> List[Homography]:
    board = planar_target_array(spec)[:, :2]
    out = []
    for obs in observations:
        if len(obs) != spec.corner_count:
            raise ValidationError(
                f"view {obs.view_id}: expected {spec.corner_count} corners, got {len(obs)}")
        try:
            out.append(estimate_homography_arrays(board, obs.corners))
        except (NumericalError, ValidationError) as e:
            raise _with_view_context(obs.view_id, e) from e
    return out


def calibrate(observations: Sequence[CornerObservations], spec: ChessboardSpec,
              options: Optional[CalibrationOptions] = None) -> CalibrationResult:
    options = options or CalibrationOptions()
    observations = list(observations)
    for i in range(len(observations)):
        for j in range(i + 1, len(observations)):
            a, b = observations[i], observations[j]
            if a.corners.shape == b.corners.shape and np.array_equal(a.corners, b.corners):
                raise DegenerateConfigurationError(
                    f"degenerate view set: views {a.view_id} and {b.view_id} are identical")
    if len(observations) < 3:
        raise ArityError(f"calibration needs at least 3 views, got {len(observations)}")
    if spec.inner_rows < 3 or spec.inner_cols < 3:
        raise ValidationError(
            f"calibration needs at least 3x3 inner corners, got {spec.inner_rows}x{spec.inner_cols}")

    homographies = view_homographies(observations, spec)
    k = init_intrinsics_zhang(homographies)
    poses = []
    for obs, h in zip(observations, homographies):
        try:
            poses.append(init_extrinsics(h, k))
        except NumericalError as e:
            raise _with_view_context(obs.view_id, e) from e
    ids = tuple(o.view_id for o in observations)
    init = CalibrationResult(k, Distortion(), tuple(poses), 0.0, ids)
    init = CalibrationResult(k, Distortion(), tuple(poses), reprojection_rms(init, observations, spec), ids)

    if options.two_pass:
        result = refine_calibration(init, observations, spec, options.max_iter, frozen=('k3',))
        result = refine_calibration(result, observations, spec, options.max_iter)
    else:
        result = refine_calibration(init, observations, spec, options.max_iter)

    k, d = result.intrinsics, result.distortion
    log_event('calibration_done', {
        'views': len(observations), 'rms': result.rms_reprojection,
        'fx': k.fx, 'fy': k.fy, 'cx': k.cx, 'cy': k.cy,
        'k1': d.k1, 'k2': d.k2, 'k3': d.k3, 'p1': d.p1, 'p2': d.p2})
    return result


def undistort_observations(obs: CornerObservations, calib: CalibrationResult) -> CornerObservations:
    """Corner pixels as the ideal (undistorted) pinhole camera would see them."""
    return CornerObservations(obs.view_id, undistort_pixels(obs.corners, calib.intrinsics, calib.distortion))


# ---------- File I/O ----------

CORNER_CSV_HEADER = ['view_id', 'corner_index', 'u', 'v']


def read_corner_csv(path: str, spec: Optional[ChessboardSpec] = None) -> List[CornerObservations]:
    """Views in order of first appearance; corner_index must cover 0..N-1."""
    if not os.path.exists(path):
        raise OSError(f"corner file not found: {path}")
    views: Dict[str, Dict[int, Tuple[float, float]]] = {}
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CORNER_CSV_HEADER:
            raise ValidationError(f"{path}:1: expected header {','.join(CORNER_CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValidationError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                vid = row[0].strip()
                idx = int(row[1])
                u, v = float(row[2]), float(row[3])
            except ValueError as e:
                raise ValidationError(f"{path}:{lineno}: {e}") from e
            corners = views.setdefault(vid, {})
            if idx in corners:
                raise ValidationError(f"{path}:{lineno}: duplicate corner {idx} for view {vid}")
            corners[idx] = (u, v)
    out = []
    for vid, corners in views.items():
        n = len(corners)
        if sorted(corners) != list(range(n)):
            raise ValidationError(f"{path}: view {vid} has non-contiguous corner indices")
        if spec is not None and n != spec.corner_count:
            raise ValidationError(f"{path}: view {vid} has {n} corners, board needs {spec.corner_count}")
        out.append(CornerObservations(vid, np.array([corners[i] for i in range(n)])))
    return out


def write_corner_csv(path: str, observations: Sequence[CornerObservations]):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(CORNER_CSV_HEADER)
        for obs in observations:
            for i, (u, v) in enumerate(obs.corners):
                writer.writerow([obs.view_id, i, repr(float(u)), repr(float(v))])


def save_calibration(result: CalibrationResult, path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(result.to_dict(), f, indent=2)


def load_calibration(path: str) -> CalibrationResult:
    if not os.path.exists(path):
        raise OSError(f"calibration file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON ({e})") from e
    return CalibrationResult.from_dict(data)
