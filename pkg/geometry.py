"""
Projective camera geometry.

Pinhole projection with Brown-Conrady lens distortion, homography estimation
(normalized DLT) and application, and inverse-mapped image warping and
undistortion of single-channel images.

All functions are pure; scalar operations (``distort``, ``project``, ...) are
thin wrappers over the vectorized ``*_points`` variants that operate on
``(N, 2)`` / ``(N, 3)`` arrays.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

import config
from errors import (
    ArityError,
    ConvergenceError,
    DegenerateConfigurationError,
    PointAtInfinityError,
    PointBehindCameraError,
    ValidationError,
)


# ---------- Point types ----------

def _check_finite(name: str, *values: float):
    for v in values:
        if not math.isfinite(v):
            raise ValidationError(f"{name} has non-finite coordinate(s): {values}")


@dataclass(frozen=True)
class PixelPoint:
    u: float
    v: float

    def __post_init__(self):
        _check_finite('PixelPoint', self.u, self.v)

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=float)


@dataclass(frozen=True)
class NormalizedPoint:
    """Camera-plane coordinates at unit depth."""
    x: float
    y: float

    def __post_init__(self):
        _check_finite('NormalizedPoint', self.x, self.y)

    @property
    def r(self) -> float:
        return math.hypot(self.x, self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class WorldPoint:
    """Millimeters in the world (board) frame."""
    x_w: float
    y_w: float
    z_w: float

    def __post_init__(self):
        _check_finite('WorldPoint', self.x_w, self.y_w, self.z_w)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_w, self.y_w, self.z_w], dtype=float)


# ---------- Camera model ----------

@dataclass(frozen=True)
class Intrinsics:
    """Zero-skew pinhole intrinsics in pixels."""
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        _check_finite('Intrinsics', self.fx, self.fy, self.cx, self.cy)
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.cx < 0 or self.cy < 0:
            raise ValidationError(f"principal point must be non-negative, got ({self.cx}, {self.cy})")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]], dtype=float)

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]], dtype=float)

    def pixel_to_normalized(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        return np.column_stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy])

    def normalized_to_pixel(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        return np.column_stack([self.fx * xy[:, 0] + self.cx, self.fy * xy[:, 1] + self.cy])


@dataclass(frozen=True)
class Distortion:
    """Brown-Conrady coefficients; all zero means no distortion."""
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        _check_finite('Distortion', self.k1, self.k2, self.k3, self.p1, self.p2)

    @property
    def is_zero(self) -> bool:
        return not any((self.k1, self.k2, self.k3, self.p1, self.p2))

    def as_array(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.k3, self.p1, self.p2], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> 'Distortion':
        k1, k2, k3, p1, p2 = (float(v) for v in values)
        return cls(k1=k1, k2=k2, k3=k3, p1=p1, p2=p2)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]], dtype=float)


def rotation_from_axis_angle(rvec: Sequence[float]) -> np.ndarray:
    """Rodrigues formula."""
    r = np.asarray(rvec, dtype=float).reshape(3)
    theta = float(np.linalg.norm(r))
    if theta < 1e-12:
        R = np.eye(3) + _skew(r)
        return nearest_rotation(R)
    k = _skew(r / theta)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def axis_angle_from_rotation(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_t = float(np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0))
    theta = math.acos(cos_t)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-12:
        return 0.5 * vee
    if math.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        B = 0.5 * (R + np.eye(3))
        i = int(np.argmax(np.diag(B)))
        axis = B[:, i] / math.sqrt(max(B[i, i], 1e-300))
        if np.dot(axis, vee) < 0:
            axis = -axis
        return axis / np.linalg.norm(axis) * theta
    return vee / (2.0 * math.sin(theta)) * theta


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Orthogonal polar factor of M with det = +1."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U = U.copy()
        U[:, 2] *= -1.0
        R = U @ Vt
    return R


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform: X_cam = R X_world + t (t in mm)."""
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("Pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValidationError("Pose rotation is not orthonormal (tolerance 1e-9)")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValidationError("Pose rotation must have det = +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, 'R', R)
        object.__setattr__(self, 't', t)

    @classmethod
    def identity(cls) -> 'Pose':
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, rvec: Sequence[float], t: Sequence[float]) -> 'Pose':
        return cls(rotation_from_axis_angle(rvec), np.asarray(t, dtype=float))

    @property
    def axis_angle(self) -> np.ndarray:
        return axis_angle_from_rotation(self.R)


# ---------- Homography ----------

def _canonical(h: np.ndarray) -> np.ndarray:
    h = h / np.linalg.norm(h)
    if h[2, 2] < 0:
        h = -h
    elif h[2, 2] == 0:
        flat = h.ravel()
        nz = np.flatnonzero(flat)
        if nz.size and flat[nz[0]] < 0:
            h = -h
    return h


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map, stored with unit Frobenius norm and h33 >= 0."""
    h: np.ndarray

    def __post_init__(self):
        h = np.array(self.h, dtype=float)
        if h.shape != (3, 3):
            raise ValidationError(f"homography must be 3x3, got {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ValidationError("homography contains non-finite values")
        s = np.linalg.svd(h, compute_uv=False)
        if s[0] == 0 or s[-1] / s[0] < 1e-13:
            raise DegenerateConfigurationError("homography is singular (det = 0)")
        h = _canonical(h)
        h.setflags(write=False)
        object.__setattr__(self, 'h', h)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.h)

    @classmethod
    def identity(cls) -> 'Homography':
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> 'Homography':
        return cls(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]]))

    def inverse(self) -> 'Homography':
        return Homography(np.linalg.inv(self.h))

    def compose(self, other: 'Homography') -> 'Homography':
        """self after other."""
        return Homography(self.h @ other.h)

    def distance(self, other: 'Homography') -> float:
        """Frobenius distance between canonical forms."""
        return float(np.linalg.norm(self.h - other.h))

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            for row in self.h:
                f.write(' '.join(f"{v:.17g}" for v in row) + '\n')

    @classmethod
    def load(cls, path: str) -> 'Homography':
        with open(path, 'r', encoding='utf-8') as f:
            tokens = f.read().split()
        if len(tokens) != 9:
            raise ValidationError(f"{path}: expected 9 numbers, found {len(tokens)}")
        try:
            values = [float(t) for t in tokens]
        except ValueError as e:
            raise ValidationError(f"{path}: {e}") from e
        return cls(np.array(values).reshape(3, 3))


HomographyLike = Union[Homography, np.ndarray]


def as_homography(h: HomographyLike) -> Homography:
    return h if isinstance(h, Homography) else Homography(np.asarray(h, dtype=float))


# ---------- Images ----------

@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel image, intensities in [0, 1], indexed [row, col]."""
    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=float)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValidationError(f"GrayImage needs a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValidationError("GrayImage contains non-finite intensities")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError(
                f"GrayImage intensities must lie in [0,1], got [{px.min()}, {px.max()}]")
        px.setflags(write=False)
        object.__setattr__(self, 'pixels', px)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> 'GrayImage':
        """Clip into [0,1] first (renderers may overshoot slightly)."""
        return cls(np.clip(np.asarray(arr, dtype=float), 0.0, 1.0))

    @classmethod
    def blank(cls, width: int, height: int, value: float = 0.0) -> 'GrayImage':
        return cls(np.full((height, width), value, dtype=float))

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    def crop(self, x: int, y: int, w: int, h: int) -> 'GrayImage':
        return GrayImage(self.pixels[y:y + h, x:x + w])

    def save(self, path: str):
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        if not cv2.imwrite(path, self.to_uint8()):
            raise OSError(f"could not write image {path}")

    @classmethod
    def load(cls, path: str) -> 'GrayImage':
        if not os.path.exists(path):
            raise OSError(f"image not found: {path}")
        arr = cv2.imread(path, cv2.IMREAD_UNCHANGED)
        if arr is None:
            raise ValidationError(f"could not decode image {path}")
        if arr.ndim != 2:
            raise ValidationError(f"{path}: expected a single-channel image, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            raise ValidationError(f"{path}: expected 8-bit pixels, got {arr.dtype}")
        return cls(arr.astype(float) / 255.0)


# ---------- Distortion ----------

def _radial_tangential(xy: np.ndarray, d: Distortion):
    x = xy[:, 0]
    y = xy[:, 1]
    r2 = x * x + y * y
    radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2 + d.k3 * r2 * r2 * r2
    tx = 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x)
    ty = d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y
    return radial, tx, ty


def distort_points(xy: np.ndarray, d: Distortion) -> np.ndarray:
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    radial, tx, ty = _radial_tangential(xy, d)
    return np.column_stack([xy[:, 0] * radial + tx, xy[:, 1] * radial + ty])


def distort(p: NormalizedPoint, d: Distortion) -> NormalizedPoint:
    out = distort_points(p.as_array(), d)[0]
    return NormalizedPoint(float(out[0]), float(out[1]))


def _distortion_jacobian(xy: np.ndarray, d: Distortion) -> Tuple[np.ndarray, ...]:
    x = xy[:, 0]
    y = xy[:, 1]
    r2 = x * x + y * y
    radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2 + d.k3 * r2 * r2 * r2
    dradial = d.k1 + 2.0 * d.k2 * r2 + 3.0 * d.k3 * r2 * r2
    a = radial + 2.0 * x * x * dradial + 2.0 * d.p1 * y + 6.0 * d.p2 * x
    b = 2.0 * x * y * dradial + 2.0 * d.p1 * x + 2.0 * d.p2 * y
    c = 2.0 * x * y * dradial + 2.0 * d.p1 * x + 2.0 * d.p2 * y
    e = radial + 2.0 * y * y * dradial + 6.0 * d.p1 * y + 2.0 * d.p2 * x
    return a, b, c, e


_SEED_MAX_STRETCH = 4.0
_SEED_SCAN_STEPS = 32
_SEED_BISECTIONS = 60
_NEWTON_HALVINGS = 12


def _radial_seed(xd: np.ndarray, d: Distortion) -> np.ndarray:
    """Starting point from the radial part alone.

    Along each point's ray, r * radial(r) = |x_d| is bracketed by scanning
    r up to ``_SEED_MAX_STRETCH * |x_d|`` for the first crossing, then
    bisected. Points with no crossing keep x_d itself.
    """
    rd = np.hypot(xd[:, 0], xd[:, 1])

    def g(r):
        r2 = r * r
        return r * (1.0 + d.k1 * r2 + d.k2 * r2 * r2 + d.k3 * r2 * r2 * r2)

    lo = np.zeros_like(rd)
    hi = np.zeros_like(rd)
    found = ~(rd > 0)
    prev = np.zeros_like(rd)
    for s in np.linspace(0.0, _SEED_MAX_STRETCH, _SEED_SCAN_STEPS + 1)[1:]:
        r = s * rd
        hit = ~found & (g(r) >= rd)
        lo[hit] = prev[hit]
        hi[hit] = r[hit]
        found |= hit
        prev = r
        if np.all(found):
            break
    for _ in range(_SEED_BISECTIONS):
        mid = 0.5 * (lo + hi)
        below = g(mid) < rd
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    scale = np.ones_like(rd)
    ok = found & (rd > 0)
    scale[ok] = 0.5 * (lo[ok] + hi[ok]) / rd[ok]
    return xd * scale[:, None]


def undistort_points(xy_distorted: np.ndarray, d: Distortion,
                     max_iter: int = config.UNDISTORT_MAX_ITER,
                     tol: float = config.UNDISTORT_TOL) -> np.ndarray:
    """Invert ``distort_points``.

    Each point starts from the radial-only inverse along its ray and is then
    polished with damped Newton steps on distort(q) = x_d. A step is halved
    until the residual shrinks; iteration stops below ``tol`` or when no
    point can improve. Raises ConvergenceError when a point still misses by
    more than 1e-8.
    """
    xd = np.asarray(xy_distorted, dtype=float).reshape(-1, 2)
    if d.is_zero:
        return xd.copy()

    def residual(q):
        return np.abs(distort_points(q, d) - xd).max(axis=1, initial=0.0)

    with np.errstate(all='ignore'):
        q = _radial_seed(xd, d)
        norm = residual(q)
        for _ in range(max_iter):
            active = np.isfinite(norm) & (norm > tol)
            if not np.any(active):
                break
            res = distort_points(q, d) - xd
            a, b, c, e = _distortion_jacobian(q, d)
            det = a * e - b * c
            step = np.column_stack([(e * res[:, 0] - b * res[:, 1]) / det,
                                    (-c * res[:, 0] + a * res[:, 1]) / det])
            t = np.ones(len(q))
            pending = active.copy()
            for _ in range(_NEWTON_HALVINGS):
                trial = q - t[:, None] * step
                tnorm = residual(trial)
                take = pending & np.isfinite(tnorm) & (tnorm < norm)
                q[take] = trial[take]
                norm[take] = tnorm[take]
                pending &= ~take
                if not np.any(pending):
                    break
                t *= 0.5
            if np.array_equal(pending, active):
                break
    bad = ~np.isfinite(norm) | (norm > 1e-8)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ConvergenceError(
            f"undistortion did not converge for point ({xd[i, 0]:.6g}, {xd[i, 1]:.6g})")
    return q


def undistort_point(p_distorted: NormalizedPoint, d: Distortion) -> NormalizedPoint:
    q = undistort_points(p_distorted.as_array(), d)[0]
    return NormalizedPoint(float(q[0]), float(q[1]))


# ---------- Projection ----------

def project_points(world: np.ndarray, pose: Pose, k: Intrinsics, d: Distortion) -> np.ndarray:
    W = np.asarray(world, dtype=float).reshape(-1, 3)
    cam = W @ pose.R.T + pose.t
    z = cam[:, 2]
    if np.any(z <= 0):
        i = int(np.flatnonzero(z <= 0)[0])
        raise PointBehindCameraError(
            f"point behind camera: world point {tuple(W[i])} has depth {z[i]:.6g}")
    xy = cam[:, :2] / z[:, None]
    return k.normalized_to_pixel(distort_points(xy, d))


def project(w: WorldPoint, pose: Pose, k: Intrinsics, d: Distortion) -> PixelPoint:
    uv = project_points(w.as_array(), pose, k, d)[0]
    return PixelPoint(float(uv[0]), float(uv[1]))


# ---------- Homography application / estimation ----------

def apply_homography_points(h: HomographyLike, pts: np.ndarray) -> np.ndarray:
    H = as_homography(h).h
    P = np.asarray(pts, dtype=float).reshape(-1, 2)
    num_u = H[0, 0] * P[:, 0] + H[0, 1] * P[:, 1] + H[0, 2]
    num_v = H[1, 0] * P[:, 0] + H[1, 1] * P[:, 1] + H[1, 2]
    w = H[2, 0] * P[:, 0] + H[2, 1] * P[:, 1] + H[2, 2]
    if np.any(np.abs(w) < 1e-12):
        i = int(np.flatnonzero(np.abs(w) < 1e-12)[0])
        raise PointAtInfinityError(f"point at infinity: ({P[i, 0]:.6g}, {P[i, 1]:.6g}) maps to w={w[i]:.3g}")
    return np.column_stack([num_u / w, num_v / w])


def apply_homography(h: HomographyLike, p: PixelPoint) -> PixelPoint:
    out = apply_homography_points(h, p.as_array())[0]
    return PixelPoint(float(out[0]), float(out[1]))


def hartley_normalize(pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Centroid to origin, mean distance sqrt(2). Returns (points, T)."""
    pts = np.asarray(pts, dtype=float)
    c = pts.mean(axis=0)
    dist = np.mean(np.sqrt(np.sum((pts - c) ** 2, axis=1)))
    if dist < 1e-12:
        raise DegenerateConfigurationError("degenerate correspondences: points are coincident")
    s = math.sqrt(2.0) / dist
    T = np.array([[s, 0.0, -s * c[0]],
                  [0.0, s, -s * c[1]],
                  [0.0, 0.0, 1.0]])
    return (pts - c) * s, T


def _has_collinear_triple(pts: np.ndarray, eps: float = 1e-9) -> bool:
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a = pts[j] - pts[i]
                b = pts[k] - pts[i]
                if abs(a[0] * b[1] - a[1] * b[0]) < eps:
                    return True
    return False


def estimate_homography_arrays(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Normalized DLT mapping src -> dst (both (N,2), N >= 4)."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValidationError(f"correspondence count mismatch: {len(src)} vs {len(dst)}")
    n = len(src)
    if n < 4:
        raise ArityError(f"homography needs at least 4 correspondences, got {n}")
    sn, Ts = hartley_normalize(src)
    dn, Td = hartley_normalize(dst)
    if n == 4 and (_has_collinear_triple(sn) or _has_collinear_triple(dn)):
        raise DegenerateConfigurationError("degenerate correspondences: three points are collinear")

    A = np.zeros((max(2 * n, 9), 9))
    x, y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    zeros = np.zeros(n)
    ones = np.ones(n)
    A[0:2 * n:2] = np.column_stack([-x, -y, -ones, zeros, zeros, zeros, u * x, u * y, u])
    A[1:2 * n:2] = np.column_stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v])
    _, S, Vt = np.linalg.svd(A)
    if S[7] <= 1e-12 * S[0]:
        raise DegenerateConfigurationError("degenerate correspondences: DLT system has rank < 8")
    if S[8] / S[7] > 0.99:
        raise DegenerateConfigurationError(
            f"degenerate correspondences: singular value ratio {S[8] / S[7]:.3f}")
    Hn = Vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(Td) @ Hn @ Ts)


def estimate_homography(pairs: Sequence[Tuple[PixelPoint, PixelPoint]]) -> Homography:
    """Homography H with dst ~ H src for each (src, dst) pair."""
    pairs = list(pairs)
    if len(pairs) < 4:
        raise ArityError(f"homography needs at least 4 correspondences, got {len(pairs)}")
    src = np.array([[a.u, a.v] for a, _ in pairs])
    dst = np.array([[b.u, b.v] for _, b in pairs])
    return estimate_homography_arrays(src, dst)


def transfer_errors(h: HomographyLike, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per-pair Euclidean distance between H(src) and dst."""
    mapped = apply_homography_points(h, src)
    return np.linalg.norm(mapped - np.asarray(dst, dtype=float).reshape(-1, 2), axis=1)


# ---------- Sampling / warping ----------

def bilinear_sample(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                    fill: float = config.WARP_FILL) -> Tuple[np.ndarray, np.ndarray]:
    """Sample arr at (xs, ys) (column, row). Returns (values, valid_mask).

    Coordinates within 1e-9 of an integer snap to it, so integer offsets copy
    pixels exactly.
    """
    H, W = arr.shape
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    with np.errstate(invalid='ignore'):
        xr = np.round(xs)
        yr = np.round(ys)
        xs = np.where(np.abs(xs - xr) < 1e-9, xr, xs)
        ys = np.where(np.abs(ys - yr) < 1e-9, yr, ys)
        valid = (np.isfinite(xs) & np.isfinite(ys)
                 & (xs >= 0) & (xs <= W - 1) & (ys >= 0) & (ys <= H - 1))
    xs = np.where(valid, xs, 0.0)
    ys = np.where(valid, ys, 0.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    vals = ((1.0 - fx) * (1.0 - fy) * arr[y0, x0]
            + fx * (1.0 - fy) * arr[y0, x1]
            + (1.0 - fx) * fy * arr[y1, x0]
            + fx * fy * arr[y1, x1])
    return np.where(valid, vals, fill), valid


def _inverse_mapped_coords(h: Homography, out_w: int, out_h: int) -> Tuple[np.ndarray, np.ndarray]:
    Hinv = np.linalg.inv(h.h)
    vs, us = np.mgrid[0:out_h, 0:out_w].astype(float)
    num_x = Hinv[0, 0] * us + Hinv[0, 1] * vs + Hinv[0, 2]
    num_y = Hinv[1, 0] * us + Hinv[1, 1] * vs + Hinv[1, 2]
    w = Hinv[2, 0] * us + Hinv[2, 1] * vs + Hinv[2, 2]
    with np.errstate(divide='ignore', invalid='ignore'):
        xs = np.where(np.abs(w) < 1e-12, np.nan, num_x / w)
        ys = np.where(np.abs(w) < 1e-12, np.nan, num_y / w)
    return xs, ys


def _check_out_size(out_w: int, out_h: int):
    if out_w < 1 or out_h < 1:
        raise ValidationError(f"output size must be positive, got {out_w}x{out_h}")


def warp_image(img: GrayImage, h: HomographyLike, out_w: int, out_h: int,
               fill: float = config.WARP_FILL) -> GrayImage:
    """Inverse warp: out(u, v) = img(h^-1 (u, v)), bilinear, ``fill`` outside."""
    _check_out_size(out_w, out_h)
    hom = as_homography(h)
    xs, ys = _inverse_mapped_coords(hom, out_w, out_h)
    vals, _ = bilinear_sample(img.pixels, xs, ys, fill)
    return GrayImage.from_array(vals)


def warp_coverage(src_w: int, src_h: int, h: HomographyLike, out_w: int, out_h: int) -> np.ndarray:
    """Boolean mask of output pixels whose source sample lies inside the source image."""
    _check_out_size(out_w, out_h)
    xs, ys = _inverse_mapped_coords(as_homography(h), out_w, out_h)
    with np.errstate(invalid='ignore'):
        return (np.isfinite(xs) & np.isfinite(ys)
                & (xs >= -1e-9) & (xs <= src_w - 1 + 1e-9)
                & (ys >= -1e-9) & (ys <= src_h - 1 + 1e-9))


def undistort_image(img: GrayImage, k: Intrinsics, d: Distortion,
                    fill: float = config.WARP_FILL) -> GrayImage:
    """Ideal pinhole image: each output pixel samples the input where the
    distorted lens would have imaged it."""
    if d.is_zero:
        return GrayImage(img.pixels)
    vs, us = np.mgrid[0:img.height, 0:img.width].astype(float)
    xy = k.pixel_to_normalized(np.column_stack([us.ravel(), vs.ravel()]))
    src = k.normalized_to_pixel(distort_points(xy, d))
    vals, _ = bilinear_sample(img.pixels, src[:, 0], src[:, 1], fill)
    return GrayImage.from_array(vals.reshape(img.height, img.width))


def undistort_pixels(uv: np.ndarray, k: Intrinsics, d: Distortion) -> np.ndarray:
    """Map distorted pixel coordinates to ideal pinhole pixel coordinates."""
    xy = undistort_points(k.pixel_to_normalized(uv), d)
    return k.normalized_to_pixel(xy)
