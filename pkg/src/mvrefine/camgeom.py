"""Pinhole cameras, world<->image projection, calibration I/O, and ring-sector rig synthesis.

Conventions: world units are millimeters with z up and the ground plane at
z = 0; image units are pixels. A camera is K @ [R | t] with R mapping world
directions into the camera frame (z along the optical axis) and t = -R @ C
for camera center C. No lens distortion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateProjection, InvalidSpec, InvariantError, ParseError

DEPTH_EPS = 1e-9
ROTATION_TOL_STRICT = 1e-9   # construction-time orthonormality
ROTATION_TOL_LOADED = 1e-6   # tolerance for calibration read from disk
WORLD_UP = np.array([0.0, 0.0, 1.0])


def _as_matrix(value, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (rows, cols):
        raise ParseError(f"{name}: expected {rows}x{cols} matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{name}: contains non-finite entries")
    return arr


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class CameraModel:
    """One calibrated view. Immutable; safe to share across workers.

    Attributes
    ----------
    id : int
    intrinsics : (3, 3) focal lengths and principal point, pixels
    rotation : (3, 3) orthonormal world->camera rotation
    translation : (3,) camera-frame translation, mm
    image_size : (width, height) pixels
    projection : (3, 4) cached intrinsics @ [rotation | translation]
    """

    id: int
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]
    projection: np.ndarray = field(init=False)

    def __post_init__(self):
        K = _readonly(self.intrinsics)
        R = _readonly(self.rotation)
        t = _readonly(np.asarray(self.translation, dtype=float).reshape(3))
        if K.shape != (3, 3):
            raise InvariantError(f"camera {self.id}: intrinsics must be 3x3, got {K.shape}")
        if R.shape != (3, 3):
            raise InvariantError(f"camera {self.id}: rotation must be 3x3, got {R.shape}")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise InvariantError(f"camera {self.id}: focal lengths must be strictly positive")
        ortho = np.max(np.abs(R.T @ R - np.eye(3)))
        if ortho >= ROTATION_TOL_STRICT:
            raise InvariantError(
                f"camera {self.id}: rotation not orthonormal (max |R^T R - I| = {ortho:.3e})"
            )
        proj = _readonly(K @ np.hstack([R, t[:, None]]))
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        object.__setattr__(self, "projection", proj)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, mm."""
        return -self.rotation.T @ self.translation

    def depth_of(self, p: Sequence[float]) -> float:
        """Signed optical-axis depth of a world point (positive = in front)."""
        ph = np.append(np.asarray(p, dtype=float), 1.0)
        return float(self.projection[2] @ ph)


def project(p: Sequence[float], cam: CameraModel) -> np.ndarray:
    """Project a world point (mm) to pixel coordinates.

    Raises DegenerateProjection when the point lies on the camera plane
    (|homogeneous depth| <= 1e-9). The result may fall outside the image
    bounds; callers clamp when sampling.
    """
    ph = np.append(np.asarray(p, dtype=float), 1.0)
    uvw = cam.projection @ ph
    w = uvw[2]
    if abs(w) <= DEPTH_EPS:
        raise DegenerateProjection(
            f"camera {cam.id}: homogeneous depth {w:.3e} below threshold"
        )
    return uvw[:2] / w


def project_points(points: np.ndarray, projection: np.ndarray):
    """Vectorized homogeneous projection.

    Parameters
    ----------
    points : (..., 3) world points, mm
    projection : (3, 4) matrix

    Returns
    -------
    pixels : (..., 2)
    depth : (...) homogeneous depth (third row of the product); not thresholded
    """
    pts = np.asarray(points, dtype=float)
    uvw = pts @ projection[:, :3].T + projection[:, 3]
    depth = uvw[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pixels = uvw[..., :2] / depth[..., None]
    return pixels, depth


def project_points_vjp(points: np.ndarray, projection: np.ndarray, grad_pixels: np.ndarray) -> np.ndarray:
    """Gradient of project_points w.r.t. the world points.

    With rows pi_1, pi_2, pi_3 of the projection and w = pi_3 . [p;1],
    d(u_x)/dp = (pi_1[:3] - u_x * pi_3[:3]) / w and likewise for u_y.
    """
    pts = np.asarray(points, dtype=float)
    uvw = pts @ projection[:, :3].T + projection[:, 3]
    w = uvw[..., 2:3]
    u = uvw[..., :2] / w
    # (..., 2, 3) Jacobian rows
    jac = (projection[:2, :3] - u[..., :, None] * projection[2, :3]) / w[..., None]
    return np.einsum("...ij,...i->...j", jac, grad_pixels)


@dataclass(frozen=True)
class GroundPlaneSpec:
    """Axis-aligned capture space: x/y bounds on the ground plane, mm."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_max: float = 2200.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidSpec("ground-plane bounds must be non-empty intervals")

    @property
    def extent(self) -> tuple[float, float]:
        return (self.x_max - self.x_min, self.y_max - self.y_min)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points (..., 3) inside the capture volume."""
        p = np.asarray(points, dtype=float)
        return (
            (p[..., 0] >= self.x_min) & (p[..., 0] <= self.x_max)
            & (p[..., 1] >= self.y_min) & (p[..., 1] <= self.y_max)
            & (p[..., 2] >= 0.0) & (p[..., 2] <= self.z_max)
        )

    @staticmethod
    def square(halfwidth_mm: float, z_max: float = 2200.0) -> "GroundPlaneSpec":
        h = float(halfwidth_mm)
        return GroundPlaneSpec(-h, h, -h, h, z_max)


@dataclass(frozen=True)
class ArrangementSpec:
    """Parameters for a synthetic ring-sector camera rig.

    Cameras sit on a circle sector of radius `radius_mm` around `look_at`,
    at seeded heights within `height_range_mm`, all oriented at `look_at`.
    `azimuth_coverage_deg` spans less than 360 to reproduce rigs that miss
    one side of the scene.
    """

    name: str
    camera_count: int
    radius_mm: float
    height_range_mm: tuple[float, float]
    azimuth_coverage_deg: tuple[float, float]
    look_at: tuple[float, float, float]
    seed: int
    image_size: tuple[int, int] = (96, 96)
    focal_px: float | None = None           # None: widest focal that covers the capture box
    capture_halfwidth_mm: float | None = None  # None: 0.6 * radius_mm

    def __post_init__(self):
        if self.camera_count < 2:
            raise InvalidSpec("camera_count must be >= 2")
        if self.radius_mm <= 0:
            raise InvalidSpec("radius_mm must be positive")
        span = self.azimuth_coverage_deg[1] - self.azimuth_coverage_deg[0]
        if not (0.0 < span <= 360.0):
            raise InvalidSpec(f"azimuth span must lie in (0, 360], got {span}")
        if self.height_range_mm[0] > self.height_range_mm[1]:
            raise InvalidSpec("height_range_mm must be (lo, hi) with lo <= hi")
        if self.focal_px is not None and self.focal_px <= 0:
            raise InvalidSpec("focal_px must be positive")


def _look_at_rotation(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    z_cam = target - position
    norm = np.linalg.norm(z_cam)
    if norm < 1e-9:
        raise InvalidSpec("camera position coincides with look_at target")
    z_cam = z_cam / norm
    x_cam = np.cross(z_cam, WORLD_UP)
    x_norm = np.linalg.norm(x_cam)
    if x_norm < 1e-9:
        raise InvalidSpec("camera looks straight along the world up axis")
    x_cam = x_cam / x_norm
    y_cam = np.cross(z_cam, x_cam)
    R = np.stack([x_cam, y_cam, z_cam])
    # Orthonormalize once to kill accumulated rounding; keeps the strict invariant.
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def _camera_positions(spec: ArrangementSpec) -> np.ndarray:
    start, end = spec.azimuth_coverage_deg
    span = end - start
    n = spec.camera_count
    if span >= 360.0 - 1e-12:
        azimuths = start + span * np.arange(n) / n
    else:
        azimuths = start + span * np.arange(n) / (n - 1)
    rng = np.random.default_rng(spec.seed)
    heights = rng.uniform(spec.height_range_mm[0], spec.height_range_mm[1], size=n)
    theta = np.deg2rad(azimuths)
    cx, cy, _ = spec.look_at
    return np.stack([
        cx + spec.radius_mm * np.cos(theta),
        cy + spec.radius_mm * np.sin(theta),
        heights,
    ], axis=1)


def _covering_focal(positions: np.ndarray, spec: ArrangementSpec) -> float:
    """Widest shared focal length keeping the capture box inside every image."""
    hw = spec.capture_halfwidth_mm if spec.capture_halfwidth_mm is not None else 0.6 * spec.radius_mm
    corners = np.array([
        [sx * hw + spec.look_at[0], sy * hw + spec.look_at[1], z]
        for sx in (-1, 1) for sy in (-1, 1) for z in (0.0, 2200.0)
    ])
    w, h = spec.image_size
    cx_lim, cy_lim = (w - 1) / 2.0, (h - 1) / 2.0
    target = np.asarray(spec.look_at, dtype=float)
    f_max = math.inf
    for pos in positions:
        R = _look_at_rotation(pos, target)
        local = (corners - pos) @ R.T
        if np.any(local[:, 2] <= 0):
            raise InvalidSpec("capture box extends behind a rig camera; shrink it or widen the ring")
        ratios_x = np.abs(local[:, 0] / local[:, 2])
        ratios_y = np.abs(local[:, 1] / local[:, 2])
        f_max = min(f_max, cx_lim / max(ratios_x.max(), 1e-9), cy_lim / max(ratios_y.max(), 1e-9))
    return 0.95 * f_max


def make_arrangement(spec: ArrangementSpec) -> list[CameraModel]:
    """Build a deterministic ring-sector rig; all cameras aimed at look_at."""
    positions = _camera_positions(spec)
    f = spec.focal_px if spec.focal_px is not None else _covering_focal(positions, spec)
    w, h = spec.image_size
    K = np.array([
        [f, 0.0, (w - 1) / 2.0],
        [0.0, f, (h - 1) / 2.0],
        [0.0, 0.0, 1.0],
    ])
    target = np.asarray(spec.look_at, dtype=float)
    cams = []
    for i, pos in enumerate(positions):
        R = _look_at_rotation(pos, target)
        t = -R @ pos
        cams.append(CameraModel(id=i, intrinsics=K, rotation=R, translation=t, image_size=(w, h)))
    return cams


def extend_arrangement(cams: list[CameraModel], spec: ArrangementSpec, extra: int, seed: int) -> list[CameraModel]:
    """Add `extra` cameras to an existing rig, filling the largest azimuth gaps.

    New cameras reuse the rig's intrinsics and image size; heights are drawn
    from the spec's range under `seed`. Existing cameras are unchanged.
    """
    if extra < 1:
        return list(cams)
    centers = np.array([c.center for c in cams])
    target = np.asarray(spec.look_at, dtype=float)
    azimuths = sorted(
        math.atan2(c[1] - target[1], c[0] - target[0]) for c in centers
    )
    rng = np.random.default_rng(seed)
    new_cams = list(cams)
    next_id = max(c.id for c in cams) + 1
    for _ in range(extra):
        gaps = []
        for i, a in enumerate(azimuths):
            b = azimuths[(i + 1) % len(azimuths)]
            width = (b - a) % (2 * math.pi)
            if width == 0.0:
                width = 2 * math.pi
            gaps.append((width, a))
        width, a = max(gaps)
        mid = a + width / 2.0
        azimuths = sorted(azimuths + [((mid + math.pi) % (2 * math.pi)) - math.pi])
        height = rng.uniform(spec.height_range_mm[0], spec.height_range_mm[1])
        pos = np.array([
            target[0] + spec.radius_mm * math.cos(mid),
            target[1] + spec.radius_mm * math.sin(mid),
            height,
        ])
        R = _look_at_rotation(pos, target)
        t = -R @ pos
        new_cams.append(CameraModel(
            id=next_id, intrinsics=cams[0].intrinsics, rotation=R, translation=t,
            image_size=cams[0].image_size,
        ))
        next_id += 1
    return new_cams


# Calibration file layout (structured text, JSON): field order is fixed for
# byte-stable output:
#   { "units": "mm/px", "cameras": [ { "id", "K", "R", "t", "width", "height" } ] }

def save_calibration(cams: Sequence[CameraModel], path) -> None:
    doc = {
        "units": "mm/px",
        "cameras": [
            {
                "id": int(c.id),
                "K": c.intrinsics.tolist(),
                "R": c.rotation.tolist(),
                "t": c.translation.tolist(),
                "width": int(c.image_size[0]),
                "height": int(c.image_size[1]),
            }
            for c in cams
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_calibration(path) -> list[CameraModel]:
    """Read a calibration document; raises ParseError / InvariantError.

    Rotations must be orthonormal within 1e-6; no re-orthonormalization is
    applied (a bad file should fail loudly, not be silently repaired).
    """
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or "cameras" not in doc:
        raise ParseError(f"{path}: missing top-level 'cameras' field")
    cams = []
    for i, entry in enumerate(doc["cameras"]):
        where = f"cameras[{i}]"
        for key in ("id", "K", "R", "t", "width", "height"):
            if key not in entry:
                raise ParseError(f"{where}: missing field '{key}'")
        K = _as_matrix(entry["K"], 3, 3, f"{where}.K")
        R = _as_matrix(entry["R"], 3, 3, f"{where}.R")
        t = np.asarray(entry["t"], dtype=float)
        if t.shape != (3,):
            raise ParseError(f"{where}.t: expected 3-vector, got shape {t.shape}")
        ortho = np.max(np.abs(R.T @ R - np.eye(3)))
        if ortho >= ROTATION_TOL_LOADED:
            raise InvariantError(
                f"{where}.R: rotation not orthonormal within 1e-6 (max dev {ortho:.3e})"
            )
        # No automatic re-orthonormalization: a drifted rotation is the
        # caller's problem. JSON floats round-trip exactly, so files we wrote
        # satisfy the strict constructor tolerance as-is.
        cams.append(CameraModel(
            id=int(entry["id"]), intrinsics=K, rotation=R, translation=t,
            image_size=(int(entry["width"]), int(entry["height"])),
        ))
    return cams
