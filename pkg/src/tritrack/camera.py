"""Pinhole camera with radial distortion: project, unproject, and derivatives.

COORDINATE CONVENTIONS
----------------------
World frame: right-handed, Z up, X/Y horizontal (meters).

Camera frame (OpenCV-style): x right, y down, z forward along the optical
axis. Pixel coordinates: u right, v down, origin at the image's top-left.

A camera pose is (x, y, z, pan, tilt, roll). The rotation taking
camera-frame vectors to world-frame vectors is

    R_wc = Rz(-pan) @ Rx(tilt - pi/2) @ Rz(roll)

with Rz/Rx the usual right-handed rotations about world Z and X. Reading
the angles like a pan/tilt head:

  * pan is a compass bearing: at pan 0 the camera looks along world +Y,
    positive pan turns the view toward +X (clockwise seen from above);
  * tilt is elevation: 0 is horizontal, -pi/2 looks straight down;
  * roll turns the image about the viewing axis.

The viewing direction is therefore
(cos(tilt)*sin(pan), cos(tilt)*cos(pan), sin(tilt)). At tilt = -pi/2 the
pan and roll axes coincide and only pan + roll is determined (classic
gimbal lock); callers comparing straight-down poses should compare
rotation matrices, not raw angles.

PROJECTION MODEL
----------------
With camera-frame point (X, Y, Z), Z > 0:

    x_n = X / Z,  y_n = Y / Z
    r^2 = x_n^2 + y_n^2
    rho = 1 + k1 * r^2 + k2 * r^4
    u = u0 + f * x_n * rho
    v = v0 + f * y_n * rho

A single focal length f is used (square pixels). Distortion is purely
radial; there is no tangential term.

``PixelPoint`` is a plain float ndarray of shape (2,) — (u, v). Pixels may
fall outside the image; callers decide whether that matters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Depth below which a point counts as being on/behind the camera plane.
BEHIND_CAMERA_EPS = 1e-6

# Distortion inversion: damped fixed point, pixel-space tolerance.
_INVERT_TOL_PX = 1e-10
_INVERT_MAX_ITER = 50

PixelPoint = np.ndarray

_SKEW_Z = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
_SKEW_X = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


class BehindCameraError(ValueError):
    """A point to be projected lies on or behind the camera plane."""


class DistortionInversionError(RuntimeError):
    """Iterative undistortion failed to converge."""

    def __init__(self, message: str, iterations: int):
        super().__init__(message)
        self.iterations = iterations


@dataclass(frozen=True)
class CameraIntrinsics:
    """Shared lens parameters: focal length (pixels), radial k1/k2,
    principal point (u0, v0) and image size (width, height) in pixels."""

    focal_length: float
    k1: float
    k2: float
    principal_point: tuple[float, float] = (640.0, 360.0)
    image_size: tuple[int, int] = (1280, 720)

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ValueError(f"focal_length must be positive, got {self.focal_length}")
        u0, v0 = self.principal_point
        w, h = self.image_size
        if not (0 <= u0 <= w and 0 <= v0 <= h):
            raise ValueError(
                f"principal_point {self.principal_point} outside image {self.image_size}"
            )


@dataclass(frozen=True)
class CameraPose:
    """Camera position (meters, world frame) and orientation (radians)."""

    x: float
    y: float
    z: float
    pan: float
    tilt: float
    roll: float

    def __post_init__(self):
        values = (self.x, self.y, self.z, self.pan, self.tilt, self.roll)
        if not all(np.isfinite(values)):
            raise ValueError(f"pose values must be finite, got {values}")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.pan, self.tilt, self.roll])


@dataclass(frozen=True)
class Ray:
    """Half-line from ``origin`` along unit vector ``direction`` (world frame)."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=float))
        norm = np.linalg.norm(self.direction)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, |d| = {norm!r}")

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction

    def distance_to_point(self, point: np.ndarray) -> float:
        """Distance from a world point to the half-line (clamped at the origin)."""
        t = max(0.0, float(np.dot(point - self.origin, self.direction)))
        return float(np.linalg.norm(point - self.point_at(t)))


def _rz(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rx(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_world_from_camera(pan: float, tilt: float, roll: float) -> np.ndarray:
    """Rotation matrix whose columns are the camera axes expressed in world
    coordinates: R_wc = Rz(-pan) @ Rx(tilt - pi/2) @ Rz(roll)."""
    return _rz(-pan) @ _rx(tilt - np.pi / 2) @ _rz(roll)


def rotation_and_angle_derivatives(
    pan: float, tilt: float, roll: float
) -> tuple[np.ndarray, np.ndarray]:
    """R_wc plus its partial derivatives, stacked as (3, 3, 3) indexed by
    (pan, tilt, roll)."""
    a = _rz(-pan)
    b = _rx(tilt - np.pi / 2)
    c = _rz(roll)
    rot = a @ b @ c
    d_pan = -_SKEW_Z @ rot
    d_tilt = a @ _SKEW_X @ b @ c
    d_roll = a @ b @ _SKEW_Z @ c
    return rot, np.stack([d_pan, d_tilt, d_roll])


def camera_frame_coordinates(points: np.ndarray, pose: CameraPose) -> np.ndarray:
    """World points (..., 3) -> camera-frame coordinates (..., 3)."""
    rot = rotation_world_from_camera(pose.pan, pose.tilt, pose.roll)
    return (np.asarray(points, dtype=float) - pose.position) @ rot


def _distort_normalized(xn: np.ndarray, yn: np.ndarray, intr: CameraIntrinsics):
    r2 = xn * xn + yn * yn
    rho = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    return xn * rho, yn * rho


def project(points: np.ndarray, pose: CameraPose, intr: CameraIntrinsics) -> PixelPoint:
    """Project world points to pixel coordinates.

    ``points`` may be a single (3,) point or a batch (N, 3); the result has
    matching shape (2,) or (N, 2). Raises ``BehindCameraError`` if any point
    has camera-frame depth <= BEHIND_CAMERA_EPS.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    cam = camera_frame_coordinates(np.atleast_2d(pts), pose)
    z = cam[:, 2]
    if np.any(z <= BEHIND_CAMERA_EPS):
        bad = int(np.sum(z <= BEHIND_CAMERA_EPS))
        raise BehindCameraError(
            f"{bad} of {len(z)} point(s) at or behind the camera plane "
            f"(min depth {z.min():.3g} m)"
        )
    xn = cam[:, 0] / z
    yn = cam[:, 1] / z
    xd, yd = _distort_normalized(xn, yn, intr)
    u0, v0 = intr.principal_point
    f = intr.focal_length
    pix = np.stack([u0 + f * xd, v0 + f * yd], axis=1)
    return pix[0] if single else pix


def _undistort_normalized(
    xd: float, yd: float, intr: CameraIntrinsics
) -> tuple[float, float, int]:
    """Invert the radial distortion by damped fixed-point iteration.

    Returns the undistorted normalized coordinates together with the number
    of iterations spent.
    """
    f = intr.focal_length
    xn, yn = xd, yd
    damping = 1.0
    prev_err = np.inf
    for iteration in range(1, _INVERT_MAX_ITER + 1):
        cx, cy = _distort_normalized(np.float64(xn), np.float64(yn), intr)
        err = f * max(abs(cx - xd), abs(cy - yd))
        if err < _INVERT_TOL_PX:
            return float(xn), float(yn), iteration
        if err > prev_err:
            damping *= 0.5  # overshoot: damp the update and retry from here
        prev_err = err
        r2 = xn * xn + yn * yn
        rho = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
        xn = xn + damping * (xd / rho - xn)
        yn = yn + damping * (yd / rho - yn)
    raise DistortionInversionError(
        f"undistortion did not converge below {_INVERT_TOL_PX} px in "
        f"{_INVERT_MAX_ITER} iterations (k1={intr.k1}, k2={intr.k2})",
        iterations=_INVERT_MAX_ITER,
    )


def unproject(pixel: np.ndarray, pose: CameraPose, intr: CameraIntrinsics) -> Ray:
    """Back-project a pixel to the world-frame ray it observes.

    The ray starts at the camera position; projecting origin + t*direction
    for any t > 0 recovers ``pixel``.
    """
    pix = np.asarray(pixel, dtype=float)
    if pix.shape != (2,) or not np.all(np.isfinite(pix)):
        raise ValueError(f"pixel must be a finite (2,) point, got {pixel!r}")
    u0, v0 = intr.principal_point
    f = intr.focal_length
    xd = (pix[0] - u0) / f
    yd = (pix[1] - v0) / f
    xn, yn, _ = _undistort_normalized(xd, yd, intr)
    rot = rotation_world_from_camera(pose.pan, pose.tilt, pose.roll)
    direction = rot @ np.array([xn, yn, 1.0])
    direction /= np.linalg.norm(direction)
    return Ray(origin=pose.position, direction=direction)


def projection_jacobians(
    points: np.ndarray, pose: CameraPose, intr: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of the projected pixel w.r.t. the world point and the pose.

    For a single (3,) point returns (d_pixel/d_point, d_pixel/d_pose) with
    shapes (2, 3) and (2, 6); for a batch (N, 3) the shapes gain a leading N.
    Pose columns are ordered (x, y, z, pan, tilt, roll). Raises
    ``BehindCameraError`` for points not strictly in front of the camera.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    rot, drot = rotation_and_angle_derivatives(pose.pan, pose.tilt, pose.roll)
    offset = pts - pose.position  # (N, 3)
    cam = offset @ rot
    z = cam[:, 2]
    if np.any(z <= BEHIND_CAMERA_EPS):
        bad = int(np.sum(z <= BEHIND_CAMERA_EPS))
        raise BehindCameraError(
            f"{bad} of {len(z)} point(s) at or behind the camera plane"
        )
    xn = cam[:, 0] / z
    yn = cam[:, 1] / z
    r2 = xn * xn + yn * yn
    rho = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    # d(rho)/d(r2), times 2 for the chain through x_n^2 + y_n^2
    drho = intr.k1 + 2.0 * intr.k2 * r2
    f = intr.focal_length

    # d(pixel)/d(normalized), shape (N, 2, 2)
    duu = f * (rho + 2.0 * xn * xn * drho)
    duv = f * 2.0 * xn * yn * drho
    dvv = f * (rho + 2.0 * yn * yn * drho)
    d_pix_d_norm = np.empty((len(z), 2, 2))
    d_pix_d_norm[:, 0, 0] = duu
    d_pix_d_norm[:, 0, 1] = duv
    d_pix_d_norm[:, 1, 0] = duv
    d_pix_d_norm[:, 1, 1] = dvv

    # d(normalized)/d(camera frame), shape (N, 2, 3)
    inv_z = 1.0 / z
    d_norm_d_cam = np.zeros((len(z), 2, 3))
    d_norm_d_cam[:, 0, 0] = inv_z
    d_norm_d_cam[:, 0, 2] = -xn * inv_z
    d_norm_d_cam[:, 1, 1] = inv_z
    d_norm_d_cam[:, 1, 2] = -yn * inv_z

    d_pix_d_cam = d_pix_d_norm @ d_norm_d_cam  # (N, 2, 3)

    # Camera frame is rot.T @ (p - position): d(cam)/d(point) = rot.T,
    # d(cam)/d(position) = -rot.T, d(cam)/d(angle_i) = drot_i.T @ (p - position).
    d_point = d_pix_d_cam @ rot.T  # (N, 2, 3)
    d_pose = np.empty((len(z), 2, 6))
    d_pose[:, :, :3] = -d_point
    d_cam_d_angles = np.einsum("ajk,nj->nka", drot, offset)  # (N, 3cam, 3angles)
    d_pose[:, :, 3:] = d_pix_d_cam @ d_cam_d_angles
    if single:
        return d_point[0], d_pose[0]
    return d_point, d_pose


def is_visible(
    points: np.ndarray, pose: CameraPose, intr: CameraIntrinsics
) -> np.ndarray:
    """Boolean mask: in front of the camera and projecting inside the image."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cam = camera_frame_coordinates(pts, pose)
    z = cam[:, 2]
    mask = z > BEHIND_CAMERA_EPS
    if np.any(mask):
        safe_z = np.where(mask, z, 1.0)
        xn = cam[:, 0] / safe_z
        yn = cam[:, 1] / safe_z
        xd, yd = _distort_normalized(xn, yn, intr)
        u0, v0 = intr.principal_point
        f = intr.focal_length
        u = u0 + f * xd
        v = v0 + f * yd
        w, h = intr.image_size
        mask = mask & (u >= 0) & (u <= w) & (v >= 0) & (v <= h)
    return mask
