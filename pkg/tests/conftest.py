import numpy as np
import pytest

from tritrack.camera import CameraIntrinsics, CameraPose


@pytest.fixture
def intr() -> CameraIntrinsics:
    """720p webcam-like intrinsics with mild barrel terms."""
    return CameraIntrinsics(
        focal_length=900.0,
        k1=0.1,
        k2=0.01,
        principal_point=(640.0, 360.0),
        image_size=(1280, 720),
    )


@pytest.fixture
def intr_ideal() -> CameraIntrinsics:
    """Distortion-free pinhole, same focal length and frame."""
    return CameraIntrinsics(
        focal_length=900.0,
        k1=0.0,
        k2=0.0,
        principal_point=(640.0, 360.0),
        image_size=(1280, 720),
    )


def random_pose(rng: np.random.Generator) -> CameraPose:
    x, y, z = rng.uniform(-3, 3, 2).tolist() + [rng.uniform(1.5, 5)]
    pan, tilt, roll = rng.uniform(-np.pi, np.pi, 3)
    # keep clear of the straight-up/down singularities for derivative tests
    tilt = float(np.clip(tilt, -1.4, 1.4))
    return CameraPose(x=float(x), y=float(y), z=float(z),
                      pan=float(pan), tilt=float(tilt), roll=float(roll))


def points_in_front(
    rng: np.random.Generator, pose: CameraPose, n: int,
    depth_range: tuple[float, float] = (0.5, 10.0),
) -> np.ndarray:
    """World points with camera-frame depth inside ``depth_range`` and
    moderate off-axis angle (inside a realistic frustum)."""
    from tritrack.camera import rotation_world_from_camera

    rot = rotation_world_from_camera(pose.pan, pose.tilt, pose.roll)
    depth = rng.uniform(*depth_range, n)
    lateral = rng.uniform(-0.45, 0.45, (n, 2)) * depth[:, None]
    cam = np.column_stack([lateral, depth])
    return pose.position + cam @ rot.T


def perturbed_rig(scene, rng: np.random.Generator) -> dict[str, CameraPose]:
    """Ground-truth camera poses: the scene's guesses, knocked about a bit.

    Positions and pan/roll move by up to 5 cm / 0.05 rad. Cameras whose
    guess points straight down are tilted 0.08..0.15 rad off the vertical,
    so every Euler angle of the truth is individually well-defined.
    """
    truth = {}
    for name, pose in scene.camera_poses.items():
        dx, dy, dz = rng.uniform(-0.05, 0.05, 3)
        dpan, droll = rng.uniform(-0.05, 0.05, 2)
        if abs(pose.tilt + np.pi / 2) < 1e-9:
            tilt = -np.pi / 2 + rng.uniform(0.08, 0.15)
        else:
            tilt = pose.tilt + rng.uniform(-0.05, 0.05)
        truth[name] = CameraPose(pose.x + dx, pose.y + dy, pose.z + dz,
                                 pose.pan + dpan, float(tilt),
                                 pose.roll + droll)
    return truth


def random_table_offsets(scene, rng: np.random.Generator,
                         scale: float = 0.06) -> dict[str, tuple[float, float]]:
    return {name: (float(rng.uniform(-scale, scale)),
                   float(rng.uniform(-scale, scale)))
            for name in scene.tables}


def synthetic_annotations(scene, truth_poses, table_offsets,
                          noise_px: float = 0.0,
                          rng: np.random.Generator | None = None):
    """Project every visible landmark into every camera.

    The independent counterpart of the simulator's annotation renderer,
    rebuilt here from the camera primitives so calibration tests do not
    depend on the module they help verify.
    """
    from tritrack.camera import is_visible, project
    from tritrack.formats import AnnotationSet

    landmarks = scene.landmark_positions(table_offsets)
    cameras = {}
    for cam, pose in truth_poses.items():
        intrinsics = scene.camera_intrinsics[cam]
        entry = {}
        for name, point in landmarks.items():
            if is_visible(point, pose, intrinsics):
                pixel = project(point, pose, intrinsics)
                if noise_px:
                    pixel = pixel + rng.normal(0.0, noise_px, 2)
                entry[name] = ((float(pixel[0]), float(pixel[1])),)
        if entry:
            cameras[cam] = entry
    return AnnotationSet(cameras=cameras)


def pose_errors(solved: dict[str, CameraPose],
                truth: dict[str, CameraPose]) -> tuple[float, float]:
    """Worst position error (m) and worst angle error (rad) across cameras."""
    pos = max(
        float(np.linalg.norm(solved[c].position - truth[c].position))
        for c in truth)
    ang = max(
        float(np.abs(solved[c].angles - truth[c].angles).max())
        for c in truth)
    return pos, ang
