"""Geometry core: projection, back-projection, and their derivatives.

The projection oracle is deliberately built from different machinery than
the library: scipy constructs the rotation from the documented ZXZ
decomposition and OpenCV's projectPoints evaluates the pinhole+radial
model. Jacobians are checked against central finite differences.
"""

import numpy as np
import pytest
import cv2
from scipy.spatial.transform import Rotation

from tritrack.camera import (
    BehindCameraError,
    CameraIntrinsics,
    CameraPose,
    DistortionInversionError,
    Ray,
    _undistort_normalized,
    camera_frame_coordinates,
    is_visible,
    project,
    projection_jacobians,
    rotation_world_from_camera,
    unproject,
)

from conftest import points_in_front, random_pose


def oracle_rotation(pose: CameraPose) -> np.ndarray:
    """Independent construction of the camera-to-world rotation."""
    return Rotation.from_euler(
        "ZXZ", [-pose.pan, pose.tilt - np.pi / 2, pose.roll]
    ).as_matrix()


def oracle_project(points, pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    """Reference projection via cv2.projectPoints."""
    rot = oracle_rotation(pose)
    rvec, _ = cv2.Rodrigues(rot.T)
    tvec = -rot.T @ pose.position
    u0, v0 = intr.principal_point
    k = np.array([[intr.focal_length, 0, u0], [0, intr.focal_length, v0], [0, 0, 1.0]])
    dist = np.array([intr.k1, intr.k2, 0.0, 0.0, 0.0])
    out, _ = cv2.projectPoints(
        np.asarray(points, float).reshape(-1, 1, 3), rvec, tvec.reshape(3, 1), k, dist
    )
    return out.reshape(-1, 2)


class TestRotationConvention:
    def test_orthonormal_determinant_one(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            pan, tilt, roll = rng.uniform(-2 * np.pi, 2 * np.pi, 3)
            rot = rotation_world_from_camera(pan, tilt, roll)
            np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-10)
            assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-10)

    def test_matches_scipy_decomposition(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            pose = random_pose(rng)
            np.testing.assert_allclose(
                rotation_world_from_camera(pose.pan, pose.tilt, pose.roll),
                oracle_rotation(pose),
                atol=1e-12,
            )

    def test_viewing_direction(self):
        # forward axis is (cosT sinP, cosT cosP, sinT)
        rot = rotation_world_from_camera(0.5, -0.3, 0.123)
        fwd = rot @ np.array([0.0, 0.0, 1.0])
        np.testing.assert_allclose(
            fwd,
            [np.cos(-0.3) * np.sin(0.5), np.cos(-0.3) * np.cos(0.5), np.sin(-0.3)],
            atol=1e-12,
        )

    def test_straight_down_depends_only_on_pan_plus_roll(self):
        # ceiling-style pose: at tilt -pi/2 only pan+roll matters
        a = rotation_world_from_camera(0.3, -np.pi / 2, 0.9)
        b = rotation_world_from_camera(1.0, -np.pi / 2, 0.2)
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestProject:
    def test_optical_axis_hits_principal_point(self, intr):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pose = random_pose(rng)
            rot = rotation_world_from_camera(pose.pan, pose.tilt, pose.roll)
            depth = rng.uniform(0.2, 8.0)
            point = pose.position + depth * rot[:, 2]
            np.testing.assert_allclose(
                project(point, pose, intr), intr.principal_point, atol=1e-9
            )

    def test_zero_distortion_is_plain_pinhole(self, intr_ideal):
        rng = np.random.default_rng(1)
        pose = random_pose(rng)
        pts = points_in_front(rng, pose, 50)
        cam = camera_frame_coordinates(pts, pose)
        u0, v0 = intr_ideal.principal_point
        f = intr_ideal.focal_length
        expected = np.stack(
            [u0 + f * cam[:, 0] / cam[:, 2], v0 + f * cam[:, 1] / cam[:, 2]], axis=1
        )
        np.testing.assert_allclose(project(pts, pose, intr_ideal), expected, atol=1e-9)

    def test_matches_independent_reference(self, intr):
        rng = np.random.default_rng(2)
        for _ in range(100):
            pose = random_pose(rng)
            jitter = CameraIntrinsics(
                focal_length=float(rng.uniform(500, 1200)),
                k1=float(rng.uniform(-0.2, 0.2)),
                k2=float(rng.uniform(-0.05, 0.05)),
                principal_point=intr.principal_point,
                image_size=intr.image_size,
            )
            pts = points_in_front(rng, pose, 1)
            mine = project(pts, pose, jitter)
            ref = oracle_project(pts, pose, jitter)
            assert np.abs(mine - ref).max() < 1e-6

    def test_radial_symmetry(self, intr):
        # equal radius from the optical axis -> equal pixel radius
        pose = CameraPose(x=0, y=0, z=1, pan=0.4, tilt=-0.2, roll=0.7)
        rot = rotation_world_from_camera(pose.pan, pose.tilt, pose.roll)
        depth, radius = 3.0, 0.8
        pix_radii = []
        for theta in np.linspace(0, 2 * np.pi, 13):
            cam = np.array(
                [radius * np.cos(theta), radius * np.sin(theta), depth]
            )
            pix = project(pose.position + rot @ cam, pose, intr)
            pix_radii.append(np.linalg.norm(pix - intr.principal_point))
        np.testing.assert_allclose(pix_radii, pix_radii[0], rtol=1e-9)

    def test_behind_camera_raises(self, intr):
        pose = CameraPose(x=0, y=0, z=1, pan=0.0, tilt=0.0, roll=0.0)
        # pan 0 looks along +Y: a point at lower y is behind
        with pytest.raises(BehindCameraError):
            project(np.array([0.0, -1.0, 1.0]), pose, intr)
        with pytest.raises(BehindCameraError):
            project(np.array([[0.0, 2.0, 1.0], [0.0, -1.0, 1.0]]), pose, intr)

    def test_batch_matches_single(self, intr):
        rng = np.random.default_rng(3)
        pose = random_pose(rng)
        pts = points_in_front(rng, pose, 10)
        batch = project(pts, pose, intr)
        for i, p in enumerate(pts):
            np.testing.assert_allclose(batch[i], project(p, pose, intr))


class TestUnproject:
    def test_round_trip_recovers_point(self, intr):
        rng = np.random.default_rng(4)
        for _ in range(50):
            pose = random_pose(rng)
            point = points_in_front(rng, pose, 1, depth_range=(0.5, 10.0))[0]
            ray = unproject(project(point, pose, intr), pose, intr)
            assert ray.distance_to_point(point) < 1e-6

    def test_principal_point_gives_optical_axis(self, intr):
        pose = CameraPose(x=1, y=-2, z=2, pan=0.9, tilt=-0.5, roll=0.1)
        ray = unproject(np.array(intr.principal_point), pose, intr)
        rot = rotation_world_from_camera(pose.pan, pose.tilt, pose.roll)
        np.testing.assert_allclose(ray.direction, rot[:, 2], atol=1e-10)
        np.testing.assert_allclose(ray.origin, pose.position)

    def test_inversion_converges_over_full_image(self, intr):
        # exhaustive-ish sweep: every 16th pixel across the frame
        pose = CameraPose(x=0, y=0, z=2, pan=0.0, tilt=-0.4, roll=0.0)
        w, h = intr.image_size
        for u in range(0, w + 1, 16):
            for v in range(0, h + 1, 16):
                ray = unproject(np.array([float(u), float(v)]), pose, intr)
                pix = project(ray.point_at(3.0), pose, intr)
                np.testing.assert_allclose(pix, [u, v], atol=1e-7)

    def test_inversion_iteration_budget(self, intr):
        # moderate barrel distortion settles quickly everywhere in the frame
        u0, v0 = intr.principal_point
        f = intr.focal_length
        w, h = intr.image_size
        worst = 0
        for u in range(0, w + 1, 64):
            for v in range(0, h + 1, 64):
                xd = (u - u0) / f
                yd = (v - v0) / f
                _, _, iters = _undistort_normalized(xd, yd, intr)
                worst = max(worst, iters)
        assert worst <= 20

    def test_pathological_distortion_raises_with_iteration_count(self):
        # with k1 = -0.5 the distorted radius folds over at ~0.54, so the
        # image corner (radius ~0.82) is outside the reachable range and the
        # fixed-point iteration cannot settle
        hostile = CameraIntrinsics(
            focal_length=900.0, k1=-0.5, k2=0.0,
            principal_point=(640.0, 360.0), image_size=(1280, 720),
        )
        pose = CameraPose(x=0, y=0, z=1, pan=0, tilt=0, roll=0)
        with pytest.raises(DistortionInversionError) as err:
            unproject(np.array([1280.0, 720.0]), pose, hostile)
        assert err.value.iterations == 50

    def test_rejects_non_finite_pixel(self, intr):
        pose = CameraPose(x=0, y=0, z=1, pan=0, tilt=0, roll=0)
        with pytest.raises(ValueError):
            unproject(np.array([np.nan, 10.0]), pose, intr)


class TestJacobians:
    @staticmethod
    def finite_difference(point, pose, intr, step=1e-6):
        d_point = np.zeros((2, 3))
        for j in range(3):
            delta = np.zeros(3)
            delta[j] = step
            d_point[:, j] = (
                project(point + delta, pose, intr) - project(point - delta, pose, intr)
            ) / (2 * step)
        d_pose = np.zeros((2, 6))
        fields = ["x", "y", "z", "pan", "tilt", "roll"]
        base = {f: getattr(pose, f) for f in fields}
        for j, name in enumerate(fields):
            hi = CameraPose(**{**base, name: base[name] + step})
            lo = CameraPose(**{**base, name: base[name] - step})
            d_pose[:, j] = (project(point, hi, intr) - project(point, lo, intr)) / (
                2 * step
            )
        return d_point, d_pose

    def test_matches_finite_differences(self, intr):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(100):
            pose = random_pose(rng)
            point = points_in_front(rng, pose, 1)[0]
            d_point, d_pose = projection_jacobians(point, pose, intr)
            fd_point, fd_pose = self.finite_difference(point, pose, intr)
            scale = max(1.0, np.abs(fd_point).max(), np.abs(fd_pose).max())
            worst = max(
                worst,
                np.abs(d_point - fd_point).max() / scale,
                np.abs(d_pose - fd_pose).max() / scale,
            )
        assert worst < 1e-4

    def test_axis_point_has_no_cross_terms(self, intr_ideal):
        # point on the optical axis, no distortion: du/d(cam y) == 0
        pose = CameraPose(x=0, y=0, z=1.5, pan=0.3, tilt=-0.3, roll=0.2)
        rot = rotation_world_from_camera(pose.pan, pose.tilt, pose.roll)
        point = pose.position + 4.0 * rot[:, 2]
        d_point, _ = projection_jacobians(point, pose, intr_ideal)
        in_cam = d_point @ rot  # chain back to camera-frame displacements
        assert abs(in_cam[0, 1]) < 1e-9  # u insensitive to camera-frame Y
        assert abs(in_cam[1, 0]) < 1e-9  # v insensitive to camera-frame X

    def test_translation_equivariance(self, intr):
        rng = np.random.default_rng(6)
        for _ in range(20):
            pose = random_pose(rng)
            point = points_in_front(rng, pose, 1)[0]
            d_point, d_pose = projection_jacobians(point, pose, intr)
            np.testing.assert_allclose(d_point, -d_pose[:, :3], atol=1e-12)

    def test_batch_matches_single(self, intr):
        rng = np.random.default_rng(9)
        pose = random_pose(rng)
        pts = points_in_front(rng, pose, 7)
        bp, bq = projection_jacobians(pts, pose, intr)
        for i, p in enumerate(pts):
            sp, sq = projection_jacobians(p, pose, intr)
            np.testing.assert_allclose(bp[i], sp)
            np.testing.assert_allclose(bq[i], sq)

    def test_behind_camera_raises(self, intr):
        pose = CameraPose(x=0, y=0, z=1, pan=0.0, tilt=0.0, roll=0.0)
        with pytest.raises(BehindCameraError):
            projection_jacobians(np.array([0.0, -2.0, 1.0]), pose, intr)


class TestTypes:
    def test_ray_requires_unit_direction(self):
        with pytest.raises(ValueError):
            Ray(origin=np.zeros(3), direction=np.array([1.0, 1.0, 0.0]))

    def test_ray_distance_clamps_behind_origin(self):
        ray = Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 1.0]))
        assert ray.distance_to_point(np.array([0.0, 0.0, -2.0])) == pytest.approx(2.0)
        assert ray.distance_to_point(np.array([1.0, 0.0, 5.0])) == pytest.approx(1.0)

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(focal_length=-1.0, k1=0, k2=0)
        with pytest.raises(ValueError):
            CameraIntrinsics(
                focal_length=900.0, k1=0, k2=0,
                principal_point=(2000.0, 360.0), image_size=(1280, 720),
            )

    def test_pose_rejects_non_finite(self):
        with pytest.raises(ValueError):
            CameraPose(x=0, y=0, z=np.inf, pan=0, tilt=0, roll=0)


class TestVisibility:
    def test_inside_and_outside(self, intr):
        pose = CameraPose(x=0, y=0, z=2, pan=0.0, tilt=0.0, roll=0.0)
        rot = rotation_world_from_camera(pose.pan, pose.tilt, pose.roll)
        on_axis = pose.position + 3.0 * rot[:, 2]
        behind = pose.position - 3.0 * rot[:, 2]
        far_off = pose.position + rot @ np.array([5.0, 0.0, 3.0])
        mask = is_visible(np.stack([on_axis, behind, far_off]), pose, intr)
        assert mask.tolist() == [True, False, False]
