"""Walk through the camera model: world point -> pixel and back.

Run from the repository root:

    python3 demos/camera_geometry.py
"""

import numpy as np

from tritrack import (
    CameraIntrinsics,
    CameraPose,
    is_visible,
    project,
    projection_jacobians,
    unproject,
)

np.set_printoptions(precision=4, suppress=True)

# A 720p camera with mild barrel distortion, mounted 2 m up and looking
# down at the table at an angle. tilt = 0 is horizontal, -pi/2 straight
# down.
intr = CameraIntrinsics(focal_length=900.0, k1=0.1, k2=0.01)
pose = CameraPose(x=2.2, y=-0.6, z=2.0, pan=-1.35, tilt=-0.55, roll=0.0)

table_point = np.array([0.9, -0.5, 0.85])
pixel = project(table_point, pose, intr)
print(f"world {table_point} -> pixel {pixel}")

# The same point through an undistorted copy of the lens shows how much
# the radial terms displace the image near this part of the frame.
flat = CameraIntrinsics(focal_length=900.0, k1=0.0, k2=0.0)
print(f"without distortion it would land at {project(table_point, pose, flat)}"
      f" (shift {np.linalg.norm(pixel - project(table_point, pose, flat)):.2f} px)")

# Back-projection inverts the distortion numerically and returns a ray:
# origin at the camera, unit direction into the scene. The original
# point must sit on that ray.
ray = unproject(pixel, pose, intr)
along = ray.direction @ (table_point - ray.origin)
closest = ray.origin + along * ray.direction
print(f"unproject -> origin {ray.origin}, direction {ray.direction}")
print(f"round-trip miss: {np.linalg.norm(table_point - closest):.2e} m")

# Projection derivatives drive both the calibration solver and the
# tracker's measurement updates. Check one of them the dumb way.
d_point, d_pose = projection_jacobians(table_point, pose, intr)
step = 1e-6
nudged = table_point + np.array([step, 0.0, 0.0])
fd = (project(nudged, pose, intr) - project(table_point, pose, intr)) / step
print(f"d(pixel)/d(x): analytic {d_point[:, 0]}, finite difference {fd}")
print(f"d(pixel)/d(pan): {d_pose[:, 3]}")

# Visibility combines the in-front test with the image bounds. Three
# cases: a corner in frame, a corner outside the frame, and a point
# directly above the camera (behind the image plane entirely).
overhead = pose.position + np.array([0.0, 0.0, 1.0])
probes = np.array([[0.6, -0.1, 0.75], [1.4, -1.5, 0.75], overhead])
print(f"visibility (in frame, out of frame, overhead): "
      f"{is_visible(probes, pose, intr)}")
