"""Why spawning multi-instance objects needs a third camera.

Two cups stand on the table. Every camera back-projects each cup
detection into a ray, and new objects are born where rays from
different cameras cross. With two same-class cups in view, rays
belonging to DIFFERENT cups also cross somewhere; those ghost
crossings look exactly like objects to a pair of cameras. A third
viewpoint settles it: real cups collect three supporting rays, ghosts
stay stuck at two.

Run from the repository root:

    python3 demos/spawn_ghosts.py
"""

import numpy as np

from tritrack import Ray, default_scene
from tritrack.scene import MULTIPLE
from tritrack.spawn import (
    RayObservation,
    apply_support_rule,
    find_intersections,
    spawn_candidates,
)

np.set_printoptions(precision=3, suppress=True)

CUPS = (np.array([0.9, -0.5, 0.8]), np.array([1.1, -1.1, 0.8]))

# Cameras at cup height so rays genuinely intersect instead of passing
# over each other; the layout mirrors how ghost crossings happen on a
# real table, just in a cleaner plane.
CAMERAS = {
    "side": np.array([3.75, -0.5, 0.8]),
    "corner": np.array([3.3, 0.1, 0.8]),
    "far": np.array([-1.1, -1.3, 0.8]),
}


def sightline(camera_id, origin, target):
    direction = target - origin
    return RayObservation(
        camera_id=camera_id,
        ray=Ray(origin=origin, direction=direction / np.linalg.norm(direction)))


scene = default_scene()
tuning = scene.tuning

rays = [sightline(camera_id, origin, cup)
        for camera_id, origin in CAMERAS.items() for cup in CUPS]
print(f"{len(rays)} rays: {len(CAMERAS)} cameras x {len(CUPS)} cups\n")

candidates = find_intersections({"cup-coffee": rays}, tuning)
print("ray crossings found:")
for candidate in candidates:
    kind = "real cup" if min(
        np.linalg.norm(candidate.position_array - cup)
        for cup in CUPS) < 1e-6 else "ghost"
    print(f"  {candidate.position_array}  "
          f"support {candidate.camera_support} cameras  ({kind})")

kept = [c for c in candidates if apply_support_rule(c, MULTIPLE)]
relaxed = [c for c in candidates
           if apply_support_rule(c, MULTIPLE,
                                 enforce_multi_camera_rule=False)]
print(f"\nwith the 3-camera rule: {len(kept)} spawns "
      f"(the {len(relaxed) - len(kept)} ghost dies for lack of support)")
print(f"without it: {len(relaxed)} spawns, one of them no cup at all")

# The full spawner also suppresses crossings near already-tracked
# objects, so a tracked cup does not keep re-spawning from its own
# leftover detections.
tracked = [("cup-coffee", CUPS[0])]
spawns = spawn_candidates({"cup-coffee": rays}, tracked, frame=1, scene=scene)
print(f"\nwith cup one already tracked, only {len(spawns)} candidate "
      f"spawns: {spawns[0].position_array}")
