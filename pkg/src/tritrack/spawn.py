"""Detect new objects in 3D by intersecting same-class detection rays.

Each unassociated detection back-projects to a half-line in space. Where
two rays of the same class from different cameras pass within a small
distance of each other, and do so in front of both cameras, they mark a
possible object. The pairwise closest-approach midpoints are clustered
(an object seen by k cameras yields all its pair midpoints in one tight
clump), each cluster's position is refined by a closed-form least-squares
solve over its supporting rays, and the camera-support rule is applied:
a class that exists once in the scene needs two cameras, a class with
several instances needs three, and near-parallel rays collapse into one
effective camera because they cannot fix the along-ray coordinate.

Midpoints are clustered rather than rays: with several same-class
objects, one ray supports its object's crossing and possibly a "ghost"
crossing with another object's ray, so grouping rays transitively would
fuse every object into a single blob.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tritrack.camera import Ray
from tritrack.formats import Detection
from tritrack.scene import MULTIPLE, SceneConfig, Tuning

_PARALLEL_EPS = 1e-12
_MIN_T = 1e-9


@dataclass(frozen=True)
class RayObservation:
    """A detection back-projected into the world."""

    camera_id: str
    ray: Ray
    detection: Detection | None = None


@dataclass(frozen=True)
class IntersectionCandidate:
    """A possible new object: a point supported by several rays."""

    position: tuple[float, float, float]
    class_name: str
    rays: tuple[RayObservation, ...]
    camera_support: int

    @property
    def position_array(self) -> np.ndarray:
        return np.array(self.position)


def ray_pair_crossing(a: Ray, b: Ray) -> tuple[float, np.ndarray] | None:
    """Closest approach of two half-lines, if it is a genuine crossing.

    Returns (distance, midpoint) when the closest approach lies strictly
    in front of both ray origins; None for parallel rays or when the
    closest approach falls behind either camera.
    """
    d1, d2 = a.direction, b.direction
    dot = float(d1 @ d2)
    denom = 1.0 - dot * dot
    if denom < _PARALLEL_EPS:
        return None
    w = a.origin - b.origin
    s1 = float(d1 @ w)
    s2 = float(d2 @ w)
    t1 = (dot * s2 - s1) / denom
    t2 = (s2 - dot * s1) / denom
    if t1 <= _MIN_T or t2 <= _MIN_T:
        return None
    p1 = a.point_at(t1)
    p2 = b.point_at(t2)
    return float(np.linalg.norm(p1 - p2)), (p1 + p2) / 2.0


def least_squares_point(rays: list[RayObservation] | tuple[RayObservation, ...]) -> np.ndarray:
    """Point minimizing the summed squared distance to the rays' lines.

    Solves sum_i (I - d_i d_i^T) (p - o_i) = 0. Near-degenerate bundles
    (all rays almost parallel) fall back to a pseudo-inverse solve.
    """
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for obs in rays:
        d = obs.ray.direction
        m = np.eye(3) - np.outer(d, d)
        a += m
        b += m @ obs.ray.origin
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(a, b, rcond=None)[0]


def effective_support(rays, parallel_max_angle: float) -> int:
    """Distinct cameras, with near-parallel cross-camera pairs merged.

    Cameras are joined when any ray of one is within the angle threshold
    of any ray of the other; the support is the number of resulting
    groups, so a pair of nearly parallel rays counts as one.
    """
    cameras = sorted({obs.camera_id for obs in rays})
    cos_limit = float(np.cos(parallel_max_angle))
    parent = {c: c for c in cameras}

    def find(c):
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    for i, a in enumerate(rays):
        for b in rays[i + 1:]:
            if a.camera_id == b.camera_id:
                continue
            if abs(float(a.ray.direction @ b.ray.direction)) >= cos_limit:
                ra, rb = find(a.camera_id), find(b.camera_id)
                if ra != rb:
                    parent[ra] = rb
    return len({find(c) for c in cameras})


def _inside_box(point: np.ndarray, tuning: Tuning) -> bool:
    lo = np.asarray(tuning.workspace_min)
    hi = np.asarray(tuning.workspace_max)
    return bool(np.all(point >= lo) and np.all(point <= hi))


def _cluster_points(points: list[np.ndarray], radius: float) -> list[list[int]]:
    """Indices grouped by transitive proximity within radius."""
    n = len(points)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(points[i] - points[j]) <= radius:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[ri] = rj
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values())


def _trim_to_consistent(rays: list[RayObservation],
                        tuning: Tuning) -> tuple[list[RayObservation], np.ndarray] | None:
    """Least-squares position, dropping rays the solve cannot explain.

    Rays farther than the proximity threshold from the solved point are
    removed farthest-first, re-solving each time; gives up below 2 rays.
    """
    rays = list(rays)
    while len(rays) >= 2:
        point = least_squares_point(rays)
        distances = [obs.ray.distance_to_point(point) for obs in rays]
        worst = int(np.argmax(distances))
        if distances[worst] <= tuning.ray_proximity:
            return rays, point
        del rays[worst]
    return None


def find_intersections(
    rays_by_class: dict[str, list[RayObservation]], tuning: Tuning
) -> list[IntersectionCandidate]:
    """All sufficiently supported ray crossings, one candidate per spot.

    Candidates are deterministic in content and order (sorted by class,
    then position); no two same-class candidates lie within the merge
    radius of each other.
    """
    out: list[IntersectionCandidate] = []
    for class_name in sorted(rays_by_class):
        rays = rays_by_class[class_name]
        midpoints: list[np.ndarray] = []
        members: list[tuple[int, int]] = []
        for i in range(len(rays)):
            for j in range(i + 1, len(rays)):
                if rays[i].camera_id == rays[j].camera_id:
                    continue
                hit = ray_pair_crossing(rays[i].ray, rays[j].ray)
                if hit is None or hit[0] > tuning.ray_proximity:
                    continue
                midpoints.append(hit[1])
                members.append((i, j))

        groups = [
            sorted({k for idx in cluster for k in members[idx]})
            for cluster in _cluster_points(midpoints, tuning.spawn_merge_radius)
        ]

        # refine each group, then keep merging any two groups whose solved
        # positions still fall within the merge radius
        refined: list[tuple[list[int], list[RayObservation], np.ndarray]] = []
        for group in groups:
            trimmed = _trim_to_consistent([rays[k] for k in group], tuning)
            if trimmed is not None:
                refined.append((group, trimmed[0], trimmed[1]))
        merged = True
        while merged:
            merged = False
            for i in range(len(refined)):
                for j in range(i + 1, len(refined)):
                    if np.linalg.norm(refined[i][2] - refined[j][2]) \
                            <= tuning.spawn_merge_radius:
                        union = sorted(set(refined[i][0]) | set(refined[j][0]))
                        trimmed = _trim_to_consistent(
                            [rays[k] for k in union], tuning)
                        del refined[j], refined[i]
                        if trimmed is not None:
                            refined.append((union, trimmed[0], trimmed[1]))
                        merged = True
                        break
                if merged:
                    break

        for _, support_rays, point in refined:
            if not _inside_box(point, tuning):
                continue
            support = effective_support(support_rays, tuning.parallel_max_angle)
            if support < 2:
                continue
            out.append(IntersectionCandidate(
                position=tuple(float(v) for v in point),
                class_name=class_name,
                rays=tuple(support_rays),
                camera_support=support,
            ))
    out.sort(key=lambda c: (c.class_name, c.position))
    return out


def apply_support_rule(candidate: IntersectionCandidate, multiplicity: str,
                       enforce_multi_camera_rule: bool = True) -> bool:
    """Accept or reject a candidate by its effective camera support.

    Unique classes need 2 cameras; classes with several instances need 3,
    because a pair of rays can cross at a spot where no object is. The
    stricter requirement can be disabled for diagnostics.
    """
    needed = 3 if (multiplicity == MULTIPLE and enforce_multi_camera_rule) else 2
    return candidate.camera_support >= needed


def suppress_near_tracklets(
    candidates: list[IntersectionCandidate],
    active: list[tuple[str, np.ndarray]],
    frame: int,
    tuning: Tuning,
) -> list[IntersectionCandidate]:
    """Drop candidates close to an existing same-class tracklet.

    Once every relaxation period the radius shrinks drastically for one
    frame, so genuinely close same-class objects still get a chance to
    spawn eventually.
    """
    radius = tuning.suppression_radius
    if frame % tuning.relaxation_period == 0:
        radius *= tuning.suppression_relaxation
    kept = []
    for cand in candidates:
        point = cand.position_array
        close = any(
            name == cand.class_name
            and np.linalg.norm(np.asarray(pos) - point) <= radius
            for name, pos in active)
        if not close:
            kept.append(cand)
    return kept


@dataclass
class SpawnTally:
    """Where candidates of one spawn pass went, for telemetry."""

    intersections: int = 0
    rejected_support: int = 0
    suppressed: int = 0


def spawn_candidates(
    rays_by_class: dict[str, list[RayObservation]],
    active: list[tuple[str, np.ndarray]],
    frame: int,
    scene: SceneConfig,
    tally: SpawnTally | None = None,
) -> list[IntersectionCandidate]:
    """Full spawn pass: intersect, apply the support rule, suppress."""
    tuning = scene.tuning
    intersections = find_intersections(rays_by_class, tuning)
    candidates = [
        cand for cand in intersections
        if apply_support_rule(cand, scene.multiplicity[cand.class_name],
                              tuning.enforce_multi_camera_rule)
    ]
    kept = suppress_near_tracklets(candidates, active, frame, tuning)
    if tally is not None:
        tally.intersections += len(intersections)
        tally.rejected_support += len(intersections) - len(candidates)
        tally.suppressed += len(candidates) - len(kept)
    return kept
