"""Spawner tests: ray crossings, clustering, support rule, suppression.

The closed-form pair crossing is checked against a dense walk along one
ray; the full intersection pipeline is checked against an exhaustive
subset oracle (scipy-based) on small scenes.
"""

import itertools

import numpy as np
import pytest
from scipy.optimize import least_squares, minimize

from tritrack.camera import Ray
from tritrack.scene import MULTIPLE, Tuning, UNIQUE, default_scene, with_tuning
from tritrack.spawn import (
    IntersectionCandidate,
    RayObservation,
    apply_support_rule,
    effective_support,
    find_intersections,
    least_squares_point,
    ray_pair_crossing,
    spawn_candidates,
    suppress_near_tracklets,
)


def ray_through(origin, target, camera_id="cam", jitter=None, rng=None):
    direction = np.asarray(target, dtype=float) - np.asarray(origin, dtype=float)
    direction = direction / np.linalg.norm(direction)
    if jitter:
        direction = direction + rng.normal(0.0, jitter, 3)
        direction = direction / np.linalg.norm(direction)
    return RayObservation(
        camera_id=camera_id,
        ray=Ray(origin=np.asarray(origin, dtype=float), direction=direction))


def halfline_distance(point, origin, direction):
    t = max(0.0, float(direction @ (point - origin)))
    return float(np.linalg.norm(point - (origin + t * direction)))


TWO_CUP_POSITIONS = (np.array([0.9, -0.5, 0.8]), np.array([1.1, -1.1, 0.8]))
TWO_CUP_CAMERAS = {
    "side": np.array([3.75, -0.5, 0.8]),
    "corner": np.array([3.3, 0.1, 0.8]),
    "far": np.array([-1.1, -1.3, 0.8]),
}


def two_cup_rays():
    """Three cameras at cup height, each seeing both cups.

    The coplanar layout makes every cross-camera ray pair intersect
    exactly, so ghost crossings (rays of different cups) really occur.
    """
    observations = []
    for camera_id, position in TWO_CUP_CAMERAS.items():
        for cup in TWO_CUP_POSITIONS:
            observations.append(ray_through(position, cup, camera_id))
    return observations


class TestPairCrossing:

    def test_exact_crossing_recovered(self):
        point = np.array([0.4, -0.2, 0.9])
        a = ray_through([2.0, 1.0, 1.5], point)
        b = ray_through([-1.0, 2.0, 2.0], point)
        distance, midpoint = ray_pair_crossing(a.ray, b.ray)
        assert distance < 1e-12
        np.testing.assert_allclose(midpoint, point, atol=1e-9)

    def test_matches_walk_along_ray(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            point = rng.uniform([-1, -1, 0.3], [1.5, 1.5, 1.5])
            o1 = rng.uniform([-3, -3, 0.5], [3, 3, 3])
            o2 = rng.uniform([-3, -3, 0.5], [3, 3, 3])
            a = ray_through(o1, point, jitter=0.02, rng=rng)
            b = ray_through(o2, point, jitter=0.02, rng=rng)
            result = ray_pair_crossing(a.ray, b.ray)
            if result is None:
                continue
            distance, midpoint = result
            ts = np.arange(0.0, 8.0, 0.002)
            samples = a.ray.origin[None, :] + ts[:, None] * a.ray.direction
            best = min(
                halfline_distance(p, b.ray.origin, b.ray.direction)
                for p in samples)
            assert abs(distance - best) < 2e-3
            assert halfline_distance(
                midpoint, b.ray.origin, b.ray.direction) < distance / 2 + 2e-3

    def test_parallel_rays_have_no_crossing(self):
        d = np.array([0.0, 1.0, 0.0])
        a = Ray(origin=np.array([0.0, 0.0, 1.0]), direction=d)
        b = Ray(origin=np.array([0.05, -1.0, 1.0]), direction=d)
        assert ray_pair_crossing(a, b) is None

    def test_crossing_behind_either_origin_rejected(self):
        # lines cross at the point, but it is behind the first origin
        point = np.array([0.0, 0.0, 1.0])
        a = ray_through([1.0, 0.0, 1.0], [2.0, 0.5, 1.0])
        assert np.allclose(
            halfline_distance(point, a.ray.origin, a.ray.direction), 1.0)
        b = ray_through([0.0, -2.0, 1.0], point)
        assert ray_pair_crossing(a.ray, b.ray) is None


class TestLeastSquaresPoint:

    def test_matches_scipy_refinement(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            point = rng.uniform([-1, -1, 0.5], [1.5, 1.5, 1.2])
            rays = [
                ray_through(rng.uniform([-3, -3, 1], [3, 3, 3]), point,
                            jitter=0.01, rng=rng)
                for _ in range(rng.integers(3, 6))
            ]

            def residuals(p):
                return [
                    halfline_distance(np.asarray(p), obs.ray.origin,
                                      obs.ray.direction)
                    for obs in rays]

            solved = least_squares_point(rays)
            reference = least_squares(residuals, x0=point + 0.05,
                                      xtol=1e-14, ftol=1e-14, gtol=1e-14).x
            np.testing.assert_allclose(solved, reference, atol=1e-7)

    def test_exact_bundle(self):
        point = np.array([0.2, 0.3, 1.0])
        rays = [ray_through([2, 0, 2], point), ray_through([0, 2, 2], point),
                ray_through([-2, 1, 1], point)]
        np.testing.assert_allclose(least_squares_point(rays), point, atol=1e-12)


class TestEffectiveSupport:

    ANGLE = Tuning().parallel_max_angle

    def test_distinct_directions_count_cameras(self):
        point = np.array([0.0, 0.0, 1.0])
        rays = [ray_through([2, 0, 1], point, "a"),
                ray_through([0, 2, 1], point, "b"),
                ray_through([-2, 1, 2], point, "c")]
        assert effective_support(rays, self.ANGLE) == 3

    def test_antiparallel_rays_share_a_line(self):
        # facing cameras see the object along the same line, so the
        # along-axis coordinate is still free and support collapses
        point = np.array([0.0, 0.0, 1.0])
        rays = [ray_through([2, 0, 1], point, "a"),
                ray_through([-2, 0, 1], point, "c")]
        assert effective_support(rays, self.ANGLE) == 1

    def test_parallel_pair_counts_once(self):
        d = np.array([0.0, 0.0, -1.0])
        rays = [
            RayObservation("a", Ray(origin=np.array([0.0, 0.0, 3.0]), direction=d)),
            RayObservation("b", Ray(origin=np.array([0.01, 0.0, 3.0]), direction=d)),
            ray_through([2, 0, 1], [0, 0, 1], "c"),
        ]
        assert effective_support(rays, self.ANGLE) == 2

    def test_parallel_merge_is_transitive(self):
        base = np.array([0.0, 0.0, -1.0])

        def tilted(angle):
            d = np.array([np.sin(angle), 0.0, -np.cos(angle)])
            return d / np.linalg.norm(d)

        # a-b and b-c are each within the threshold; a-c is not
        step = 0.9 * self.ANGLE
        rays = [
            RayObservation("a", Ray(origin=np.zeros(3) + [0, 0, 3], direction=base)),
            RayObservation("b", Ray(origin=np.zeros(3) + [1, 0, 3], direction=tilted(step))),
            RayObservation("c", Ray(origin=np.zeros(3) + [2, 0, 3], direction=tilted(2 * step))),
        ]
        assert effective_support(rays, self.ANGLE) == 1

    def test_two_rays_same_camera_count_once(self):
        rays = [ray_through([2, 0, 1], [0, 0, 1], "a"),
                ray_through([2, 0, 1], [0.3, 0, 1], "a")]
        assert effective_support(rays, self.ANGLE) == 1


class TestFindIntersections:

    TUNING = Tuning()

    def test_exact_crossing_yields_single_candidate(self):
        point = np.array([0.5, -0.3, 0.9])
        rays = {"coffee": [ray_through([2, 1, 2], point, "a"),
                           ray_through([-1, 2, 2], point, "b")]}
        candidates = find_intersections(rays, self.TUNING)
        assert len(candidates) == 1
        np.testing.assert_allclose(candidates[0].position_array, point, atol=1e-9)
        assert candidates[0].class_name == "coffee"
        assert candidates[0].camera_support == 2

    def test_parallel_rays_yield_nothing(self):
        d = np.array([0.0, 0.0, -1.0])
        rays = {"coffee": [
            RayObservation("a", Ray(origin=np.array([0.0, 0.0, 3.0]), direction=d)),
            RayObservation("b", Ray(origin=np.array([0.05, 0.0, 3.0]), direction=d)),
        ]}
        assert find_intersections(rays, self.TUNING) == []

    def test_near_parallel_crossing_lacks_support(self):
        # two rays 2 degrees apart cross inside the workspace, but they
        # cannot fix the along-ray coordinate, so support collapses to 1
        point = np.array([0.0, 0.0, 1.0])
        a = ray_through([0.0, -2.0, 1.0], point, "a")
        angle = np.radians(2.0)
        direction = np.array([np.sin(angle), np.cos(angle), 0.0])
        b = RayObservation(
            "b", Ray(origin=point - 2.2 * direction, direction=direction))
        assert ray_pair_crossing(a.ray, b.ray)[0] < 1e-9
        assert find_intersections({"coffee": [a, b]}, self.TUNING) == []

    def test_same_camera_rays_do_not_pair(self):
        rays = {"plate": [ray_through([2, 0, 1], [0, 0, 1], "a"),
                          ray_through([2, 0, 1.0001], [0, 0, 1], "a")]}
        assert find_intersections(rays, self.TUNING) == []

    def test_crossing_outside_workspace_rejected(self):
        point = np.array([0.0, 0.0, 5.0])
        rays = {"coffee": [ray_through([3, 0, 5], point, "a"),
                           ray_through([0, 3, 5], point, "b")]}
        assert find_intersections(rays, self.TUNING) == []

    def test_classes_do_not_mix(self):
        point = np.array([0.5, 0.5, 1.0])
        rays = {"coffee": [ray_through([2, 0, 2], point, "a")],
                "plate": [ray_through([0, 2, 2], point, "b")]}
        assert find_intersections(rays, self.TUNING) == []

    def test_nearby_crossings_merge_to_one_candidate(self):
        # four cameras see the same object with a little model error;
        # the six pair midpoints scatter but must come out as one spot
        rng = np.random.default_rng(3)
        point = np.array([0.3, 0.1, 0.85])
        rays = {"coffee": [
            ray_through(origin, point, f"cam{i}", jitter=0.004, rng=rng)
            for i, origin in enumerate(
                ([2.5, 0, 2], [0, 2.5, 2.2], [-2.5, 0.5, 2], [0.5, -2.5, 1.8]))
        ]}
        candidates = find_intersections(rays, self.TUNING)
        assert len(candidates) == 1
        assert candidates[0].camera_support == 4
        assert np.linalg.norm(candidates[0].position_array - point) < 0.03

    def test_two_cup_scene_with_ghost(self):
        candidates = find_intersections({"cup-coffee": two_cup_rays()},
                                        self.TUNING)
        assert len(candidates) == 3
        supports = sorted(c.camera_support for c in candidates)
        assert supports == [2, 3, 3]
        for candidate in candidates:
            if candidate.camera_support == 3:
                assert min(
                    np.linalg.norm(candidate.position_array - cup)
                    for cup in TWO_CUP_POSITIONS) < 1e-9

    def test_candidates_sorted_and_separated(self):
        rng = np.random.default_rng(17)
        points = [np.array([0.5, -0.4, 0.8]), np.array([-0.6, 0.7, 0.9]),
                  np.array([0.9, 0.8, 1.0])]
        rays = {"plate": [], "coffee": []}
        for i, origin in enumerate(([3, 0, 2], [0, 3, 2], [-3, 0, 2], [0, -3, 2])):
            for j, point in enumerate(points):
                name = "plate" if j < 2 else "coffee"
                rays[name].append(
                    ray_through(origin, point, f"cam{i}", jitter=0.003, rng=rng))
        candidates = find_intersections(rays, self.TUNING)
        keys = [(c.class_name, c.position) for c in candidates]
        assert keys == sorted(keys)
        for a, b in itertools.combinations(candidates, 2):
            if a.class_name == b.class_name:
                gap = np.linalg.norm(a.position_array - b.position_array)
                assert gap > self.TUNING.spawn_merge_radius

    def test_rerun_is_identical(self):
        rays = {"cup-coffee": two_cup_rays()}
        first = find_intersections(rays, self.TUNING)
        second = find_intersections(rays, self.TUNING)
        assert first == second

    def test_input_order_does_not_matter(self):
        rng = np.random.default_rng(23)
        base = two_cup_rays()
        reference = find_intersections({"cup-coffee": base}, self.TUNING)
        for _ in range(5):
            shuffled = list(base)
            rng.shuffle(shuffled)
            result = find_intersections({"cup-coffee": shuffled}, self.TUNING)
            assert len(result) == len(reference)
            for got, want in zip(result, reference):
                np.testing.assert_allclose(
                    got.position_array, want.position_array, atol=1e-9)
                assert got.camera_support == want.camera_support
                assert ({r.camera_id for r in got.rays}
                        == {r.camera_id for r in want.rays})


class TestSubsetOracle:
    """Exhaustive check on scenes with at most 5 rays per class.

    The oracle enumerates every ray subset, asks scipy for a point that
    stays within the proximity threshold of all of them (a minimax
    witness), and keeps the maximal consistent subsets with at least two
    cameras. Scenes are generated with wide margins so borderline
    distances cannot flip either side.
    """

    TUNING = Tuning()

    @staticmethod
    def _witness(rays, start):
        def worst(p):
            return max(
                halfline_distance(np.asarray(p), obs.ray.origin,
                                  obs.ray.direction)
                for obs in rays)

        result = minimize(worst, x0=start, method="Nelder-Mead",
                          options={"xatol": 1e-10, "fatol": 1e-12,
                                   "maxiter": 4000})
        return result.x, worst(result.x)

    def _oracle(self, rays):
        tuning = self.TUNING
        consistent = []
        for size in range(2, len(rays) + 1):
            for subset in itertools.combinations(range(len(rays)), size):
                chosen = [rays[i] for i in subset]
                if len({obs.camera_id for obs in chosen}) < 2:
                    continue
                start = np.mean([obs.ray.origin + 2.0 * obs.ray.direction
                                 for obs in chosen], axis=0)
                point, worst = self._witness(chosen, start)
                if worst <= tuning.ray_proximity * 0.8:
                    consistent.append((set(subset), point))
        maximal = [
            (subset, point) for subset, point in consistent
            if not any(subset < other for other, _ in consistent)
        ]
        accepted = []
        for subset, point in maximal:
            chosen = [rays[i] for i in subset]
            if effective_support(chosen, tuning.parallel_max_angle) < 2:
                continue

            def residuals(p):
                return [
                    halfline_distance(np.asarray(p), obs.ray.origin,
                                      obs.ray.direction)
                    for obs in chosen]

            refined = least_squares(residuals, x0=point,
                                    xtol=1e-14, ftol=1e-14, gtol=1e-14).x
            accepted.append((subset, refined))
        return accepted

    def _random_scene(self, rng):
        camera_count = int(rng.integers(3, 5))
        angles = np.sort(rng.uniform(0, 2 * np.pi, camera_count))
        if np.min(np.diff(angles, append=angles[0] + 2 * np.pi)) < 0.5:
            return None
        origins = [
            np.array([2.5 * np.cos(a), 2.5 * np.sin(a),
                      rng.uniform(1.2, 2.6)])
            for a in angles
        ]
        object_count = int(rng.integers(1, 3))
        points = []
        for _ in range(20):
            p = rng.uniform([-0.8, -0.8, 0.6], [0.8, 0.8, 1.1])
            if all(np.linalg.norm(p - q) > 0.6 for q in points):
                points.append(p)
            if len(points) == object_count:
                break
        if len(points) < object_count:
            return None
        rays = []
        for j, point in enumerate(points):
            seen_by = rng.permutation(camera_count)[:int(rng.integers(2, 4))]
            for i in sorted(seen_by):
                rays.append(ray_through(origins[i], point, f"cam{i}",
                                        jitter=0.0006, rng=rng))
        if len(rays) > 5:
            return None
        expected = []
        for j, point in enumerate(points):
            supporting = {
                k for k, obs in enumerate(rays)
                if halfline_distance(point, obs.ray.origin, obs.ray.direction)
                < 0.01}
            expected.append((supporting, point))
        # margin: rays not supporting a point must pass far from it
        for subset, point in expected:
            for k, obs in enumerate(rays):
                if k not in subset and halfline_distance(
                        point, obs.ray.origin, obs.ray.direction) < 0.35:
                    return None
        return rays, expected

    def test_matches_exhaustive_subsets(self):
        rng = np.random.default_rng(29)
        checked = 0
        while checked < 10:
            scene = self._random_scene(rng)
            if scene is None:
                continue
            rays, _ = scene
            oracle = self._oracle(rays)
            mine = find_intersections({"milk": rays}, self.TUNING)
            assert len(mine) == len(oracle)
            for subset, point in oracle:
                matched = [
                    c for c in mine
                    if np.linalg.norm(c.position_array - point) < 1e-6]
                assert len(matched) == 1
                got_rays = {
                    (r.camera_id, tuple(r.ray.origin)) for r in matched[0].rays}
                want_rays = {
                    (rays[i].camera_id, tuple(rays[i].ray.origin))
                    for i in subset}
                assert got_rays == want_rays
            checked += 1


class TestSupportRule:

    def _candidate(self, support):
        return IntersectionCandidate(
            position=(0.0, 0.0, 1.0), class_name="x", rays=(),
            camera_support=support)

    def test_unique_needs_two(self):
        assert not apply_support_rule(self._candidate(1), UNIQUE)
        assert apply_support_rule(self._candidate(2), UNIQUE)

    def test_multiple_needs_three(self):
        assert not apply_support_rule(self._candidate(2), MULTIPLE)
        assert apply_support_rule(self._candidate(3), MULTIPLE)

    def test_rule_can_be_disabled(self):
        assert apply_support_rule(self._candidate(2), MULTIPLE,
                                  enforce_multi_camera_rule=False)

    def test_two_cup_counts(self):
        candidates = find_intersections({"cup-coffee": two_cup_rays()},
                                        Tuning())
        with_rule = [c for c in candidates
                     if apply_support_rule(c, MULTIPLE, True)]
        without = [c for c in candidates
                   if apply_support_rule(c, MULTIPLE, False)]
        assert len(with_rule) == 2
        assert len(without) >= 3


class TestSuppression:

    TUNING = Tuning()

    def _candidate(self, position, class_name="cup-coffee"):
        return IntersectionCandidate(
            position=tuple(float(v) for v in position), class_name=class_name,
            rays=(), camera_support=3)

    def test_same_class_nearby_suppressed(self):
        candidate = self._candidate([0.0, 0.0, 0.8])
        active = [("cup-coffee", np.array([0.1, 0.0, 0.8]))]
        assert suppress_near_tracklets([candidate], active, 50, self.TUNING) == []

    def test_other_class_not_suppressed(self):
        candidate = self._candidate([0.0, 0.0, 0.8])
        active = [("plate", np.array([0.0, 0.0, 0.8]))]
        kept = suppress_near_tracklets([candidate], active, 50, self.TUNING)
        assert kept == [candidate]

    def test_far_candidate_kept(self):
        candidate = self._candidate([0.0, 0.0, 0.8])
        active = [("cup-coffee", np.array([0.2, 0.0, 0.8]))]
        kept = suppress_near_tracklets([candidate], active, 50, self.TUNING)
        assert kept == [candidate]

    def test_relaxation_frame_shrinks_radius(self):
        # 5 cm away: inside the normal radius, outside the relaxed one
        candidate = self._candidate([0.05, 0.0, 0.8])
        active = [("cup-coffee", np.array([0.0, 0.0, 0.8]))]
        assert suppress_near_tracklets([candidate], active, 99, self.TUNING) == []
        kept = suppress_near_tracklets([candidate], active, 100, self.TUNING)
        assert kept == [candidate]
        assert suppress_near_tracklets([candidate], active, 101, self.TUNING) == []

    def test_relaxed_radius_still_suppresses_point_blank(self):
        candidate = self._candidate([0.01, 0.0, 0.8])
        active = [("cup-coffee", np.array([0.0, 0.0, 0.8]))]
        assert suppress_near_tracklets([candidate], active, 100, self.TUNING) == []


class TestSpawnCandidates:

    def test_multiplicity_comes_from_scene(self):
        scene = default_scene()
        point = np.array([0.5, -0.3, 0.9])
        rays = {
            "coffee": [ray_through([2, 1, 2], point, "a"),
                       ray_through([-1, 2, 2], point, "b")],
            "cup-coffee": [
                ray_through([2, 1, 2], point + [0.5, 0, 0], "a"),
                ray_through([-1, 2, 2], point + [0.5, 0, 0], "b")],
        }
        spawned = spawn_candidates(rays, [], 1, scene)
        assert [c.class_name for c in spawned] == ["coffee"]

    def test_rule_toggle_in_tuning(self):
        scene = with_tuning(default_scene(), enforce_multi_camera_rule=False)
        point = np.array([0.5, -0.3, 0.9])
        rays = {"cup-coffee": [ray_through([2, 1, 2], point, "a"),
                               ray_through([-1, 2, 2], point, "b")]}
        spawned = spawn_candidates(rays, [], 1, scene)
        assert [c.class_name for c in spawned] == ["cup-coffee"]

    def test_active_tracklets_suppress(self):
        scene = default_scene()
        point = np.array([0.5, -0.3, 0.9])
        rays = {"coffee": [ray_through([2, 1, 2], point, "a"),
                           ray_through([-1, 2, 2], point, "b")]}
        active = [("coffee", point + [0.05, 0.0, 0.0])]
        assert spawn_candidates(rays, active, 1, scene) == []
        assert len(spawn_candidates(rays, [], 1, scene)) == 1
