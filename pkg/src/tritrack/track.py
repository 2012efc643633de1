"""Per-object extended Kalman filters over multi-camera detections.

Each tracked object is a tracklet: a 3D belief position with a 3x3
covariance. Detections associate to the same-class tracklet whose belief
lies closest to the detection's back-projected ray; an associated
detection drives one EKF measurement step in pixel space, linearizing
the projection at the current belief. Every frame each tracklet also
takes a dynamic step (constant position, growing uncertainty), leftover
detections feed the spawner, and lifecycle rules prune the population:
tracklets unseen for too long are retired, and a freshly spawned
tracklet that drifts onto an existing same-class tracklet during its
probation phase is deleted as a duplicate. Graduating from probation
additionally requires having won at least one detection: a ghost
crossing whose rays all belong to real objects starves (those
detections keep associating to the real tracklets) and is silently
dropped instead of becoming a record. Once out of probation,
same-class tracklets may converge freely; stacking two plates is
legitimate, a ghost that collapses onto the real object right after
spawning is not.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from tritrack.camera import (
    BehindCameraError,
    CameraIntrinsics,
    CameraPose,
    project,
    projection_jacobians,
    unproject,
)
from tritrack.formats import (
    Detection,
    TrajectoryRecord,
    Timestep,
    make_step,
)
from tritrack.scene import SceneConfig
from tritrack.spawn import RayObservation, SpawnTally, spawn_candidates

log = logging.getLogger(__name__)


def effective_sigma(sigma: float, confidence: float) -> float:
    """Measurement noise inflated for low detector confidence.

    A confidence of 1 leaves sigma untouched; a confidence of 0 inflates
    it by 2**10, making the detection nearly uninformative rather than
    discarding it outright.
    """
    if not 0.0 <= confidence <= 1.0:
        raise ValueError(f"confidence must be in [0, 1], got {confidence}")
    return sigma * (2.0 - confidence) ** 10


@dataclass(frozen=True)
class NoiseModel:
    """Base pixel noise and per-frame covariance growth."""

    sigma: float
    process_noise: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.process_noise < 0:
            raise ValueError(
                f"process_noise must be non-negative, got {self.process_noise}")


@dataclass
class Tracklet:
    """One object's evolving belief state.

    The history keeps one (time, position, covariance) snapshot per frame
    the tracklet was alive, including its probation phase.
    """

    id: int
    class_name: str
    state: np.ndarray
    covariance: np.ndarray
    birth_frame: int
    birth_time: float
    birth_position: np.ndarray
    last_update_frame: int
    established: bool = False
    measurement_count: int = 0
    history: list[tuple[float, np.ndarray, np.ndarray]] = field(
        default_factory=list)

    def age(self, frame: int) -> int:
        return frame - self.birth_frame


def associate(
    detection: Detection,
    tracklets: list[Tracklet],
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    gate: float,
) -> int | None:
    """Id of the same-class tracklet nearest the detection's ray, if any.

    Distance is point-to-ray from the tracklet's belief position; matches
    beyond the gate radius are rejected and the detection falls through
    to the spawner. Ties go to the lower tracklet id.
    """
    ray = unproject(detection.center, pose, intrinsics)
    best_id = None
    best_distance = np.inf
    for tracklet in sorted(tracklets, key=lambda t: t.id):
        if tracklet.class_name != detection.class_name:
            continue
        distance = ray.distance_to_point(tracklet.state)
        if distance < best_distance:
            best_id = tracklet.id
            best_distance = distance
    return best_id if best_distance <= gate else None


def measurement_step(
    tracklet: Tracklet,
    detection: Detection,
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    noise: NoiseModel,
) -> Tracklet:
    """One EKF update from a single detection of a single camera.

    The projection is linearized at the current belief; the detection
    center is the measurement, with isotropic pixel noise scaled by the
    detection confidence. A belief that sits behind the camera cannot be
    projected; the update is skipped and the prior kept, since later
    measurements from other cameras can still pull the state back.
    """
    try:
        predicted = project(tracklet.state, pose, intrinsics)
        jac_point, _ = projection_jacobians(tracklet.state, pose, intrinsics)
    except BehindCameraError:
        log.warning(
            "tracklet %d (%s) behind camera %s, measurement skipped",
            tracklet.id, tracklet.class_name, detection.camera_id)
        return tracklet
    sigma = effective_sigma(noise.sigma, detection.confidence)
    r = sigma * sigma * np.eye(2)
    p = tracklet.covariance
    s = jac_point @ p @ jac_point.T + r
    gain = np.linalg.solve(s.T, (p @ jac_point.T).T).T
    innovation = detection.center - predicted
    tracklet.state = tracklet.state + gain @ innovation
    shrink = np.eye(3) - gain @ jac_point
    posterior = shrink @ p @ shrink.T + gain @ r @ gain.T
    tracklet.covariance = (posterior + posterior.T) / 2.0
    tracklet.measurement_count += 1
    return tracklet


def dynamic_step(tracklet: Tracklet, noise: NoiseModel) -> Tracklet:
    """Constant-position prediction: the belief keeps its mean, loses
    confidence."""
    tracklet.covariance = tracklet.covariance + noise.process_noise * np.eye(3)
    return tracklet


@dataclass
class TrialCounters:
    """Per-stage tallies of one trial, for logging and diagnostics."""

    frames: int = 0
    detections: int = 0
    associated: int = 0
    behind_camera_skips: int = 0
    leftovers: int = 0
    spawned: int = 0
    suppressed: int = 0
    deleted_stale: int = 0
    deleted_converged: int = 0
    established: int = 0


class TrialTracker:
    """Sequential tracking loop of one trial.

    Holds the live tracklet population and the retirement list; state
    evolves strictly frame by frame, so one instance must never be
    shared across trials or threads.
    """

    def __init__(self, scene: SceneConfig, poses: dict[str, CameraPose]):
        unknown = sorted(set(poses) - set(scene.camera_intrinsics))
        if unknown:
            raise ValueError(
                f"poses given for cameras without intrinsics: {unknown}")
        self.scene = scene
        self.poses = dict(poses)
        self.noise = NoiseModel(
            sigma=scene.tuning.base_sigma,
            process_noise=scene.tuning.process_noise)
        self.live: list[Tracklet] = []
        self.retired: list[Tracklet] = []
        self.counters = TrialCounters()
        self._next_id = 1

    def _check_cameras(self, camera_ids) -> None:
        missing = sorted(set(camera_ids) - set(self.poses))
        if missing:
            raise ValueError(
                f"detections reference uncalibrated cameras: {missing}")

    def step_trial(self, timestep: Timestep) -> None:
        """Advance the population by one frame of merged detections."""
        tuning = self.scene.tuning
        counters = self.counters
        counters.frames += 1

        leftovers: list[RayObservation] = []
        for detection in timestep.detections:
            counters.detections += 1
            pose = self.poses.get(detection.camera_id)
            if pose is None:
                raise ValueError(
                    f"detection from uncalibrated camera "
                    f"{detection.camera_id!r} at frame {timestep.frame}")
            intrinsics = self.scene.camera_intrinsics[detection.camera_id]
            matched = associate(detection, self.live, pose, intrinsics,
                                tuning.association_gate)
            if matched is None:
                leftovers.append(RayObservation(
                    camera_id=detection.camera_id,
                    ray=unproject(detection.center, pose, intrinsics),
                    detection=detection))
                counters.leftovers += 1
                continue
            tracklet = next(t for t in self.live if t.id == matched)
            before = tracklet.measurement_count
            measurement_step(tracklet, detection, pose, intrinsics, self.noise)
            if tracklet.measurement_count == before:
                counters.behind_camera_skips += 1
            else:
                counters.associated += 1
                tracklet.last_update_frame = timestep.frame

        for tracklet in self.live:
            dynamic_step(tracklet, self.noise)

        rays_by_class: dict[str, list[RayObservation]] = {}
        for obs in leftovers:
            rays_by_class.setdefault(obs.detection.class_name, []).append(obs)
        if rays_by_class:
            active = [(t.class_name, t.state) for t in self.live]
            tally = SpawnTally()
            spawned = spawn_candidates(
                rays_by_class, active, timestep.frame, self.scene, tally)
            counters.suppressed += tally.suppressed
            for candidate in spawned:
                position = candidate.position_array
                self.live.append(Tracklet(
                    id=self._next_id,
                    class_name=candidate.class_name,
                    state=position,
                    covariance=tuning.spawn_stddev ** 2 * np.eye(3),
                    birth_frame=timestep.frame,
                    birth_time=timestep.time,
                    birth_position=position.copy(),
                    last_update_frame=timestep.frame,
                ))
                self._next_id += 1
                counters.spawned += 1

        fresh: list[Tracklet] = []
        for tracklet in self.live:
            if timestep.frame - tracklet.last_update_frame \
                    > tuning.staleness_window:
                counters.deleted_stale += 1
                if tracklet.established:
                    self.retired.append(tracklet)
            else:
                fresh.append(tracklet)
        self.live = fresh

        for tracklet in self.live:
            if not tracklet.established \
                    and tracklet.age(timestep.frame) >= tuning.probation_window \
                    and tracklet.measurement_count > 0:
                tracklet.established = True
                counters.established += 1
        kept: list[Tracklet] = []
        for tracklet in self.live:
            converged = not tracklet.established and any(
                other.id != tracklet.id
                and other.class_name == tracklet.class_name
                and (other.established or other.id < tracklet.id)
                and np.linalg.norm(other.state - tracklet.state)
                <= tuning.convergence_radius
                for other in self.live)
            if converged:
                counters.deleted_converged += 1
            else:
                kept.append(tracklet)
        self.live = kept

        for tracklet in self.live:
            tracklet.history.append((
                timestep.time, tracklet.state.copy(),
                tracklet.covariance.copy()))

    def finalize(self) -> list[TrajectoryRecord]:
        """Trajectory records of every tracklet that outgrew probation."""
        survivors = [t for t in self.live + self.retired if t.established]
        survivors.sort(key=lambda t: t.id)
        return [
            TrajectoryRecord(
                class_name=t.class_name,
                tracklet_id=t.id,
                timesteps=tuple(
                    make_step(time, state, cov)
                    for time, state, cov in t.history),
            )
            for t in survivors
        ]

    def run(self, timesteps: list[Timestep]) -> list[TrajectoryRecord]:
        """Validate cameras, process every frame, emit the records."""
        self._check_cameras(
            det.camera_id for step in timesteps for det in step.detections)
        for timestep in timesteps:
            self.step_trial(timestep)
        log.info(
            "trial done: %d frames, %d detections (%d associated, "
            "%d leftover), %d spawned, %d suppressed, %d stale, "
            "%d converged-deleted",
            self.counters.frames, self.counters.detections,
            self.counters.associated, self.counters.leftovers,
            self.counters.spawned, self.counters.suppressed,
            self.counters.deleted_stale, self.counters.deleted_converged)
        return self.finalize()
