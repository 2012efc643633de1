"""Joint camera-pose and table-offset estimation from landmark annotations.

All parameters of a trial are solved together against a single loss: the
mean squared pixel residual between each annotated landmark and its
predicted projection. Free parameters are the six pose components of
every non-frozen annotated camera plus a planar (x, y) offset per table.
Because the loss couples cameras through the shared table offsets and the
world-origin marker, a camera that sees only one table is still solvable,
and the solved frame is anchored to the world origin whenever at least
one camera annotates it.

Landmarks that fall behind a camera during the search contribute a large
constant penalty with zero gradient; they stop corrupting the gradient of
everything else, and the optimizer walks out of such configurations via
the remaining residuals.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import yaml

from tritrack.camera import (
    BEHIND_CAMERA_EPS,
    CameraPose,
    camera_frame_coordinates,
    project,
    projection_jacobians,
)
from tritrack.formats import AnnotationSet
from tritrack.scene import ORIGIN_LANDMARK, SceneConfig

log = logging.getLogger(__name__)

#: Pixel penalty applied to each residual component of a landmark that
#: projects behind the camera.
BEHIND_PENALTY_PX = 1e4

#: A camera annotated with fewer landmarks than this is reported as
#: under-constrained (6 pose parameters against 2 constraints per point).
MIN_LANDMARKS_PER_CAMERA = 3

GRADIENT_DESCENT = "gradient-descent"
GAUSS_NEWTON = "gauss-newton"

_DIVERGENCE_PATIENCE = 5


class CalibrationDivergence(RuntimeError):
    """Loss increased over several accepted steps; carries the trace."""

    def __init__(self, message: str, loss_trace, param_trace):
        super().__init__(message)
        self.loss_trace = tuple(loss_trace)
        self.param_trace = tuple(np.array(p) for p in param_trace)


@dataclass(frozen=True)
class CalibrationProblem:
    """Annotations plus scene geometry, ready to solve.

    frozen_poses lists cameras whose pose is kept fixed; their residuals
    still enter the loss (they help pin down the table offsets) but no
    parameters are allocated for them.
    """

    annotations: AnnotationSet
    scene: SceneConfig
    frozen_poses: dict[str, CameraPose] = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.scene.landmark_names())
        for camera, landmarks in self.annotations.cameras.items():
            if camera not in self.scene.camera_intrinsics:
                raise ValueError(f"camera {camera!r} has no intrinsics "
                                 f"in the scene")
            if camera not in self.frozen_poses and \
                    camera not in self.scene.camera_poses:
                raise ValueError(f"camera {camera!r} has annotations but "
                                 f"no initial guess in the scene")
            unknown = set(landmarks) - known
            if unknown:
                raise ValueError(f"camera {camera!r} annotates unknown "
                                 f"landmarks: {sorted(unknown)}")

    def free_cameras(self) -> list[str]:
        return sorted(set(self.annotations.cameras) - set(self.frozen_poses))

    def table_names(self) -> list[str]:
        return sorted(self.scene.tables)


@dataclass(frozen=True)
class CalibrationResult:
    poses: dict[str, CameraPose]
    table_offsets: dict[str, tuple[float, float]]
    final_rms: float
    iterations: int
    residuals: dict[tuple[str, str], float]
    converged: bool
    method: str
    underconstrained: tuple[str, ...]
    annotation_digests: dict[str, str]
    loss_trace: tuple[float, ...]


def annotation_digest(annotations: AnnotationSet, camera: str) -> str:
    """Stable fingerprint of one camera's annotations."""
    landmarks = annotations.cameras[camera]
    canon = yaml.safe_dump(
        {name: [[float(x), float(y)] for x, y in pixels]
         for name, pixels in sorted(landmarks.items())},
        sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def unmoved_cameras(
    previous: CalibrationResult, annotations: AnnotationSet
) -> set[str]:
    """Cameras whose annotations are identical to the previous trial's."""
    return {
        camera for camera in annotations.cameras
        if previous.annotation_digests.get(camera)
        == annotation_digest(annotations, camera)
    }


def skip_if_unmoved(
    previous: CalibrationResult, annotations: AnnotationSet
) -> bool:
    """True when the previous result can be reused outright."""
    cameras = set(annotations.cameras)
    return (cameras == set(previous.annotation_digests)
            and unmoved_cameras(previous, annotations) == cameras)


@dataclass(frozen=True)
class _Index:
    """Flat parameter layout and per-residual bookkeeping."""

    free_cameras: tuple[str, ...]
    tables: tuple[str, ...]
    entries: tuple[tuple[str, str], ...]  # (camera, landmark) per residual

    @property
    def n_params(self) -> int:
        return 6 * len(self.free_cameras) + 2 * len(self.tables)

    def camera_slice(self, camera: str) -> slice:
        i = self.free_cameras.index(camera)
        return slice(6 * i, 6 * i + 6)

    def table_slice(self, table: str) -> slice:
        i = self.tables.index(table)
        base = 6 * len(self.free_cameras)
        return slice(base + 2 * i, base + 2 * i + 2)


def _build_index(problem: CalibrationProblem) -> _Index:
    entries = []
    for camera in sorted(problem.annotations.cameras):
        for landmark in sorted(problem.annotations.cameras[camera]):
            entries.append((camera, landmark))
    if not entries:
        raise ValueError("no annotated landmarks to calibrate from")
    return _Index(
        free_cameras=tuple(problem.free_cameras()),
        tables=tuple(problem.table_names()),
        entries=tuple(entries),
    )


def _pack(problem: CalibrationProblem, index: _Index,
          offsets: dict[str, tuple[float, float]] | None = None) -> np.ndarray:
    params = np.zeros(index.n_params)
    for camera in index.free_cameras:
        pose = problem.scene.camera_poses[camera]
        params[index.camera_slice(camera)] = [pose.x, pose.y, pose.z,
                                              pose.pan, pose.tilt, pose.roll]
    if offsets:
        for table in index.tables:
            params[index.table_slice(table)] = offsets.get(table, (0.0, 0.0))
    return params


def _unpack(
    problem: CalibrationProblem, index: _Index, params: np.ndarray
) -> tuple[dict[str, CameraPose], dict[str, tuple[float, float]]]:
    poses = dict(problem.frozen_poses)
    for camera in index.free_cameras:
        x, y, z, pan, tilt, roll = params[index.camera_slice(camera)]
        poses[camera] = CameraPose(x, y, z, pan, tilt, roll)
    offsets = {
        table: tuple(params[index.table_slice(table)])
        for table in index.tables
    }
    return poses, offsets


def _evaluate(
    problem: CalibrationProblem, index: _Index, params: np.ndarray,
    with_jacobian: bool,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Loss, residual matrix (N, 2), and optionally Jacobian (N, 2, P)."""
    poses, offsets = _unpack(problem, index, params)
    landmarks = problem.scene.landmark_positions(
        {t: tuple(v) for t, v in offsets.items()})
    n = len(index.entries)
    residuals = np.zeros((n, 2))
    jac = np.zeros((n, 2, index.n_params)) if with_jacobian else None

    row = 0
    for camera in sorted(problem.annotations.cameras):
        names = sorted(problem.annotations.cameras[camera])
        pose = poses[camera]
        intr = problem.scene.camera_intrinsics[camera]
        points = np.array([landmarks[name] for name in names])
        annotated = np.array([
            problem.annotations.mean_pixel(camera, name) for name in names])
        depth = camera_frame_coordinates(points, pose)[:, 2]
        front = depth > BEHIND_CAMERA_EPS
        rows = np.arange(row, row + len(names))

        residuals[rows[~front]] = BEHIND_PENALTY_PX
        if np.any(front):
            pixels = project(points[front], pose, intr)
            residuals[rows[front]] = pixels - annotated[front]
            if with_jacobian:
                d_point, d_pose = projection_jacobians(points[front], pose, intr)
                if camera in index.free_cameras:
                    jac[rows[front], :, index.camera_slice(camera)] = d_pose
                front_names = [n for n, f in zip(names, front) if f]
                for k, name in enumerate(front_names):
                    if name == ORIGIN_LANDMARK:
                        continue
                    table = name.split(":")[0]
                    jac[rows[front][k], :, index.table_slice(table)] = \
                        d_point[k, :, :2]
        row += len(names)

    loss = float(np.mean(np.sum(residuals ** 2, axis=1)))
    return loss, residuals, jac


def reprojection_error(
    problem: CalibrationProblem, params: np.ndarray
) -> tuple[float, np.ndarray]:
    """Loss and per-landmark residual vectors at the given parameters.

    The loss is the mean over landmarks of the squared residual norm, so
    sqrt(loss) is the rms pixel error reported as final_rms.
    """
    index = _build_index(problem)
    loss, residuals, _ = _evaluate(problem, index, params, with_jacobian=False)
    return loss, residuals


def loss_gradient(
    problem: CalibrationProblem, params: np.ndarray
) -> np.ndarray:
    index = _build_index(problem)
    _, residuals, jac = _evaluate(problem, index, params, with_jacobian=True)
    return _gradient(residuals, jac)


def _gradient(residuals: np.ndarray, jac: np.ndarray) -> np.ndarray:
    n = len(residuals)
    return (2.0 / n) * np.einsum("nc,ncp->p", residuals, jac)


def _gd_step(loss, residuals, jac, state):
    """One backtracking gradient-descent step; returns (params, loss, ok)."""
    problem, index, params = state["problem"], state["index"], state["params"]
    grad = _gradient(residuals, jac)
    grad_norm = float(np.linalg.norm(grad))
    state["grad_norm"] = grad_norm
    if grad_norm == 0.0:
        return params, loss, False
    alpha = state.setdefault("alpha", 1.0 / max(grad_norm, 1.0))
    for _ in range(60):
        candidate = params - alpha * grad
        new_loss, _, _ = _evaluate(problem, index, candidate,
                                   with_jacobian=False)
        if new_loss <= loss - 1e-4 * alpha * grad_norm ** 2:
            state["alpha"] = alpha * 2.0
            return candidate, new_loss, True
        alpha *= 0.5
    return params, loss, False


def _gn_step(loss, residuals, jac, state):
    """One Levenberg-style damped Gauss-Newton step."""
    problem, index, params = state["problem"], state["index"], state["params"]
    n = len(residuals)
    jflat = jac.reshape(2 * n, -1)
    rflat = residuals.reshape(2 * n)
    normal = jflat.T @ jflat
    rhs = jflat.T @ rflat
    state["grad_norm"] = float(np.linalg.norm((2.0 / n) * rhs))
    lam = state.setdefault("lam", 1e-3)
    scale = np.maximum(np.diag(normal), 1e-12)
    for _ in range(60):
        try:
            delta = np.linalg.solve(normal + lam * np.diag(scale), -rhs)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        candidate = params + delta
        new_loss, _, _ = _evaluate(problem, index, candidate,
                                   with_jacobian=False)
        if new_loss < loss:
            state["lam"] = max(lam / 3.0, 1e-12)
            return candidate, new_loss, True
        lam *= 10.0
    return params, loss, False


def solve(
    problem: CalibrationProblem,
    method: str = GAUSS_NEWTON,
    max_iterations: int = 500,
    loss_tolerance: float = 1e-8,
    gradient_tolerance: float = 1e-8,
) -> CalibrationResult:
    """Minimize the reprojection loss from the scene's initial guesses.

    Two step rules are available: damped Gauss-Newton (default; uses the
    residual Jacobian to solve the local normal equations and converges
    in tens of iterations on this problem family) and plain gradient
    descent with a backtracking line search. Both stop when the loss
    improvement drops below loss_tolerance, the gradient norm drops below
    gradient_tolerance, or no acceptable step exists.
    """
    steppers = {GRADIENT_DESCENT: _gd_step, GAUSS_NEWTON: _gn_step}
    if method not in steppers:
        raise ValueError(f"unknown method {method!r}, expected one of "
                         f"{sorted(steppers)}")
    step = steppers[method]

    index = _build_index(problem)
    params = _pack(problem, index)
    loss, residuals, jac = _evaluate(problem, index, params, with_jacobian=True)
    trace = [loss]
    param_trace = [params.copy()]
    state = {"problem": problem, "index": index, "params": params}
    converged = False
    iterations = 0
    best_loss = loss
    rising = 0

    for iterations in range(1, max_iterations + 1):
        state["params"] = params
        new_params, new_loss, accepted = step(loss, residuals, jac, state)
        if not accepted:
            converged = state.get("grad_norm", np.inf) <= gradient_tolerance
            iterations -= 1
            break
        improvement = loss - new_loss
        params, loss = new_params, new_loss
        trace.append(loss)
        param_trace.append(params.copy())
        if loss > best_loss * (1.0 + 1e-12) + 1e-15:
            rising += 1
            if rising >= _DIVERGENCE_PATIENCE:
                raise CalibrationDivergence(
                    f"loss rose for {rising} consecutive accepted steps "
                    f"(best {best_loss:.6g}, now {loss:.6g})",
                    trace, param_trace)
        else:
            rising = 0
            best_loss = min(best_loss, loss)
        loss, residuals, jac = _evaluate(problem, index, params,
                                         with_jacobian=True)
        if 0.0 <= improvement < loss_tolerance:
            converged = True
            break
        if state.get("grad_norm", np.inf) <= gradient_tolerance:
            converged = True
            break

    poses, offsets = _unpack(problem, index, params)
    norms = np.linalg.norm(residuals, axis=1)
    underconstrained = tuple(
        camera for camera in index.free_cameras
        if len(problem.annotations.cameras[camera]) < MIN_LANDMARKS_PER_CAMERA
    )
    for camera in underconstrained:
        log.warning("camera %s is under-constrained (%d landmarks)",
                    camera, len(problem.annotations.cameras[camera]))
    digests = {
        camera: annotation_digest(problem.annotations, camera)
        for camera in problem.annotations.cameras
    }
    return CalibrationResult(
        poses=poses,
        table_offsets={t: (float(a), float(b))
                       for t, (a, b) in offsets.items()},
        final_rms=float(np.sqrt(loss)),
        iterations=iterations,
        residuals={entry: float(norms[i])
                   for i, entry in enumerate(index.entries)},
        converged=converged,
        method=method,
        underconstrained=underconstrained,
        annotation_digests=digests,
        loss_trace=tuple(trace),
    )


def initial_parameters(problem: CalibrationProblem) -> np.ndarray:
    """Packed parameter vector at the scene's initial guesses."""
    return _pack(problem, _build_index(problem))
