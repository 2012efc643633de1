"""Multi-camera 3D object tracking for fixed tabletop rigs.

Entry points, roughly in pipeline order: build or load a
:class:`SceneConfig`, solve camera poses from landmark annotations
(:func:`solve`), then feed per-camera detection streams to a
:class:`TrialTracker` to produce 3D trajectory records. The
:mod:`tritrack.simulate` module renders synthetic detections from a
scripted scenario so every stage can be checked against known ground
truth, and :func:`score_trajectories` compares output to that truth.
"""

from tritrack.calibrate import (
    CalibrationDivergence,
    CalibrationProblem,
    CalibrationResult,
    reprojection_error,
    skip_if_unmoved,
    solve,
)
from tritrack.camera import (
    BehindCameraError,
    CameraIntrinsics,
    CameraPose,
    Ray,
    is_visible,
    project,
    projection_jacobians,
    unproject,
)
from tritrack.formats import (
    AnnotationSet,
    Detection,
    DetectionStream,
    Timestep,
    TrajectoryRecord,
    TrajectoryStep,
    make_stream,
    merge_streams,
    read_annotations,
    read_detections,
    read_poses,
    read_trajectories,
    trial_filename,
    write_annotations,
    write_detections,
    write_plot_data,
    write_poses,
    write_trajectories,
)
from tritrack.scene import (
    SceneConfig,
    TableRig,
    Tuning,
    default_scene,
    load_scene,
    save_scene,
    with_tuning,
)
from tritrack.simulate import (
    NoiseSpec,
    ObjectTrack,
    ScoreReport,
    SyntheticScenario,
    reference_scenario,
    render_annotations,
    render_detections,
    score_trajectories,
    waypoint_trajectory,
)
from tritrack.track import NoiseModel, Tracklet, TrialCounters, TrialTracker

__all__ = [
    "AnnotationSet",
    "BehindCameraError",
    "CalibrationDivergence",
    "CalibrationProblem",
    "CalibrationResult",
    "CameraIntrinsics",
    "CameraPose",
    "Detection",
    "DetectionStream",
    "NoiseModel",
    "NoiseSpec",
    "ObjectTrack",
    "Ray",
    "SceneConfig",
    "ScoreReport",
    "SyntheticScenario",
    "TableRig",
    "Timestep",
    "TrajectoryRecord",
    "TrajectoryStep",
    "Tracklet",
    "TrialCounters",
    "TrialTracker",
    "Tuning",
    "default_scene",
    "is_visible",
    "load_scene",
    "make_stream",
    "merge_streams",
    "project",
    "projection_jacobians",
    "read_annotations",
    "read_detections",
    "read_poses",
    "read_trajectories",
    "reference_scenario",
    "render_annotations",
    "render_detections",
    "reprojection_error",
    "save_scene",
    "score_trajectories",
    "skip_if_unmoved",
    "solve",
    "trial_filename",
    "unproject",
    "waypoint_trajectory",
    "with_tuning",
    "write_annotations",
    "write_detections",
    "write_plot_data",
    "write_poses",
    "write_trajectories",
]

__version__ = "0.1.0"
