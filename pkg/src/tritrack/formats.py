"""Readers and writers for the pipeline's YAML file formats.

Four kinds of files flow through the pipeline, all YAML, all carrying a
``format_version`` so schema changes stay detectable:

detections (one file per camera)
    ``{format_version, camera, frames: [{time, detections: [{name, xywh,
    conf}]}]}`` where ``xywh`` is the bounding box with (x, y) the box
    center in pixels. Width and height are carried through but unused.

annotations (one file per trial)
    ``{format_version, cameras: {camera: {landmark: [[x, y], ...]}}}``.
    Landmarks are named by the scene geometry (``table:0`` .. ``table:3``,
    ``origin``); several pixel positions per landmark are allowed and are
    averaged downstream.

poses (one file per trial)
    ``{format_version, cameras: {camera: {x, y, z, pan, tilt, roll}},
    tables: {table: {x_offset, y_offset}}}``.

trajectories (one file per trial)
    ``{format_version, tracklets: [{name, id, timesteps: [{time,
    position, covariance}]}]}``.

Readers reject unknown top-level keys and re-validate invariants, so a
write → read → write cycle is byte-identical and structurally lossless.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from tritrack.scene import TABLEWARE_CLASSES, _require_keys, pose_from_mapping, pose_to_mapping
from tritrack.camera import CameraPose

log = logging.getLogger(__name__)

DETECTIONS_FORMAT_VERSION = 1
ANNOTATIONS_FORMAT_VERSION = 1
POSES_FORMAT_VERSION = 1
TRAJECTORIES_FORMAT_VERSION = 1

_SYMMETRY_TOL = 1e-9

# libyaml is an order of magnitude faster on the per-camera detection
# files; fall back to the pure-python codec when it is not compiled in
_Loader = getattr(yaml, "CSafeLoader", yaml.SafeLoader)
_Dumper = getattr(yaml, "CSafeDumper", yaml.SafeDumper)


def _load_yaml_mapping(path: str | Path, allowed: set[str]) -> dict:
    try:
        doc = yaml.load(Path(path).read_text(), Loader=_Loader)
    except yaml.YAMLError as err:
        raise ValueError(f"{path}: not valid YAML: {err}") from err
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    _require_keys(doc, allowed, str(path))
    return doc


def _dump_yaml(doc: dict, path: str | Path) -> None:
    Path(path).write_text(yaml.dump(doc, Dumper=_Dumper, sort_keys=True))


def _check_version(doc: dict, expected: int, path) -> None:
    version = doc.get("format_version")
    if version != expected:
        raise ValueError(f"{path}: unsupported format_version {version!r}, "
                         f"expected {expected}")


@dataclass(frozen=True)
class Detection:
    """One 2D bounding-box observation from one camera at one time.

    bbox is (x, y, w, h) in pixels with (x, y) the box center; the center
    is the point fed to triangulation and tracking.
    """

    class_name: str
    bbox: tuple[float, float, float, float]
    confidence: float
    timestamp: float
    camera_id: str

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], "
                             f"got {self.confidence}")
        if len(self.bbox) != 4:
            raise ValueError(f"bbox must be (x, y, w, h), got {self.bbox}")
        if self.bbox[2] < 0 or self.bbox[3] < 0:
            raise ValueError(f"bbox width/height must be >= 0, got {self.bbox}")

    @property
    def center(self) -> np.ndarray:
        return np.array(self.bbox[:2])


@dataclass(frozen=True)
class DetectionStream:
    """All detections of one camera over a trial, grouped per timestep.

    frames are (time, detections) pairs with strictly increasing times;
    a frame may carry zero detections. skipped_unknown counts detections
    dropped at read time because their class was not in the vocabulary.
    """

    camera_id: str
    frames: tuple[tuple[float, tuple[Detection, ...]], ...]
    skipped_unknown: int = 0

    def __post_init__(self):
        times = [t for t, _ in self.frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"{self.camera_id}: frame times must be "
                             f"strictly increasing")
        for t, dets in self.frames:
            for det in dets:
                if det.camera_id != self.camera_id:
                    raise ValueError(
                        f"detection camera {det.camera_id!r} does not match "
                        f"stream camera {self.camera_id!r}")
                if det.timestamp != t:
                    raise ValueError(
                        f"{self.camera_id}: detection timestamp "
                        f"{det.timestamp} does not match frame time {t}")

    def detection_count(self) -> int:
        return sum(len(dets) for _, dets in self.frames)


def make_stream(
    camera_id: str,
    frames: list[tuple[float, list[tuple[str, tuple, float]]]],
) -> DetectionStream:
    """Build a DetectionStream from (time, [(name, xywh, conf), ...]) rows.

    Convenience for tests and generators; fills in the per-detection
    timestamp and camera id.
    """
    built = tuple(
        (float(t), tuple(
            Detection(class_name=name, bbox=tuple(float(v) for v in xywh),
                      confidence=float(conf), timestamp=float(t),
                      camera_id=camera_id)
            for name, xywh, conf in dets))
        for t, dets in frames
    )
    return DetectionStream(camera_id=camera_id, frames=built)


def write_detections(path: str | Path, stream: DetectionStream) -> None:
    doc = {
        "format_version": DETECTIONS_FORMAT_VERSION,
        "camera": stream.camera_id,
        "frames": [
            {
                "time": float(t),
                "detections": [
                    {
                        "name": det.class_name,
                        "xywh": [float(v) for v in det.bbox],
                        "conf": float(det.confidence),
                    }
                    for det in dets
                ],
            }
            for t, dets in stream.frames
        ],
    }
    _dump_yaml(doc, path)


def read_detections(
    path: str | Path, vocabulary: frozenset[str] | None = None
) -> DetectionStream:
    """Read one camera's detection file.

    Detections whose class is not in the vocabulary are skipped with a
    warning and counted in the returned stream's skipped_unknown.
    """
    vocab = frozenset(TABLEWARE_CLASSES) if vocabulary is None else vocabulary
    doc = _load_yaml_mapping(path, {"format_version", "camera", "frames"})
    _check_version(doc, DETECTIONS_FORMAT_VERSION, path)
    camera = doc.get("camera")
    if not isinstance(camera, str) or not camera:
        raise ValueError(f"{path}: missing camera id")

    frames = []
    skipped = 0
    for i, frame in enumerate(doc.get("frames") or []):
        context = f"{path}: frame {i}"
        if not isinstance(frame, dict):
            raise ValueError(f"{context}: expected a mapping")
        _require_keys(frame, {"time", "detections"}, context)
        try:
            t = float(frame["time"])
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"{context}: missing or non-numeric time") from None
        dets = []
        for j, raw in enumerate(frame.get("detections") or []):
            entry = f"{context}, detection {j}"
            if not isinstance(raw, dict):
                raise ValueError(f"{entry}: expected a mapping")
            _require_keys(raw, {"name", "xywh", "conf"}, entry)
            try:
                name = raw["name"]
                xywh = tuple(float(v) for v in raw["xywh"])
                conf = float(raw["conf"])
            except (KeyError, TypeError, ValueError):
                raise ValueError(f"{entry}: malformed fields") from None
            if name not in vocab:
                log.warning("%s: unknown class %r, skipping", entry, name)
                skipped += 1
                continue
            dets.append(Detection(class_name=name, bbox=xywh, confidence=conf,
                                  timestamp=t, camera_id=camera))
        frames.append((t, tuple(dets)))
    return DetectionStream(camera_id=camera, frames=tuple(frames),
                           skipped_unknown=skipped)


@dataclass(frozen=True)
class AnnotationSet:
    """Hand-annotated landmark pixels, per camera.

    cameras maps camera id to {landmark name: [(x, y), ...]}. A camera may
    annotate any subset of landmarks (the origin is often occluded), but
    every listed landmark carries at least one pixel position.
    """

    cameras: dict[str, dict[str, tuple[tuple[float, float], ...]]]

    def __post_init__(self):
        for camera, landmarks in self.cameras.items():
            for name, pixels in landmarks.items():
                if len(pixels) == 0:
                    raise ValueError(f"camera {camera!r}: landmark {name!r} "
                                     f"has no pixel positions")

    def mean_pixel(self, camera_id: str, landmark: str) -> np.ndarray:
        """Average of the annotated positions for one landmark."""
        pixels = self.cameras[camera_id][landmark]
        return np.mean(np.asarray(pixels, dtype=float), axis=0)

    def camera_ids(self) -> list[str]:
        return sorted(self.cameras)


def write_annotations(path: str | Path, annotations: AnnotationSet) -> None:
    doc = {
        "format_version": ANNOTATIONS_FORMAT_VERSION,
        "cameras": {
            camera: {
                name: [[float(x), float(y)] for x, y in pixels]
                for name, pixels in sorted(landmarks.items())
            }
            for camera, landmarks in sorted(annotations.cameras.items())
        },
    }
    _dump_yaml(doc, path)


def read_annotations(path: str | Path) -> AnnotationSet:
    doc = _load_yaml_mapping(path, {"format_version", "cameras"})
    _check_version(doc, ANNOTATIONS_FORMAT_VERSION, path)
    cameras = {}
    for camera, landmarks in (doc.get("cameras") or {}).items():
        if not isinstance(landmarks, dict):
            raise ValueError(f"{path}: camera {camera!r}: expected a mapping "
                             f"of landmarks")
        parsed = {}
        for name, pixels in landmarks.items():
            try:
                parsed[name] = tuple(
                    (float(x), float(y)) for x, y in pixels)
            except (TypeError, ValueError):
                raise ValueError(f"{path}: camera {camera!r}, landmark "
                                 f"{name!r}: malformed pixel list") from None
        cameras[camera] = parsed
    return AnnotationSet(cameras=cameras)


def write_poses(
    path: str | Path,
    poses: dict[str, CameraPose],
    table_offsets: dict[str, tuple[float, float]],
) -> None:
    doc = {
        "format_version": POSES_FORMAT_VERSION,
        "cameras": {name: pose_to_mapping(pose)
                    for name, pose in sorted(poses.items())},
        "tables": {
            name: {"x_offset": float(dx), "y_offset": float(dy)}
            for name, (dx, dy) in sorted(table_offsets.items())
        },
    }
    _dump_yaml(doc, path)


def read_poses(
    path: str | Path,
) -> tuple[dict[str, CameraPose], dict[str, tuple[float, float]]]:
    doc = _load_yaml_mapping(path, {"format_version", "cameras", "tables"})
    _check_version(doc, POSES_FORMAT_VERSION, path)
    poses = {}
    for name, raw in (doc.get("cameras") or {}).items():
        poses[name] = pose_from_mapping(raw, f"{path}: camera {name!r}")
    offsets = {}
    for name, raw in (doc.get("tables") or {}).items():
        _require_keys(raw, {"x_offset", "y_offset"}, f"{path}: table {name!r}")
        offsets[name] = (float(raw["x_offset"]), float(raw["y_offset"]))
    return poses, offsets


@dataclass(frozen=True)
class TrajectoryStep:
    time: float
    position: tuple[float, float, float]
    covariance: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (3, 3):
            raise ValueError(f"covariance must be 3x3, got shape {cov.shape}")
        if np.abs(cov - cov.T).max() > _SYMMETRY_TOL:
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -_SYMMETRY_TOL:
            raise ValueError("covariance must be positive semi-definite")

    @property
    def position_array(self) -> np.ndarray:
        return np.array(self.position)

    @property
    def covariance_array(self) -> np.ndarray:
        return np.array(self.covariance)


@dataclass(frozen=True)
class TrajectoryRecord:
    """One tracked object: its class and the timed belief history."""

    class_name: str
    tracklet_id: int
    timesteps: tuple[TrajectoryStep, ...] = field(default_factory=tuple)

    def __post_init__(self):
        times = [step.time for step in self.timesteps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"tracklet {self.tracklet_id}: timestep times "
                             f"must be strictly increasing")


def make_step(time: float, position, covariance) -> TrajectoryStep:
    pos = np.asarray(position, dtype=float)
    cov = np.asarray(covariance, dtype=float)
    return TrajectoryStep(
        time=float(time),
        position=tuple(float(v) for v in pos),
        covariance=tuple(tuple(float(v) for v in row) for row in cov),
    )


def write_trajectories(path: str | Path, records: list[TrajectoryRecord]) -> None:
    doc = {
        "format_version": TRAJECTORIES_FORMAT_VERSION,
        "tracklets": [
            {
                "name": rec.class_name,
                "id": int(rec.tracklet_id),
                "timesteps": [
                    {
                        "time": float(step.time),
                        "position": [float(v) for v in step.position],
                        "covariance": [[float(v) for v in row]
                                       for row in step.covariance],
                    }
                    for step in rec.timesteps
                ],
            }
            for rec in records
        ],
    }
    _dump_yaml(doc, path)


def read_trajectories(path: str | Path) -> list[TrajectoryRecord]:
    doc = _load_yaml_mapping(path, {"format_version", "tracklets"})
    _check_version(doc, TRAJECTORIES_FORMAT_VERSION, path)
    records = []
    for i, raw in enumerate(doc.get("tracklets") or []):
        context = f"{path}: tracklet {i}"
        if not isinstance(raw, dict):
            raise ValueError(f"{context}: expected a mapping")
        _require_keys(raw, {"name", "id", "timesteps"}, context)
        steps = []
        for j, step in enumerate(raw.get("timesteps") or []):
            entry = f"{context}, timestep {j}"
            if not isinstance(step, dict):
                raise ValueError(f"{entry}: expected a mapping")
            _require_keys(step, {"time", "position", "covariance"}, entry)
            try:
                steps.append(make_step(step["time"], step["position"],
                                       step["covariance"]))
            except (KeyError, TypeError, ValueError) as err:
                raise ValueError(f"{entry}: {err}") from None
        try:
            records.append(TrajectoryRecord(
                class_name=raw["name"], tracklet_id=int(raw["id"]),
                timesteps=tuple(steps)))
        except (KeyError, TypeError) as err:
            raise ValueError(f"{context}: {err}") from None
    return records


@dataclass(frozen=True)
class Timestep:
    """Detections of all cameras merged into one quantized frame."""

    frame: int
    time: float
    detections: tuple[Detection, ...]


def frame_index(timestamp: float, fps: float) -> int:
    """Quantize an absolute timestamp to its frame number."""
    return int(round(timestamp * fps))


def merge_streams(streams: list[DetectionStream], fps: float) -> list[Timestep]:
    """Merge per-camera streams into one contiguous frame-indexed timeline.

    Detections whose timestamps quantize to the same frame are grouped;
    frames with no detections in any camera still appear, so downstream
    per-frame bookkeeping (staleness, probation) sees a gapless timeline.
    Within a frame, detections are ordered camera by camera (sorted id),
    preserving file order within each camera.
    """
    by_frame: dict[int, list[Detection]] = {}
    for stream in sorted(streams, key=lambda s: s.camera_id):
        for t, dets in stream.frames:
            by_frame.setdefault(frame_index(t, fps), []).extend(dets)
    if not by_frame:
        return []
    first, last = min(by_frame), max(by_frame)
    return [
        Timestep(frame=f, time=f / fps,
                 detections=tuple(by_frame.get(f, ())))
        for f in range(first, last + 1)
    ]


def trial_filename(
    session: int, trial: int, kind: str,
    camera: str | None = None, extension: str = "yaml",
) -> str:
    """File name for one trial artifact.

    Follows the dataset convention
    ``s<session>t<trial>.mocap.objecttracking.<camera.><kind>.<ext>``
    with a zero-padded 3-digit session and 2-digit trial id. The
    trajectory kind is spelled ``3dtrajetories`` to stay byte-compatible
    with the files already published alongside the dataset.
    """
    middle = f"{camera}." if camera else ""
    return (f"s{session:03d}t{trial:02d}.mocap.objecttracking."
            f"{middle}{kind}.{extension}")


def write_plot_data(path: str | Path, records: list[TrajectoryRecord]) -> None:
    """Tab-separated per-timestep positions for external plotting.

    Columns: tracklet id, class name, time, x, y, z, covariance trace.
    """
    lines = ["id\tclass\ttime\tx\ty\tz\tcov_trace"]
    for rec in records:
        for step in rec.timesteps:
            trace = float(np.trace(step.covariance_array))
            x, y, z = step.position
            lines.append(f"{rec.tracklet_id}\t{rec.class_name}\t"
                         f"{step.time!r}\t{x!r}\t{y!r}\t{z!r}\t{trace!r}")
    Path(path).write_text("\n".join(lines) + "\n")
