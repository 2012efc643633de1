"""Static scene description: tables, landmarks, cameras, tuning knobs.

A scene bundles everything about the recording setup that is not produced
per trial: the nominal table geometry (from which landmark world positions
are generated), the world-origin marker, initial camera pose guesses with
their intrinsics, the tableware class vocabulary with per-class
multiplicity, and all pipeline tuning constants.

Landmark naming: each table rig contributes four corner landmarks named
``<table>:<corner>`` with corners numbered counter-clockwise (seen from
above) starting at the (-x, -y) corner; the world origin marker is named
``origin``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from tritrack.camera import CameraIntrinsics, CameraPose

SCENE_FORMAT_VERSION = 1

UNIQUE = "unique"
MULTIPLE = "multiple"

#: Detectable tableware classes, after merging the label pairs that are
#: hard to tell apart ("salt"/"sugar" and the two salad servers).
TABLEWARE_CLASSES = (
    "bowl--salad",
    "bowl--cooker",
    "plate--pasta",
    "bread",
    "butter",
    "jam",
    "nutella",
    "salt/sugar",
    "shaker--pepper",
    "cereal",
    "milk",
    "coffee",
    "wine--bottle",
    "water",
    "bowl--cereal",
    "plate",
    "knife-bread",
    "utensil, pasta",
    "ladle",
    "utensil, salad",
    "teaspoon",
    "tablespoon",
    "fork",
    "knife",
    "glass-water",
    "glass--wine",
    "cup-coffee",
)

#: Classes with one item per guest; everything else exists once per scene.
MULTIPLE_INSTANCE_CLASSES = frozenset({
    "plate",
    "bowl--cereal",
    "cup-coffee",
    "glass-water",
    "glass--wine",
    "fork",
    "knife",
    "teaspoon",
    "tablespoon",
})

ORIGIN_LANDMARK = "origin"
CORNERS_PER_TABLE = 4


def default_multiplicity() -> dict[str, str]:
    return {
        name: MULTIPLE if name in MULTIPLE_INSTANCE_CLASSES else UNIQUE
        for name in TABLEWARE_CLASSES
    }


@dataclass(frozen=True)
class TableRig:
    """A rectangular, horizontal table surface.

    (x, y) is the nominal center of the table top, z its height, and
    size_x/size_y the edge lengths along the world axes. The per-trial
    planar offset is not part of the rig; it is passed to corners().
    """

    x: float
    y: float
    z: float
    size_x: float
    size_y: float

    def __post_init__(self):
        if self.size_x <= 0 or self.size_y <= 0:
            raise ValueError(f"table sizes must be positive, got "
                             f"({self.size_x}, {self.size_y})")

    def corners(self, x_offset: float = 0.0, y_offset: float = 0.0) -> np.ndarray:
        """World positions of the 4 corners, shape (4, 3).

        Counter-clockwise from above, starting at the (-x, -y) corner.
        """
        cx = self.x + x_offset
        cy = self.y + y_offset
        hx = self.size_x / 2.0
        hy = self.size_y / 2.0
        return np.array([
            [cx - hx, cy - hy, self.z],
            [cx + hx, cy - hy, self.z],
            [cx + hx, cy + hy, self.z],
            [cx - hx, cy + hy, self.z],
        ])


@dataclass(frozen=True)
class Tuning:
    """All pipeline tuning constants in one place.

    Distances are meters, sigmas pixels, windows and periods in frames.
    """

    fps: float = 30.0
    # spawner
    ray_proximity: float = 0.10
    spawn_merge_radius: float = 0.10
    suppression_radius: float = 0.15
    suppression_relaxation: float = 0.15
    relaxation_period: int = 100
    parallel_max_angle: float = float(np.radians(5.0))
    enforce_multi_camera_rule: bool = True
    workspace_min: tuple[float, float, float] = (-4.0, -4.0, -0.5)
    workspace_max: tuple[float, float, float] = (4.0, 4.0, 3.5)
    # tracker
    base_sigma: float = 3.0
    process_noise: float = 0.02 ** 2
    association_gate: float = 0.30
    staleness_window: int = 30
    probation_window: int = 30
    convergence_radius: float = 0.05
    spawn_stddev: float = 0.10

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.base_sigma <= 0:
            raise ValueError(f"base_sigma must be positive, got {self.base_sigma}")
        if self.process_noise < 0:
            raise ValueError("process_noise must be non-negative")
        lo = np.asarray(self.workspace_min, dtype=float)
        hi = np.asarray(self.workspace_max, dtype=float)
        if not np.all(lo < hi):
            raise ValueError(f"empty workspace box: {self.workspace_min} "
                             f"to {self.workspace_max}")


@dataclass(frozen=True)
class SceneConfig:
    tables: dict[str, TableRig]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    camera_poses: dict[str, CameraPose] = field(default_factory=dict)
    camera_intrinsics: dict[str, CameraIntrinsics] = field(default_factory=dict)
    multiplicity: dict[str, str] = field(default_factory=default_multiplicity)
    tuning: Tuning = field(default_factory=Tuning)

    def __post_init__(self):
        for name, kind in self.multiplicity.items():
            if kind not in (UNIQUE, MULTIPLE):
                raise ValueError(
                    f"multiplicity of {name!r} must be {UNIQUE!r} or "
                    f"{MULTIPLE!r}, got {kind!r}")
        if set(self.camera_poses) != set(self.camera_intrinsics):
            raise ValueError("camera_poses and camera_intrinsics must list "
                             "the same camera ids")

    @property
    def class_names(self) -> frozenset[str]:
        return frozenset(self.multiplicity)

    def is_multiple(self, class_name: str) -> bool:
        try:
            return self.multiplicity[class_name] == MULTIPLE
        except KeyError:
            raise KeyError(f"unknown tableware class {class_name!r}") from None

    def landmark_names(self) -> list[str]:
        names = [
            f"{table}:{i}"
            for table in sorted(self.tables)
            for i in range(CORNERS_PER_TABLE)
        ]
        names.append(ORIGIN_LANDMARK)
        return names

    def landmark_positions(
        self, table_offsets: dict[str, tuple[float, float]] | None = None
    ) -> dict[str, np.ndarray]:
        """World position of every landmark, table offsets applied.

        Offsets default to zero for tables not listed.
        """
        offsets = table_offsets or {}
        unknown = set(offsets) - set(self.tables)
        if unknown:
            raise KeyError(f"offsets given for unknown tables: {sorted(unknown)}")
        out: dict[str, np.ndarray] = {}
        for table in sorted(self.tables):
            dx, dy = offsets.get(table, (0.0, 0.0))
            for i, corner in enumerate(self.tables[table].corners(dx, dy)):
                out[f"{table}:{i}"] = corner
        out[ORIGIN_LANDMARK] = np.asarray(self.origin, dtype=float)
        return out


def default_cameras() -> dict[str, CameraPose]:
    """Nominal six-camera rig around the table and counter."""
    return {
        "table-side": CameraPose(3.0, -1.0, 2.0, -np.pi / 2, -np.pi / 7, 0.0),
        "table-top": CameraPose(1.0, -1.0, 3.0, np.pi / 2, -np.pi / 2, 0.0),
        "back": CameraPose(0.0, 2.5, 3.0, np.pi, -np.pi / 4, 0.0),
        "counter-top": CameraPose(-1.5, 0.5, 3.0, np.pi / 2, -np.pi / 2, 0.0),
        "ceiling": CameraPose(0.0, 0.0, 5.0, 0.0, -np.pi / 2, np.pi / 2),
        "front": CameraPose(0.5, -2.5, 3.0, -np.pi / 12, -np.pi / 4, 0.0),
    }


def default_scene() -> SceneConfig:
    """Two-table kitchen scene with the nominal six-camera rig."""
    intr = CameraIntrinsics(focal_length=900.0, k1=0.1, k2=0.01)
    poses = default_cameras()
    return SceneConfig(
        tables={
            "table": TableRig(x=1.0, y=-0.8, z=0.75, size_x=0.8, size_y=1.4),
            "counter": TableRig(x=-1.2, y=0.5, z=0.9, size_x=0.6, size_y=1.2),
        },
        camera_poses=poses,
        camera_intrinsics={name: intr for name in poses},
    )


def _require_keys(mapping: dict, allowed: set[str], context: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ValueError(f"unknown keys in {context}: {sorted(unknown)}")


def pose_to_mapping(pose: CameraPose) -> dict[str, float]:
    return {k: float(v) for k, v in asdict(pose).items()}


def pose_from_mapping(mapping: dict, context: str = "pose") -> CameraPose:
    _require_keys(mapping, {"x", "y", "z", "pan", "tilt", "roll"}, context)
    return CameraPose(**{k: float(v) for k, v in mapping.items()})


def intrinsics_to_mapping(intr: CameraIntrinsics) -> dict:
    return {
        "focal_length": float(intr.focal_length),
        "k1": float(intr.k1),
        "k2": float(intr.k2),
        "principal_point": [float(v) for v in intr.principal_point],
        "image_size": [int(v) for v in intr.image_size],
    }


def intrinsics_from_mapping(mapping: dict, context: str = "intrinsics") -> CameraIntrinsics:
    _require_keys(
        mapping,
        {"focal_length", "k1", "k2", "principal_point", "image_size"},
        context,
    )
    out = dict(mapping)
    if "principal_point" in out:
        out["principal_point"] = tuple(float(v) for v in out["principal_point"])
    if "image_size" in out:
        out["image_size"] = tuple(int(v) for v in out["image_size"])
    return CameraIntrinsics(**out)


def save_scene(scene: SceneConfig, path: str | Path) -> None:
    tuning = asdict(scene.tuning)
    tuning["workspace_min"] = [float(v) for v in tuning["workspace_min"]]
    tuning["workspace_max"] = [float(v) for v in tuning["workspace_max"]]
    doc = {
        "format_version": SCENE_FORMAT_VERSION,
        "tables": {
            name: {k: float(v) for k, v in asdict(rig).items()}
            for name, rig in scene.tables.items()
        },
        "origin": [float(v) for v in scene.origin],
        "cameras": {
            name: {
                "pose": pose_to_mapping(scene.camera_poses[name]),
                "intrinsics": intrinsics_to_mapping(scene.camera_intrinsics[name]),
            }
            for name in sorted(scene.camera_poses)
        },
        "classes": dict(sorted(scene.multiplicity.items())),
        "tuning": tuning,
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))


def load_scene(path: str | Path) -> SceneConfig:
    doc = yaml.safe_load(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: scene config must be a mapping")
    _require_keys(
        doc,
        {"format_version", "tables", "origin", "cameras", "classes", "tuning"},
        f"{path}",
    )
    version = doc.get("format_version")
    if version != SCENE_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {version!r}")

    tables = {}
    for name, raw in doc.get("tables", {}).items():
        _require_keys(raw, {"x", "y", "z", "size_x", "size_y"}, f"table {name!r}")
        tables[name] = TableRig(**{k: float(v) for k, v in raw.items()})

    poses = {}
    intrinsics = {}
    for name, raw in doc.get("cameras", {}).items():
        _require_keys(raw, {"pose", "intrinsics"}, f"camera {name!r}")
        poses[name] = pose_from_mapping(raw["pose"], f"camera {name!r} pose")
        intrinsics[name] = intrinsics_from_mapping(
            raw["intrinsics"], f"camera {name!r} intrinsics")

    tuning_raw = dict(doc.get("tuning", {}))
    for key in ("workspace_min", "workspace_max"):
        if key in tuning_raw:
            tuning_raw[key] = tuple(float(v) for v in tuning_raw[key])
    _require_keys(tuning_raw, set(Tuning.__dataclass_fields__), "tuning")
    tuning = Tuning(**tuning_raw)

    origin = tuple(float(v) for v in doc.get("origin", (0.0, 0.0, 0.0)))
    if len(origin) != 3:
        raise ValueError(f"{path}: origin must have 3 coordinates")

    return SceneConfig(
        tables=tables,
        origin=origin,
        camera_poses=poses,
        camera_intrinsics=intrinsics,
        multiplicity=dict(doc.get("classes", {})),
        tuning=tuning,
    )


def with_tuning(scene: SceneConfig, **overrides) -> SceneConfig:
    """Copy of the scene with some tuning fields replaced."""
    return replace(scene, tuning=replace(scene.tuning, **overrides))
