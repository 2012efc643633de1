"""Command-line pipeline over recorded or synthetic trials.

Four subcommands cover the pipeline stages: ``simulate`` writes a full
synthetic trial to disk (detections, annotations, ground truth, scene,
manifest), ``calibrate`` solves camera poses from the annotations,
``track`` turns detections plus poses into trajectories, and ``score``
compares trajectories against ground truth. A trial manifest ties one
trial's files together; track accepts several manifests and runs them in
parallel, one process per trial, since tracking is sequential within a
trial but trials share nothing.

Set TRITRACK_LOG_LEVEL (DEBUG, INFO, WARNING, ...) to control logging.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import yaml

from tritrack.calibrate import (
    CalibrationDivergence,
    CalibrationProblem,
    GAUSS_NEWTON,
    GRADIENT_DESCENT,
    annotation_digest,
    solve,
)
from tritrack.formats import (
    _dump_yaml,
    _load_yaml_mapping,
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
from tritrack.scene import SceneConfig, Tuning, default_scene, load_scene, save_scene
from tritrack.simulate import (
    reference_scenario,
    render_annotations,
    render_detections,
    scenario_from_mapping,
    score_trajectories,
)
from tritrack.track import TrialTracker

log = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1
LOG_LEVEL_ENV = "TRITRACK_LOG_LEVEL"


@dataclass(frozen=True)
class TrialManifest:
    """One trial's files, resolved to absolute paths."""

    session: int
    trial: int
    scene: Path
    annotations: Path
    detections: dict[str, Path]
    output_dir: Path
    truth: Path | None = None


def load_manifest(path: str | Path) -> TrialManifest:
    """Read a manifest and check every referenced file exists."""
    path = Path(path)
    doc = _load_yaml_mapping(
        path,
        {"format_version", "session", "trial", "scene", "annotations",
         "detections", "output_dir", "truth"})
    version = doc.get("format_version")
    if version != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {version!r}")
    base = path.resolve().parent

    def resolve(name: str, role: str) -> Path:
        resolved = (base / name).resolve()
        if not resolved.is_file():
            raise FileNotFoundError(
                f"{role} not found: {resolved} (referenced by {path}; "
                f"run the simulate command or fix the manifest)")
        return resolved

    for key in ("scene", "annotations"):
        if not doc.get(key):
            raise ValueError(f"{path}: manifest is missing the {key!r} entry")
    detections = {
        str(camera): resolve(name, f"detection file for camera {camera!r}")
        for camera, name in sorted((doc.get("detections") or {}).items())
    }
    if not detections:
        raise ValueError(f"{path}: manifest lists no detection files")
    truth = doc.get("truth")
    return TrialManifest(
        session=int(doc.get("session", 0)),
        trial=int(doc.get("trial", 0)),
        scene=resolve(doc["scene"], "scene config"),
        annotations=resolve(doc["annotations"], "annotations file"),
        detections=detections,
        output_dir=(base / doc.get("output_dir", ".")).resolve(),
        truth=resolve(truth, "ground-truth file") if truth else None,
    )


def write_manifest(
    path: str | Path,
    session: int,
    trial: int,
    scene: str,
    annotations: str,
    detections: dict[str, str],
    truth: str | None = None,
    output_dir: str = ".",
) -> None:
    """Write a manifest; file names are kept relative to the manifest."""
    doc = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "session": int(session),
        "trial": int(trial),
        "scene": scene,
        "annotations": annotations,
        "detections": dict(sorted(detections.items())),
        "output_dir": output_dir,
    }
    if truth is not None:
        doc["truth"] = truth
    _dump_yaml(doc, path)


def apply_tuning_overrides(tuning: Tuning, overrides: list[str]) -> Tuning:
    """Apply ``key=value`` strings to the tuning block.

    Values are parsed by the field's type; only scalar fields can be
    overridden from the command line.
    """
    by_name = {f.name: f for f in fields(Tuning)}
    parsed = {}
    for spec in overrides:
        key, sep, raw = spec.partition("=")
        if not sep:
            raise ValueError(f"tuning override {spec!r} is not KEY=VALUE")
        if key not in by_name:
            raise ValueError(
                f"unknown tuning key {key!r}; valid keys: "
                f"{', '.join(sorted(by_name))}")
        kind = by_name[key].type
        if not isinstance(kind, str):
            kind = getattr(kind, "__name__", str(kind))
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"tuning key {key!r} expects true/false, "
                                 f"got {raw!r}")
            parsed[key] = raw.lower() in ("true", "1")
        elif kind == "int":
            parsed[key] = int(raw)
        elif kind == "float":
            parsed[key] = float(raw)
        else:
            raise ValueError(f"tuning key {key!r} cannot be set from the "
                             f"command line")
    return replace(tuning, **parsed)


def _scene_for_scenario(scenario, scene_path: str | None) -> SceneConfig:
    """Scene to ship with a simulated trial.

    An explicit scene file wins; otherwise the default scene is used,
    with its camera rig swapped for the scenario's whenever the scenario
    uses cameras the default scene does not know.
    """
    if scene_path:
        return load_scene(scene_path)
    scene = default_scene()
    if not set(scenario.cameras) <= set(scene.camera_intrinsics):
        scene = replace(
            scene,
            camera_poses={cid: pose
                          for cid, (pose, _) in scenario.cameras.items()},
            camera_intrinsics={cid: intr
                               for cid, (_, intr) in scenario.cameras.items()})
    return scene


def cmd_simulate(args) -> int:
    if args.scenario:
        doc = yaml.safe_load(Path(args.scenario).read_text())
        if not isinstance(doc, dict):
            raise ValueError(f"{args.scenario}: expected a mapping")
        scenario = scenario_from_mapping(doc)
        scene = _scene_for_scenario(scenario, args.scene)
    else:
        scenario, scene = reference_scenario()
        if args.scene:
            scene = load_scene(args.scene)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    if scene.tuning.fps != scenario.fps:
        # downstream frame quantization must match the rendered clock
        scene = replace(scene, tuning=replace(scene.tuning, fps=scenario.fps))

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    session, trial = args.session, args.trial

    def name(kind, camera=None, extension="yaml"):
        return trial_filename(session, trial, kind, camera, extension)

    streams, truth = render_detections(scenario)
    annotations = render_annotations(
        scenario, scene, noise_px=args.annotation_noise)

    detection_names = {}
    total = 0
    for camera_id, stream in streams.items():
        file_name = name("detections", camera=camera_id)
        write_detections(out / file_name, stream)
        detection_names[camera_id] = file_name
        total += sum(len(dets) for _, dets in stream.frames)
    write_annotations(out / name("annotations"), annotations)
    write_trajectories(out / name("groundtruth"), truth)
    save_scene(scene, out / name("scene"))
    write_manifest(
        out / name("manifest"),
        session=session, trial=trial,
        scene=name("scene"), annotations=name("annotations"),
        detections=detection_names, truth=name("groundtruth"))

    log.info("simulated %d frames, %d detections, %d objects",
             scenario.frame_count, total, len(scenario.objects))
    print(f"wrote trial s{session:03d}t{trial:02d} to {out}: "
          f"{len(streams)} cameras, {total} detections, "
          f"{len(scenario.objects)} objects")
    return 0


def _camera_rms(residuals: dict[tuple[str, str], float]) -> dict[str, float]:
    grouped: dict[str, list[float]] = {}
    for (camera, _), value in residuals.items():
        grouped.setdefault(camera, []).append(value)
    return {camera: float(np.sqrt(np.mean(np.square(values))))
            for camera, values in grouped.items()}


def cmd_calibrate(args) -> int:
    manifest = load_manifest(args.manifest)
    annotations = read_annotations(manifest.annotations)
    scene = load_scene(manifest.scene)

    frozen = {}
    if args.previous_annotations:
        previous_annotations = read_annotations(args.previous_annotations)
        previous_poses, _ = read_poses(args.previous_poses)
        for camera in sorted(annotations.cameras):
            if camera in previous_annotations.cameras \
                    and camera in previous_poses \
                    and annotation_digest(annotations, camera) \
                    == annotation_digest(previous_annotations, camera):
                frozen[camera] = previous_poses[camera]
                log.info("camera %s: skipped, unmoved", camera)

    problem = CalibrationProblem(annotations=annotations, scene=scene,
                                 frozen_poses=frozen)
    result = solve(problem, method=args.method,
                   max_iterations=args.max_iterations)

    out = Path(args.output_dir) if args.output_dir else manifest.output_dir
    out.mkdir(parents=True, exist_ok=True)
    pose_path = out / trial_filename(manifest.session, manifest.trial, "pose")
    write_poses(pose_path, result.poses, result.table_offsets)

    for camera, rms in sorted(_camera_rms(result.residuals).items()):
        count = len(annotations.cameras[camera])
        frozen_note = " (frozen)" if camera in frozen else ""
        print(f"camera {camera}: rms {rms:.3f} px over "
              f"{count} landmarks{frozen_note}")
    for table, (dx, dy) in sorted(result.table_offsets.items()):
        print(f"table {table}: offset ({dx:+.4f}, {dy:+.4f}) m")
    status = "converged" if result.converged else "DID NOT CONVERGE"
    print(f"final rms {result.final_rms:.3f} px after "
          f"{result.iterations} iterations ({status}) -> {pose_path}")
    if not result.converged:
        log.error("calibration did not converge within %d iterations",
                  args.max_iterations)
        return 1
    return 0


def _track_one(manifest_path: str, poses_path: str | None,
               output_dir: str | None, tuning_overrides: list[str],
               ) -> tuple[str, int, str]:
    """Track a single trial; runs in a worker process in batch mode."""
    manifest = load_manifest(manifest_path)
    scene = load_scene(manifest.scene)
    if tuning_overrides:
        scene = replace(
            scene,
            tuning=apply_tuning_overrides(scene.tuning, tuning_overrides))

    out = Path(output_dir) if output_dir else manifest.output_dir
    if poses_path:
        pose_file = Path(poses_path)
    else:
        pose_file = out / trial_filename(manifest.session, manifest.trial,
                                         "pose")
    if not pose_file.is_file():
        raise FileNotFoundError(
            f"pose file not found: {pose_file} (run the calibrate command "
            f"first, or pass --poses)")
    poses, _ = read_poses(pose_file)

    streams = [read_detections(path) for path in manifest.detections.values()]
    timesteps = merge_streams(streams, fps=scene.tuning.fps)
    records = TrialTracker(scene, poses).run(timesteps)

    out.mkdir(parents=True, exist_ok=True)
    trajectory_path = out / trial_filename(
        manifest.session, manifest.trial, "3dtrajetories")
    write_trajectories(trajectory_path, records)
    write_plot_data(
        out / trial_filename(manifest.session, manifest.trial, "plotdata",
                             extension="tsv"),
        records)
    return manifest_path, len(records), str(trajectory_path)


def cmd_track(args) -> int:
    payloads = [(str(m), args.poses, args.output_dir, args.tune or [])
                for m in args.manifests]
    if args.jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_track_one_star, payloads))
    else:
        results = [_track_one(*payload) for payload in payloads]
    for manifest_path, count, trajectory_path in results:
        print(f"{manifest_path}: {count} tracklets -> {trajectory_path}")
    return 0


def _track_one_star(payload):
    return _track_one(*payload)


def cmd_score(args) -> int:
    produced = read_trajectories(args.produced)
    truth = read_trajectories(args.truth)
    report = score_trajectories(produced, truth,
                                birth_radius=args.birth_radius)

    matched = len(report.matched_truth_ids)
    print(f"{matched}/{len(truth)} objects matched, "
          f"pooled rmse {report.rmse * 100:.2f} cm")
    for match in report.matches:
        print(f"truth {match.truth_id} <- tracklet {match.produced_id}: "
              f"rmse {match.rmse * 100:.2f} cm over "
              f"{match.timestep_count} steps")
    print(f"fragmentation {report.fragmentation}, "
          f"ghosts {len(report.ghost_ids)}, "
          f"missed {len(report.missed_truth_ids)}")

    if args.output:
        doc = {
            "rmse": float(report.rmse),
            "fragmentation": int(report.fragmentation),
            "ghost_ids": [int(v) for v in report.ghost_ids],
            "missed_truth_ids": [int(v) for v in report.missed_truth_ids],
            "matches": [
                {
                    "truth_id": int(m.truth_id),
                    "produced_id": int(m.produced_id),
                    "rmse": float(m.rmse),
                    "timesteps": int(m.timestep_count),
                }
                for m in report.matches
            ],
        }
        _dump_yaml(doc, args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tritrack",
        description="Multi-camera 3D object tracking pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser(
        "simulate", help="render a synthetic trial to disk")
    sim.add_argument("--scenario", help="scenario YAML (default: the "
                                        "built-in reference scenario)")
    sim.add_argument("--scene", help="scene config YAML to ship with the "
                                     "trial (default: built-in scene)")
    sim.add_argument("--output-dir", default=".", help="directory for the "
                                                       "trial files")
    sim.add_argument("--session", type=int, default=1)
    sim.add_argument("--trial", type=int, default=1)
    sim.add_argument("--seed", type=int, default=None,
                     help="override the scenario seed")
    sim.add_argument("--annotation-noise", type=float, default=0.0,
                     metavar="PX", help="pixel noise on landmark annotations")
    sim.set_defaults(func=cmd_simulate)

    cal = sub.add_parser(
        "calibrate", help="solve camera poses from annotations")
    cal.add_argument("manifest", help="trial manifest YAML")
    cal.add_argument("--method", choices=[GAUSS_NEWTON, GRADIENT_DESCENT],
                     default=GAUSS_NEWTON)
    cal.add_argument("--max-iterations", type=int, default=500)
    cal.add_argument("--output-dir", default=None,
                     help="where to write the pose file (default: the "
                          "manifest's output directory)")
    cal.add_argument("--previous-annotations", default=None,
                     help="annotations of an already-calibrated trial; "
                          "cameras with identical annotations are frozen")
    cal.add_argument("--previous-poses", default=None,
                     help="pose file matching --previous-annotations")
    cal.set_defaults(func=cmd_calibrate)

    trk = sub.add_parser(
        "track", help="compute trajectories for one or more trials")
    trk.add_argument("manifests", nargs="+", help="trial manifest YAMLs")
    trk.add_argument("--poses", default=None,
                     help="pose file (default: the calibrate output in the "
                          "trial's output directory)")
    trk.add_argument("--output-dir", default=None)
    trk.add_argument("--tune", action="append", metavar="KEY=VALUE",
                     help="override a tuning value, repeatable")
    trk.add_argument("--jobs", type=int, default=1,
                     help="worker processes for batch runs, one trial each")
    trk.set_defaults(func=cmd_track)

    sco = sub.add_parser(
        "score", help="compare trajectories against ground truth")
    sco.add_argument("produced", help="trajectory YAML from the tracker")
    sco.add_argument("truth", help="ground-truth trajectory YAML")
    sco.add_argument("--birth-radius", type=float, default=0.2,
                     help="matching radius in meters")
    sco.add_argument("--output", default=None,
                     help="also write the report as YAML")
    sco.set_defaults(func=cmd_score)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level_name = os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "calibrate" and \
            bool(args.previous_annotations) != bool(args.previous_poses):
        log.error("--previous-annotations and --previous-poses go together")
        return 2
    try:
        return args.func(args)
    except CalibrationDivergence as err:
        log.error("calibration diverged: %s", err)
        return 1
    except (ValueError, OSError) as err:
        log.error("%s", err)
        return 2


if __name__ == "__main__":
    sys.exit(main())
