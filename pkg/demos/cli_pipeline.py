#!/usr/bin/env python3
"""The whole pipeline through the command-line interface.

Simulates a short trial into a scratch directory, calibrates the rig
from the trial's annotations, tracks the detections, and scores the
result against the recorded ground truth. Each step drives the same
entry point the installed `tritrack` command uses, so the files on
disk are exactly what a real session produces.

Run from the repository root:

    python3 demos/cli_pipeline.py
"""

import tempfile
from pathlib import Path

import yaml

from tritrack import (
    NoiseSpec,
    ObjectTrack,
    SyntheticScenario,
    default_scene,
    trial_filename,
    waypoint_trajectory,
)
from tritrack.cli import main
from tritrack.simulate import scenario_to_mapping


def build_scenario() -> SyntheticScenario:
    """Ten seconds, three cameras, a sliding cup and a static carton."""
    scene = default_scene()
    cameras = {name: (scene.camera_poses[name], scene.camera_intrinsics[name])
               for name in ("back", "front", "table-side")}
    objects = (
        ObjectTrack("cup-coffee", waypoint_trajectory([
            (0.0, 1.05, -0.55, 0.82),
            (4.0, 1.05, -0.55, 0.82),
            (8.0, 1.30, -0.45, 0.82),
        ])),
        ObjectTrack("milk", waypoint_trajectory([(0.0, -1.35, 0.3, 1.0)])),
    )
    return SyntheticScenario(cameras=cameras, objects=objects,
                             noise=NoiseSpec(sigma_px=1.0, dropout=0.05),
                             duration=10.0, seed=4)


def run(argv):
    # flush so the banner beats the command's own log lines even when
    # stdout is piped and block-buffered
    print(f"$ tritrack {' '.join(argv)}", flush=True)
    code = main(argv)
    assert code == 0, f"exit code {code}"
    print(flush=True)


def main_demo() -> int:
    with tempfile.TemporaryDirectory(prefix="tritrack-demo-") as scratch:
        workdir = Path(scratch)
        scenario_path = workdir / "scenario.yaml"
        scenario_path.write_text(
            yaml.safe_dump(scenario_to_mapping(build_scenario())))

        trial_dir = workdir / "trial"
        run(["simulate", "--scenario", str(scenario_path),
             "--output-dir", str(trial_dir),
             "--session", "1", "--trial", "1",
             "--annotation-noise", "0.5"])
        print("files written:")
        for path in sorted(trial_dir.iterdir()):
            print(f"  {path.name}")
        print()

        manifest = trial_dir / trial_filename(1, 1, "manifest")
        run(["calibrate", str(manifest)])
        run(["track", str(manifest)])
        run(["score",
             str(trial_dir / trial_filename(1, 1, "3dtrajetories")),
             str(trial_dir / trial_filename(1, 1, "groundtruth")),
             "--output", str(trial_dir / "report.yaml")])

        report = yaml.safe_load((trial_dir / "report.yaml").read_text())
        print(f"report.yaml: rmse {report['rmse'] * 100:.2f} cm, "
              f"{len(report['matches'])} matches, "
              f"{len(report['ghost_ids'])} ghosts")
    return 0


if __name__ == "__main__":
    raise SystemExit(main_demo())
