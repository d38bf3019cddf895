import json
import subprocess
import sys

import numpy as np
import pytest

from gokart.cli import main
from gokart.localization import GeoFix, LocalPoint, local_to_geo
from gokart.perception import BevConfig, read_pgm, read_scan_csv, write_ppm
from gokart.sim import (TrackSampler, VehicleState, default_camera_homography,
                        render_scene)
from gokart.track import read_raceline_csv
from helpers import circle_track, oval_track, straight_track, write_track_csv


def write_homography(path, h):
    path.write_text("\n".join(" ".join(repr(float(v)) for v in row)
                              for row in h) + "\n")


class TestOptimizeRaceline:
    def test_circle_fixture_improves(self, tmp_path):
        write_track_csv(tmp_path / "circle.csv", circle_track())
        rc = main(["optimize-raceline", str(tmp_path / "circle.csv"),
                   "--out-dir", str(tmp_path / "out"),
                   "--set", "track.closed=true"])
        assert rc == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["optimized_sum_k2"] < report["centerline_sum_k2"]
        assert report["est_lap_time_s"] > 0.0
        raceline = read_raceline_csv(tmp_path / "out" / "raceline.csv",
                                     closed=True)
        assert len(raceline) > 50

    def test_straight_open_track_stays_centered(self, tmp_path):
        write_track_csv(tmp_path / "line.csv", straight_track(n=20))
        rc = main(["optimize-raceline", str(tmp_path / "line.csv"),
                   "--out-dir", str(tmp_path / "out"),
                   "--set", "track.closed=false"])
        assert rc == 0
        raceline = read_raceline_csv(tmp_path / "out" / "raceline.csv",
                                     closed=False)
        assert np.max(np.abs(raceline.xy[:, 1])) < 1e-3

    def test_missing_column_exits_2(self, tmp_path, capsys):
        (tmp_path / "bad.csv").write_text("x_m,y_m,w_left_m\n0,0,1\n")
        rc = main(["optimize-raceline", str(tmp_path / "bad.csv")])
        assert rc == 2
        assert "w_right_m" in capsys.readouterr().err

    def test_missing_file_exits_2(self, tmp_path):
        rc = main(["optimize-raceline", str(tmp_path / "nope.csv")])
        assert rc == 2

    def test_config_file_supplies_parameters(self, tmp_path):
        write_track_csv(tmp_path / "circle.csv", circle_track())
        (tmp_path / "params.txt").write_text(
            "track.closed = true\nlimits.v_max = 3.0\n")
        rc = main(["optimize-raceline", str(tmp_path / "circle.csv"),
                   "--config", str(tmp_path / "params.txt"),
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 0
        raceline = read_raceline_csv(tmp_path / "out" / "raceline.csv",
                                     closed=True)
        assert raceline.v.max() <= 3.0

    def test_unknown_config_key_exits_2(self, tmp_path):
        write_track_csv(tmp_path / "circle.csv", circle_track())
        rc = main(["optimize-raceline", str(tmp_path / "circle.csv"),
                   "--set", "what.is.this=1"])
        assert rc == 2

    def test_repeat_runs_byte_identical(self, tmp_path):
        write_track_csv(tmp_path / "circle.csv", circle_track())
        for out in ("a", "b"):
            rc = main(["optimize-raceline", str(tmp_path / "circle.csv"),
                       "--out-dir", str(tmp_path / out),
                       "--set", "track.closed=true"])
            assert rc == 0
        assert (tmp_path / "a" / "raceline.csv").read_bytes() == \
            (tmp_path / "b" / "raceline.csv").read_bytes()
        assert (tmp_path / "a" / "report.json").read_bytes() == \
            (tmp_path / "b" / "report.json").read_bytes()


class TestLocalize:
    HEADER = ("t_s,lat_rad,lon_rad,gnss_valid,gnss_var_m2,"
              "imu_yaw_rad,imu_yaw_var_rad2,v_mps,omega_radps\n")

    def test_straight_noiseless_replay(self, tmp_path):
        origin = GeoFix(0.7, -1.3)
        lines = [self.HEADER]
        for k in range(51):
            t = k * 0.1
            fix = local_to_geo(LocalPoint(2.0 * t, 0.0), origin)
            lines.append(f"{t!r},{fix.lat!r},{fix.lon!r},1,0.0,0.0,0.0,2.0,0.0\n")
        (tmp_path / "replay.csv").write_text("".join(lines))
        rc = main(["localize", str(tmp_path / "replay.csv"),
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 0
        rows = (tmp_path / "out" / "poses.csv").read_text().splitlines()
        assert rows[0] == "t_s,x_m,y_m,psi_rad,cov_xx,cov_yy,cov_pp"
        last = [float(v) for v in rows[-1].split(",")]
        assert last[1] == pytest.approx(2.0 * 5.0, abs=1e-6)
        assert last[2] == pytest.approx(0.0, abs=1e-6)

    def test_empty_replay_exits_2(self, tmp_path):
        (tmp_path / "replay.csv").write_text("")
        rc = main(["localize", str(tmp_path / "replay.csv")])
        assert rc == 2

    def test_nonmonotone_exits_2(self, tmp_path):
        (tmp_path / "replay.csv").write_text(
            self.HEADER + "1.0,0,0,1,0,0,0,0,0\n0.5,0,0,1,0,0,0,0,0\n")
        rc = main(["localize", str(tmp_path / "replay.csv")])
        assert rc == 2


class TestPerceive:
    def test_synthetic_scene_produces_scan(self, tmp_path):
        track = straight_track(n=30, spacing=2.0, width=3.0)
        bev = BevConfig()
        sampler = TrackSampler(track)
        h = default_camera_homography(bev)
        pose = VehicleState(x=30.0, y=0.0, psi=0.0)
        img = render_scene(sampler, pose, h, 320, 240, bev)
        write_ppm(tmp_path / "scene.ppm", img)
        write_homography(tmp_path / "h.txt", h)
        rc = main(["perceive", str(tmp_path / "scene.ppm"),
                   str(tmp_path / "h.txt"), "--debug",
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 0
        scan = read_scan_csv(tmp_path / "out" / "scan.csv")
        assert len(scan.distances) == 361
        # side boundaries sit w = 3.0 m to each side of the centerline
        assert scan.distances[0] == pytest.approx(3.0, abs=0.25)
        assert scan.distances[360] == pytest.approx(3.0, abs=0.25)
        mask = read_pgm(tmp_path / "out" / "mask.pgm")
        bev_mask = read_pgm(tmp_path / "out" / "bev.pgm")
        assert mask.shape == (240, 320)
        assert bev_mask.shape == (bev.height, bev.width)

    def test_all_track_image_all_max_range(self, tmp_path):
        img = np.empty((240, 320, 3), dtype=np.uint8)
        img[...] = (120, 120, 120)
        write_ppm(tmp_path / "scene.ppm", img)
        write_homography(tmp_path / "h.txt",
                         default_camera_homography(BevConfig()))
        rc = main(["perceive", str(tmp_path / "scene.ppm"),
                   str(tmp_path / "h.txt"), "--out-dir", str(tmp_path / "out")])
        assert rc == 0
        scan = read_scan_csv(tmp_path / "out" / "scan.csv")
        np.testing.assert_array_equal(scan.distances,
                                      BevConfig().max_range)

    def test_row_count_matches_half_degree_resolution(self, tmp_path):
        img = np.zeros((60, 80, 3), dtype=np.uint8)
        write_ppm(tmp_path / "scene.ppm", img)
        write_homography(tmp_path / "h.txt", np.eye(3))
        rc = main(["perceive", str(tmp_path / "scene.ppm"),
                   str(tmp_path / "h.txt"), "--out-dir", str(tmp_path / "out")])
        assert rc == 0
        lines = (tmp_path / "out" / "scan.csv").read_text().splitlines()
        assert len(lines) == 362  # header + 361 rays

    def test_malformed_ppm_exits_2(self, tmp_path):
        (tmp_path / "scene.ppm").write_bytes(b"P6\n4 4\n255\nxx")
        write_homography(tmp_path / "h.txt", np.eye(3))
        rc = main(["perceive", str(tmp_path / "scene.ppm"),
                   str(tmp_path / "h.txt")])
        assert rc == 2

    def test_bad_homography_file_exits_2(self, tmp_path):
        img = np.zeros((10, 10, 3), dtype=np.uint8)
        write_ppm(tmp_path / "scene.ppm", img)
        (tmp_path / "h.txt").write_text("1 2 3\n")
        rc = main(["perceive", str(tmp_path / "scene.ppm"),
                   str(tmp_path / "h.txt")])
        assert rc == 2


class TestSimulate:
    def _write_oval(self, tmp_path, extra=""):
        write_track_csv(tmp_path / "oval.csv", oval_track())
        (tmp_path / "scenario.txt").write_text(
            "mode = pursuit\ntrack = oval.csv\ntrack.closed = true\n"
            "duration_s = 45\nseed = 7\n" + extra)

    def test_pursuit_fixture_exits_0(self, tmp_path):
        self._write_oval(tmp_path)
        rc = main(["simulate", str(tmp_path / "scenario.txt"),
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["boundary_violations"] == 0
        assert (tmp_path / "out" / "poses.csv").exists()
        assert (tmp_path / "out" / "commands.csv").exists()
        assert (tmp_path / "out" / "frames.csv").exists()

    def test_ftg_fixture_exits_0(self, tmp_path):
        write_track_csv(tmp_path / "oval.csv", oval_track(width=4.0))
        (tmp_path / "s.txt").write_text(
            "mode = ftg\ntrack = oval.csv\ntrack.closed = true\n"
            "duration_s = 8\nseed = 3\n")
        rc = main(["simulate", str(tmp_path / "s.txt"),
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 0
        assert (tmp_path / "out" / "scans.csv").exists()

    def test_missing_track_exits_2(self, tmp_path):
        (tmp_path / "s.txt").write_text(
            "mode = pursuit\ntrack = missing.csv\nduration_s = 1\n")
        rc = main(["simulate", str(tmp_path / "s.txt")])
        assert rc == 2

    def test_missing_scenario_exits_2(self, tmp_path):
        rc = main(["simulate", str(tmp_path / "nope.txt")])
        assert rc == 2

    def test_unknown_override_exits_2(self, tmp_path):
        self._write_oval(tmp_path)
        rc = main(["simulate", str(tmp_path / "scenario.txt"),
                   "--set", "bogus.key=1"])
        assert rc == 2

    def test_seed_flag_changes_noise_but_stays_deterministic(self, tmp_path):
        self._write_oval(tmp_path)
        out1, out2, out3 = (tmp_path / n for n in ("o1", "o2", "o3"))
        for out, seed in ((out1, "1"), (out2, "1"), (out3, "2")):
            rc = main(["simulate", str(tmp_path / "scenario.txt"),
                       "--seed", seed, "--out-dir", str(out)])
            assert rc == 0
        a = (out1 / "poses.csv").read_text()
        b = (out2 / "poses.csv").read_text()
        c = (out3 / "poses.csv").read_text()
        assert a == b
        assert a != c

    def test_set_override_applies(self, tmp_path):
        self._write_oval(tmp_path)
        rc = main(["simulate", str(tmp_path / "scenario.txt"),
                   "--set", "duration_s=2",
                   "--out-dir", str(tmp_path / "out")])
        # too short for a lap but clean exit
        assert rc == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["lap_time_s"] is None
        assert report["duration_s"] == 2.0


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        write_track_csv(tmp_path / "line.csv", straight_track(n=20))
        proc = subprocess.run(
            [sys.executable, "-m", "gokart.cli", "optimize-raceline",
             str(tmp_path / "line.csv"), "--out-dir", str(tmp_path / "out"),
             "--set", "track.closed=false"],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert "raceline" in proc.stdout

    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["no-such-command"])
        assert exc.value.code == 2
