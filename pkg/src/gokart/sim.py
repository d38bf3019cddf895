"""Closed-loop simulation: kinematic bicycle vehicle, GNSS/IMU emulation,
synthetic track scenes for the vision pipeline, and the fixed-step runner
wiring controller -> drive bus -> vehicle -> sensors.

Everything is deterministic given the scenario seed: identical scenarios
produce bit-identical logs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .control import (EndOfRaceline, PursuitParams, PursuitState, VehiclePose,
                      pursuit_step)
from .drivebus import (CanBus, DriveCommand, EBS_FEEDBACK_ID, Mode,
                       ModeArbiter, SBWS_FEEDBACK_ID, SubsystemFeedback,
                       TBWS_FEEDBACK_ID, ThrottleEcu, apply_feedback,
                       COMMAND_FRAME_ID, decode_command, ebs_step,
                       encode_command, encode_feedback, format_trace_row,
                       sbws_step)
from .geometry import body_to_world, normalize_angle, polyline_distance
from .localization import (EkfParams, EkfState, GeoFix, ImuReading, LocalPoint,
                           MotionInput, fuse_step, local_to_geo,
                           project_to_local)
from .perception import (BevConfig, GRASS_RGB, PerceptionConfig, SKY_RGB,
                         TRACK_RGB, apply_homography, detect_boundaries,
                         homography_from_points)
from .planning import FtgParams, ftg_step
from .track import (Raceline, Track, VehicleLimits, build_raceline, fit_spline,
                    optimize_min_curvature, read_raceline_csv, read_track_csv)


class ScenarioError(ValueError):
    """A scenario file or override set is invalid."""


@dataclass
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    v: float = 0.0

    def __post_init__(self):
        self.psi = normalize_angle(self.psi)
        if self.v < 0.0:
            raise ValueError("speed must be >= 0")


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 1.05
    v_time_constant: float = 1.0
    max_speed: float = 8.0

    def __post_init__(self):
        if min(self.wheelbase, self.v_time_constant, self.max_speed) <= 0.0:
            raise ValueError("vehicle parameters must be positive")


@dataclass(frozen=True)
class SensorConfig:
    gnss_sigma: float = 0.02
    gnss_rate: float = 10.0
    gnss_dropout_windows: tuple = ()
    imu_sigma_yaw: float = 0.01
    imu_sigma_rate: float = 0.0
    imu_rate: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.gnss_rate <= 0.0 or self.imu_rate <= 0.0:
            raise ValueError("sensor rates must be > 0")
        if min(self.gnss_sigma, self.imu_sigma_yaw, self.imu_sigma_rate) < 0.0:
            raise ValueError("noise sigmas must be >= 0")


def bicycle_step(state: VehicleState, steering: float, speed_cmd: float,
                 brake: float, params: VehicleParams, dt: float) -> VehicleState:
    """Advance the kinematic bicycle one step with RK4.

    Speed relaxes first-order toward the commanded speed scaled down by the
    brake fraction; heading rate is (v / wheelbase) tan(steering).
    """
    if not 0.0 < dt <= 0.05:
        raise ValueError("dt must lie in (0, 0.05]")
    v_target = min(max(speed_cmd, 0.0), params.max_speed)
    v_target *= 1.0 - min(max(brake, 0.0), 1.0)
    tan_d = math.tan(steering)

    def deriv(s):
        x, y, psi, v = s
        return np.array([
            v * math.cos(psi),
            v * math.sin(psi),
            v / params.wheelbase * tan_d,
            (v_target - v) / params.v_time_constant,
        ])

    s0 = np.array([state.x, state.y, state.psi, state.v])
    k1 = deriv(s0)
    k2 = deriv(s0 + 0.5 * dt * k1)
    k3 = deriv(s0 + 0.5 * dt * k2)
    k4 = deriv(s0 + dt * k3)
    s1 = s0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return VehicleState(x=float(s1[0]), y=float(s1[1]),
                        psi=normalize_angle(float(s1[2])),
                        v=float(min(max(s1[3], 0.0), params.max_speed)))


class GnssSimulator:
    """Noisy GNSS with scripted dropout windows; deterministic from the seed."""

    def __init__(self, config: SensorConfig, origin: GeoFix,
                 earth_radius: float):
        self.config = config
        self.origin = origin
        self.earth_radius = earth_radius
        self._rng = np.random.default_rng([config.seed, 0])

    def sample(self, state: VehicleState, t: float) -> GeoFix | None:
        for start, end in self.config.gnss_dropout_windows:
            if start <= t <= end:
                return None
        nx, ny = self._rng.normal(0.0, self.config.gnss_sigma, size=2)
        return local_to_geo(LocalPoint(state.x + nx, state.y + ny),
                            self.origin, self.earth_radius,
                            pos_variance=self.config.gnss_sigma ** 2)


class ImuSimulator:
    """Absolute yaw plus yaw rate with Gaussian noise; deterministic from seed."""

    def __init__(self, config: SensorConfig):
        self.config = config
        self._rng = np.random.default_rng([config.seed, 1])

    def sample(self, state: VehicleState, omega_true: float,
               t: float) -> ImuReading:
        ny = self._rng.normal(0.0, self.config.imu_sigma_yaw)
        nr = self._rng.normal(0.0, self.config.imu_sigma_rate)
        return ImuReading(yaw=normalize_angle(state.psi + ny),
                          yaw_rate=omega_true + nr,
                          yaw_variance=self.config.imu_sigma_yaw ** 2)


class TrackSampler:
    """Dense geometric view of a track for inside tests and boundary margins."""

    def __init__(self, track: Track, step: float = 0.1):
        sp = fit_spline(track.xy, track.closed)
        count = max(int(math.ceil(sp.t_max / step)), 4 * len(track))
        if track.closed:
            t = np.linspace(0.0, sp.t_max, count, endpoint=False)
        else:
            t = np.linspace(0.0, sp.t_max, count)
        self.points = sp.point(t)
        d1 = sp.derivative(t, 1)
        norm = np.hypot(d1[:, 0], d1[:, 1])
        self.tangents = d1 / norm[:, None]
        knots = sp.t_knots
        if track.closed:
            knots = np.append(knots, sp.t_max)
            w_left = np.append(track.w_left, track.w_left[0])
            w_right = np.append(track.w_right, track.w_right[0])
        else:
            w_left, w_right = track.w_left, track.w_right
        self.w_left = np.interp(t, knots, w_left)
        self.w_right = np.interp(t, knots, w_right)
        self.closed = track.closed
        self.arc = t
        self.length = sp.t_max
        self._tree = cKDTree(self.points)

    def lateral_margin(self, pts: np.ndarray) -> np.ndarray:
        """Distance to the nearest boundary, positive inside the track."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        _, idx = self._tree.query(pts)
        d = pts - self.points[idx]
        tx, ty = self.tangents[idx, 0], self.tangents[idx, 1]
        lat = tx * d[:, 1] - ty * d[:, 0]
        lon = tx * d[:, 0] + ty * d[:, 1]
        margin = np.minimum(self.w_left[idx] - lat, self.w_right[idx] + lat)
        if not self.closed:
            margin = np.where((idx == 0) & (lon < 0.0),
                              np.minimum(margin, lon), margin)
            last = len(self.points) - 1
            margin = np.where((idx == last) & (lon > 0.0),
                              np.minimum(margin, -lon), margin)
        return margin

    def inside(self, pts: np.ndarray) -> np.ndarray:
        return self.lateral_margin(pts) >= 0.0


def bev_grass_mask(sampler: TrackSampler, pose: VehicleState,
                   bev: BevConfig) -> np.ndarray:
    """Ground-truth top-down grass mask (1 = grass) in the vehicle frame."""
    vx, vy = bev.origin_px()
    cols, rows = np.meshgrid(np.arange(bev.width), np.arange(bev.height))
    forward = (vy - rows) * bev.meters_per_px
    left = (vx - cols) * bev.meters_per_px
    body = np.stack([forward, left], axis=-1)
    world = body_to_world(pose.x, pose.y, pose.psi, body)
    inside = sampler.inside(world.reshape(-1, 2)).reshape(bev.height, bev.width)
    return (~inside).astype(np.uint8)


def render_scene(track, pose: VehicleState, h: np.ndarray, front_width: int,
                 front_height: int, bev: BevConfig) -> np.ndarray:
    """Synthetic front-view camera image of the track scene.

    Builds the ground-truth BEV (grass vs track surface) at the pose, then
    inverse-warps it through the camera homography `h` (front px -> BEV px).
    Front pixels that look above the mapped ground plane get a sky color that
    the grass threshold rejects.
    """
    sampler = track if isinstance(track, TrackSampler) else TrackSampler(track)
    grass = bev_grass_mask(sampler, pose, bev)
    bev_img = np.where(grass[..., None].astype(bool),
                       np.array(GRASS_RGB, dtype=np.uint8),
                       np.array(TRACK_RGB, dtype=np.uint8))
    cols, rows = np.meshgrid(np.arange(front_width), np.arange(front_height))
    src = apply_homography(h, np.stack([cols, rows], axis=-1).astype(float))
    sc = np.rint(src[..., 0]).astype(int)
    sr = np.rint(src[..., 1]).astype(int)
    valid = (sc >= 0) & (sc < bev.width) & (sr >= 0) & (sr < bev.height)
    img = np.empty((front_height, front_width, 3), dtype=np.uint8)
    img[...] = np.array(SKY_RGB, dtype=np.uint8)
    img[valid] = bev_img[sr[valid], sc[valid]]
    return img


def default_camera_homography(bev: BevConfig, front_width: int = 320,
                              front_height: int = 240) -> np.ndarray:
    """Synthetic fixed camera: front px -> BEV px.

    Maps a trapezoid spanning the front image onto the full BEV frame (the
    image bottom edge is the near ground, a narrower top band is the far
    edge), so every BEV pixel is observed and the far field compresses the
    way a forward camera would.
    """
    w, h = float(front_width - 1), float(front_height - 1)
    src = [(0.0, h), (w, h), (0.75 * w, 0.0), (0.25 * w, 0.0)]
    dst = [(0.0, bev.height - 1.0), (bev.width - 1.0, bev.height - 1.0),
           (bev.width - 1.0, 0.0), (0.0, 0.0)]
    return homography_from_points(src, dst)


# --- scenario configuration --------------------------------------------------

@dataclass
class ScenarioConfig:
    mode: str = "pursuit"
    track: str | None = None
    raceline: str | None = None
    track_closed: bool = True
    vehicle_half_width: float = 0.4
    duration_s: float = 20.0
    seed: int = 0
    dt: float = 0.01
    controller_rate_hz: float = 20.0
    perception_rate_hz: float = 10.0
    command_rate_hz: float = 50.0
    spacing_m: float = 1.0
    origin_lat: float = 0.7
    origin_lon: float = -1.3
    kill_at_s: float | None = None
    opt_reg: float = 1e-6
    opt_max_iters: int = 5000
    front_width: int = 320
    front_height: int = 240
    limits: VehicleLimits = field(default_factory=VehicleLimits)
    pursuit: PursuitParams = field(default_factory=PursuitParams)
    ftg: FtgParams = field(default_factory=FtgParams)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    sensors: SensorConfig = field(default_factory=SensorConfig)
    ekf: EkfParams = field(default_factory=EkfParams)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    bev: BevConfig = field(default_factory=BevConfig)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_windows(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    windows = []
    for part in text.split(";"):
        try:
            start, end = part.split(":")
            windows.append((float(start), float(end)))
        except ValueError:
            raise ValueError(f"bad dropout window {part!r}; expected start:end") from None
    return tuple(windows)


def _parse_optional_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


# key -> (target section or None for top level, attribute, caster)
_SCENARIO_KEYS = {
    "mode": (None, "mode", str),
    "track": (None, "track", str),
    "raceline": (None, "raceline", str),
    "duration_s": (None, "duration_s", float),
    "seed": (None, "seed", int),
    "dt": (None, "dt", float),
    "spacing_m": (None, "spacing_m", float),
    "kill_at_s": (None, "kill_at_s", _parse_optional_float),
    "origin_lat": (None, "origin_lat", float),
    "origin_lon": (None, "origin_lon", float),
    "track.closed": (None, "track_closed", _parse_bool),
    "track.vehicle_half_width": (None, "vehicle_half_width", float),
    "rates.controller_hz": (None, "controller_rate_hz", float),
    "rates.perception_hz": (None, "perception_rate_hz", float),
    "rates.command_hz": (None, "command_rate_hz", float),
    "opt.reg": (None, "opt_reg", float),
    "opt.max_iters": (None, "opt_max_iters", int),
    "front.width": (None, "front_width", int),
    "front.height": (None, "front_height", int),
    "limits.a_lat_max": ("limits", "a_lat_max", float),
    "limits.a_lon_max": ("limits", "a_lon_max", float),
    "limits.v_max": ("limits", "v_max", float),
    "pursuit.l_min": ("pursuit", "l_min", float),
    "pursuit.l_max": ("pursuit", "l_max", float),
    "pursuit.v_max": ("pursuit", "v_max", float),
    "pursuit.kp": ("pursuit", "kp", float),
    "pursuit.kd": ("pursuit", "kd", float),
    "pursuit.delta_max": ("pursuit", "delta_max", float),
    "ftg.epsilon": ("ftg", "epsilon", float),
    "ftg.v_min": ("ftg", "v_min", float),
    "ftg.v_max": ("ftg", "v_max", float),
    "ftg.delta_max": ("ftg", "delta_max", float),
    "ftg.law": ("ftg", "law", str),
    "vehicle.wheelbase": ("vehicle", "wheelbase", float),
    "vehicle.v_time_constant": ("vehicle", "v_time_constant", float),
    "vehicle.max_speed": ("vehicle", "max_speed", float),
    "sensors.gnss_sigma": ("sensors", "gnss_sigma", float),
    "sensors.gnss_rate": ("sensors", "gnss_rate", float),
    "sensors.gnss_dropout": ("sensors", "gnss_dropout_windows", _parse_windows),
    "sensors.imu_sigma_yaw": ("sensors", "imu_sigma_yaw", float),
    "sensors.imu_sigma_rate": ("sensors", "imu_sigma_rate", float),
    "sensors.imu_rate": ("sensors", "imu_rate", float),
    "sensors.seed": ("sensors", "seed", int),
    "ekf.process_noise_scale": ("ekf", "process_noise_scale", float),
    "ekf.earth_radius": ("ekf", "earth_radius", float),
    "perception.tau": ("perception", "tau", float),
    "perception.blur_sigma": ("perception", "blur_sigma", float),
    "perception.morph_radius": ("perception", "morph_radius", int),
    "bev.width": ("bev", "width", int),
    "bev.height": ("bev", "height", int),
    "bev.meters_per_px": ("bev", "meters_per_px", float),
    "bev.max_range": ("bev", "max_range", float),
}

_PATH_KEYS = ("track", "raceline")


def parse_scenario_text(text: str) -> dict[str, str]:
    """Parse the flat key=value scenario format into a raw string mapping."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ScenarioError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def build_scenario(raw: dict[str, str], base_dir: Path | None = None) -> ScenarioConfig:
    """Typed scenario from raw strings; unknown keys are rejected."""
    sections: dict[str, dict] = {}
    top: dict = {}
    explicit_sensor_seed = "sensors.seed" in raw
    for key, value in raw.items():
        if key not in _SCENARIO_KEYS:
            raise ScenarioError(f"unknown scenario key {key!r}")
        section, attr, caster = _SCENARIO_KEYS[key]
        try:
            parsed = caster(value)
        except ValueError as exc:
            raise ScenarioError(f"bad value for {key}: {exc}") from None
        if section is None:
            top[attr] = parsed
        else:
            sections.setdefault(section, {})[attr] = parsed
    if base_dir is not None:
        for key in _PATH_KEYS:
            if top.get(key):
                top[key] = str((Path(base_dir) / top[key]).resolve())
    try:
        cfg = ScenarioConfig(**top)
        for section, kwargs in sections.items():
            setattr(cfg, section, replace(getattr(cfg, section), **kwargs))
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None
    if cfg.mode not in ("pursuit", "ftg"):
        raise ScenarioError(f"mode must be pursuit or ftg, got {cfg.mode!r}")
    if not explicit_sensor_seed:
        cfg.sensors = replace(cfg.sensors, seed=cfg.seed)
    return cfg


def load_scenario(path, overrides: dict[str, str] | None = None) -> ScenarioConfig:
    path = Path(path)
    raw = parse_scenario_text(path.read_text())
    if overrides:
        raw.update(overrides)
    return build_scenario(raw, base_dir=path.parent)


# --- closed loop -------------------------------------------------------------

@dataclass
class RunReport:
    mode: str
    duration_s: float
    ticks: int
    lap_time_s: float | None
    max_cross_track_error_m: float
    mean_abs_cross_track_error_m: float
    boundary_violations: int
    safety_stops: int
    logs: dict[str, str]

    def to_json(self) -> str:
        payload = {
            "mode": self.mode,
            "duration_s": self.duration_s,
            "ticks": self.ticks,
            "lap_time_s": self.lap_time_s,
            "max_cross_track_error_m": self.max_cross_track_error_m,
            "mean_abs_cross_track_error_m": self.mean_abs_cross_track_error_m,
            "boundary_violations": self.boundary_violations,
            "safety_stops": self.safety_stops,
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def _interval(rate_hz: float, dt: float) -> int:
    return max(1, int(round(1.0 / (rate_hz * dt))))


def prepare_raceline(track: Track, scenario: ScenarioConfig) -> Raceline:
    """The raceline a pursuit scenario tracks: loaded if given, otherwise
    optimized from the track centerline."""
    if scenario.raceline:
        return read_raceline_csv(scenario.raceline, closed=scenario.track_closed)
    alpha = optimize_min_curvature(track, reg=scenario.opt_reg,
                                   max_iters=scenario.opt_max_iters)
    return build_raceline(track, alpha, scenario.limits, scenario.spacing_m)


def run_closed_loop(scenario: ScenarioConfig) -> RunReport:
    """Run one scenario to completion and report tracking quality.

    Physics steps at 1/dt Hz; the controller, perception, and the command
    bus run at their own divisors. Commands travel encoder -> CAN frame ->
    decoder so the wire quantization is part of the loop.
    """
    if scenario.track is None:
        raise ScenarioError("scenario needs a track file")
    track = read_track_csv(scenario.track, scenario.track_closed,
                           scenario.vehicle_half_width)
    sampler = TrackSampler(track)
    if scenario.mode == "pursuit":
        raceline = prepare_raceline(track, scenario)
        ref_xy, ref_s = raceline.xy, raceline.s
        ref_len, ref_closed = raceline.length, raceline.closed
    else:
        raceline = None
        ref_xy, ref_s = sampler.points, sampler.arc
        ref_len, ref_closed = sampler.length, sampler.closed

    heading0 = math.atan2(ref_xy[1, 1] - ref_xy[0, 1],
                          ref_xy[1, 0] - ref_xy[0, 0])
    truth = VehicleState(x=float(ref_xy[0, 0]), y=float(ref_xy[0, 1]),
                         psi=heading0, v=0.0)

    origin = GeoFix(scenario.origin_lat, scenario.origin_lon)
    gnss_sim = GnssSimulator(scenario.sensors, origin,
                             scenario.ekf.earth_radius)
    imu_sim = ImuSimulator(scenario.sensors)

    dt = scenario.dt
    ticks = int(round(scenario.duration_s / dt))
    ctrl_every = _interval(scenario.controller_rate_hz, dt)
    perc_every = _interval(scenario.perception_rate_hz, dt)
    mcs_every = _interval(scenario.command_rate_hz, dt)
    gnss_every = _interval(scenario.sensors.gnss_rate, dt)
    imu_every = _interval(scenario.sensors.imu_rate, dt)

    camera_h = None
    if scenario.mode == "ftg":
        camera_h = default_camera_homography(scenario.bev, scenario.front_width,
                                             scenario.front_height)

    ekf_state: EkfState | None = None
    pursuit_state = PursuitState()
    arbiter = ModeArbiter()
    throttle = ThrottleEcu()
    bus = CanBus()
    feedback = SubsystemFeedback()
    delta_act = 0.0
    pressure = 0.0
    cmd_seq = 0
    fb_seq = 0
    pending_cmd: DriveCommand | None = None
    active = DriveCommand(mode=Mode.AUTONOMOUS)

    pose_rows = ["t_s,x_m,y_m,psi_rad,v_mps,est_x_m,est_y_m,est_psi_rad,cross_track_m"]
    command_rows = ["t_s,steering_rad,speed_mps,gap_i,gap_j"]
    frame_rows = ["t_s,id_hex,payload_hex"]
    scan_rows = ["t_s,angle_rad,distance_m"]

    errors: list[float] = []
    boundary_violations = 0
    was_outside = False
    safety_stops = 0
    ended = False
    lap_time: float | None = None
    progress = 0.0
    s_prev: float | None = None

    for k in range(ticks):
        t = k * dt
        kill_active = scenario.kill_at_s is not None and t >= scenario.kill_at_s
        omega_true = truth.v / scenario.vehicle.wheelbase * math.tan(delta_act)

        gnss = gnss_sim.sample(truth, t) if k % gnss_every == 0 else None
        if k % imu_every == 0:
            imu = imu_sim.sample(truth, omega_true, t)
            if ekf_state is None:
                if gnss is not None:
                    p = project_to_local(gnss, origin, scenario.ekf.earth_radius)
                    ekf_state = EkfState.initial(p.x, p.y, imu.yaw)
            else:
                u = MotionInput(v=feedback.measured_speed, omega=imu.yaw_rate,
                                dt=imu_every * dt)
                ekf_state = fuse_step(ekf_state, u, gnss, imu, origin,
                                      scenario.ekf)

        if ekf_state is not None and k % ctrl_every == 0 and not ended:
            if scenario.mode == "pursuit":
                pose = VehiclePose(x=float(ekf_state.mean[0]),
                                   y=float(ekf_state.mean[1]),
                                   psi=float(ekf_state.mean[2]),
                                   v=feedback.measured_speed)
                try:
                    cmd = pursuit_step(raceline, pose, pursuit_state,
                                       scenario.pursuit, ctrl_every * dt)
                    pending_cmd = DriveCommand(steering=cmd.steering,
                                               speed=cmd.target_speed,
                                               mode=Mode.AUTONOMOUS)
                    command_rows.append(
                        f"{t!r},{cmd.steering!r},{cmd.target_speed!r},,")
                except EndOfRaceline:
                    ended = True
                    safety_stops += 1
                    pending_cmd = DriveCommand(mode=Mode.AUTONOMOUS)
                    command_rows.append(f"{t!r},0.0,0.0,,")
            elif k % perc_every == 0:
                img = render_scene(sampler, truth, camera_h,
                                   scenario.front_width, scenario.front_height,
                                   scenario.bev)
                scan, _, _ = detect_boundaries(img, camera_h,
                                               scenario.perception, scenario.bev)
                for a, d in zip(scan.angles, scan.distances):
                    scan_rows.append(f"{t!r},{a!r},{d!r}")
                fcmd = ftg_step(scan, scenario.ftg)
                if fcmd.safety_stop:
                    safety_stops += 1
                    pending_cmd = DriveCommand(mode=Mode.AUTONOMOUS)
                    command_rows.append(f"{t!r},0.0,0.0,,")
                else:
                    pending_cmd = DriveCommand(steering=fcmd.steering,
                                               speed=fcmd.speed,
                                               mode=Mode.AUTONOMOUS)
                    command_rows.append(
                        f"{t!r},{fcmd.steering!r},{fcmd.speed!r},"
                        f"{fcmd.chosen_gap.i},{fcmd.chosen_gap.j}")

        if k % mcs_every == 0:
            arbitrated = arbiter.step(t, Mode.AUTONOMOUS,
                                      autonomous=pending_cmd, kill=kill_active)
            pending_cmd = None
            frame = encode_command(arbitrated, cmd_seq)
            cmd_seq += 1
            bus.send(frame)
            frame_rows.append(",".join(format_trace_row(t, frame)))
            for delivered in bus.deliver():
                if delivered.can_id == COMMAND_FRAME_ID:
                    active = decode_command(delivered)
                else:
                    feedback = apply_feedback(feedback, delivered)

        duty = throttle.step(active.speed, truth.v, dt)
        if kill_active or active.kill:
            duty = 0.0  # hardware kill cuts motor power independent of the ECU
        delta_act = sbws_step(active.steering, delta_act, dt)
        pressure = ebs_step(active.brake, pressure, dt)
        truth = bicycle_step(truth, delta_act, duty * scenario.vehicle.max_speed,
                             pressure, scenario.vehicle, dt)

        for can_id, value in ((TBWS_FEEDBACK_ID, truth.v),
                              (SBWS_FEEDBACK_ID, delta_act),
                              (EBS_FEEDBACK_ID, pressure)):
            fb_frame = encode_feedback(can_id, value, fb_seq)
            bus.send(fb_frame)
            frame_rows.append(",".join(format_trace_row(t, fb_frame)))
        fb_seq += 1

        pos = np.array([truth.x, truth.y])
        cross = polyline_distance(ref_xy, pos, closed=ref_closed)
        errors.append(cross)
        margin = float(sampler.lateral_margin(pos[None, :])[0])
        outside = margin < 0.0
        if outside and not was_outside:
            boundary_violations += 1
        was_outside = outside

        near = int(np.argmin(np.hypot(ref_xy[:, 0] - truth.x,
                                      ref_xy[:, 1] - truth.y)))
        s_here = float(ref_s[near])
        if s_prev is not None:
            ds = s_here - s_prev
            if ref_closed:
                ds = (ds + 0.5 * ref_len) % ref_len - 0.5 * ref_len
            progress += ds
        s_prev = s_here
        if lap_time is None and progress >= ref_len:
            lap_time = t

        if ekf_state is not None:
            est = (f"{float(ekf_state.mean[0])!r},{float(ekf_state.mean[1])!r},"
                   f"{float(ekf_state.mean[2])!r}")
        else:
            est = "nan,nan,nan"
        pose_rows.append(f"{t!r},{truth.x!r},{truth.y!r},{truth.psi!r},"
                         f"{truth.v!r},{est},{cross!r}")

    logs = {
        "poses.csv": "\n".join(pose_rows) + "\n",
        "commands.csv": "\n".join(command_rows) + "\n",
        "frames.csv": "\n".join(frame_rows) + "\n",
    }
    if scenario.mode == "ftg":
        logs["scans.csv"] = "\n".join(scan_rows) + "\n"
    return RunReport(
        mode=scenario.mode,
        duration_s=scenario.duration_s,
        ticks=ticks,
        lap_time_s=lap_time,
        max_cross_track_error_m=float(max(errors)) if errors else 0.0,
        mean_abs_cross_track_error_m=float(np.mean(errors)) if errors else 0.0,
        boundary_violations=boundary_violations,
        safety_stops=safety_stops,
        logs=logs,
    )
