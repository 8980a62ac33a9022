"""Deterministic closed-loop simulator for the whole transfer pipeline.

One logical control loop at control_rate wires the stages together:
the newest observation is mapped to link goals, the wrist goal passes
through the admittance filter (stepped at the force sampling rate and
held in between), the task stack resolves joint velocities, and the
joints integrate under velocity and position clamps. The base runs its
own go-to controller against the mapped person footprint. The robot is
purely kinematic; actuator dynamics appear only as the velocity clamp.

Everything is a pure function of the configuration and the observation
sequence, so two runs produce bit-identical traces.
"""

from __future__ import annotations

import bisect
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .admittance import (
    AdmittanceController,
    AdmittanceParams,
    StabilityMonitor,
    Wrench,
)
from .base import (
    BaseCommand,
    BaseParams,
    BasePose,
    imitation_command,
    init_offset,
    relative_transform,
    step_base,
)
from .geom import Rotation, Transform
from .model import RobotModel, forward_kinematics, load_default_model
from .retarget import (
    CorrespondenceConfig,
    DegenerateObservationError,
    GoalSet,
    MissingSegmentError,
    Observation,
    calibrate,
    map_pose,
)
from .stream import SpiralParams, StaticParams, WalkParams, synth
from .wbc import default_stack, solve_stack

__all__ = [
    "WrenchEvent",
    "SimConfig",
    "SimTrace",
    "scripted_wrench",
    "elbow_angle",
    "run",
    "metrics",
    "example_configuration",
    "example_pair",
    "make_correspondence",
    "scenario",
    "SCENARIO_NAMES",
]


@dataclass(frozen=True)
class WrenchEvent:
    """External wrench applied over [start, stop) seconds."""

    start: float
    stop: float
    force: tuple = (0.0, 0.0, 0.0)
    torque: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.stop)):
            raise ValueError("event times must be finite")
        if not 0.0 <= self.start < self.stop:
            raise ValueError("event needs 0 <= start < stop")
        values = np.r_[np.asarray(self.force, float).reshape(3),
                       np.asarray(self.torque, float).reshape(3)]
        if not np.all(np.isfinite(values)):
            raise ValueError("event wrench must be finite")


def scripted_wrench(events, t: float) -> Wrench:
    """Sum of all events active at time t."""
    force = np.zeros(3)
    torque = np.zeros(3)
    for event in events:
        if event.start <= t < event.stop:
            force += np.asarray(event.force, dtype=float)
            torque += np.asarray(event.torque, dtype=float)
    return Wrench(force, torque)


@dataclass(frozen=True)
class SimConfig:
    """Everything one run needs besides the observation stream."""

    duration: float
    control_rate: float = 100.0
    force_sample_rate: float = 40.0
    q0: tuple | None = None
    base_start: tuple = (0.0, 0.0, 0.0)
    admittance: AdmittanceParams = field(default_factory=AdmittanceParams)
    base: BaseParams = field(default_factory=BaseParams)
    k_p: float = 5.0
    damping: float = 1e-6
    limit_margin: float = 0.1
    limit_gain: float = 1.0
    collision_threshold: float = 0.05
    collision_gain: float = 1.0
    gap_tolerance: float = 0.25
    wrench_script: tuple = ()
    model: RobotModel | None = None
    correspondence: CorrespondenceConfig | None = None

    def __post_init__(self):
        if not self.duration > 0.0:
            raise ValueError("duration must be positive")
        if not self.force_sample_rate > 0.0:
            raise ValueError("force_sample_rate must be positive")
        if self.control_rate < self.force_sample_rate:
            raise ValueError("control_rate must be >= force_sample_rate")
        if not self.gap_tolerance > 0.0:
            raise ValueError("gap_tolerance must be positive")
        for name in ("k_p", "limit_margin", "limit_gain",
                     "collision_threshold", "collision_gain"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if not self.damping >= 0.0:
            raise ValueError("damping must be non-negative")
        object.__setattr__(self, "wrench_script", tuple(self.wrench_script))
        object.__setattr__(self, "base_start", tuple(self.base_start))
        if self.q0 is not None:
            object.__setattr__(self, "q0",
                               tuple(float(v) for v in self.q0))


@dataclass
class SimTrace:
    """Per-tick record of one run; all arrays share the first axis."""

    t: np.ndarray
    q: np.ndarray
    qdot_cmd: np.ndarray
    qdot: np.ndarray
    ee_goal: np.ndarray
    ee_cmd: np.ndarray
    ee_actual: np.ndarray
    elbow_angle_goal: np.ndarray
    elbow_angle_actual: np.ndarray
    base_pose: np.ndarray
    base_cmd: np.ndarray
    base_error: np.ndarray
    psi: np.ndarray
    alpha: np.ndarray
    k: np.ndarray
    k_dot: np.ndarray
    k_bound: np.ndarray
    deflection: np.ndarray
    deflection_rot: np.ndarray
    wrench: np.ndarray
    force_filtered: np.ndarray
    residuals: np.ndarray
    position_clamps: np.ndarray
    velocity_clamps: np.ndarray
    emergency: np.ndarray
    stability_violation: np.ndarray
    stream_gap: np.ndarray
    degenerate_hold: np.ndarray
    nonfinite_faults: int
    joint_names: tuple
    task_names: tuple

    def __len__(self) -> int:
        return self.t.shape[0]

    def violation_counts(self) -> dict:
        """Counts that gate a run: clamps into hard limits, monitor hits,
        collision emergencies and rejected force samples. Velocity
        clamps are actuator saturation and are reported separately."""
        counts = {
            "position_clamps": int(np.sum(self.position_clamps)),
            "stability": int(np.sum(self.stability_violation)),
            "collision_emergencies": int(np.sum(self.emergency)),
            "nonfinite_faults": int(self.nonfinite_faults),
        }
        counts["total"] = sum(counts.values())
        return counts

    def csv_header(self) -> list:
        cols = ["t"]
        cols += [f"q_{n}" for n in self.joint_names]
        cols += [f"qd_{n}" for n in self.joint_names]
        cols += ["ee_goal_x", "ee_goal_y", "ee_goal_z",
                 "ee_cmd_x", "ee_cmd_y", "ee_cmd_z",
                 "ee_x", "ee_y", "ee_z",
                 "elbow_angle_goal", "elbow_angle",
                 "base_x", "base_y", "base_yaw",
                 "base_v", "base_omega",
                 "base_err_x", "base_err_y", "base_err_yaw",
                 "psi", "alpha", "k", "k_dot", "k_bound",
                 "defl_x", "defl_y", "defl_z",
                 "defl_rx", "defl_ry", "defl_rz",
                 "force_x", "force_y", "force_z", "force_filtered"]
        cols += [f"res_{n}" for n in self.task_names]
        cols += ["position_clamps", "velocity_clamps", "emergency",
                 "stability_violation", "stream_gap", "degenerate_hold"]
        return cols

    def _csv_matrices(self):
        floats = np.hstack([
            self.t[:, None], self.q, self.qdot,
            self.ee_goal, self.ee_cmd, self.ee_actual,
            self.elbow_angle_goal[:, None], self.elbow_angle_actual[:, None],
            self.base_pose, self.base_cmd, self.base_error,
            self.psi[:, None], self.alpha[:, None], self.k[:, None],
            self.k_dot[:, None], self.k_bound[:, None],
            self.deflection, self.deflection_rot,
            self.wrench, self.force_filtered[:, None],
            self.residuals,
        ])
        ints = np.column_stack([
            self.position_clamps, self.velocity_clamps,
            self.emergency.astype(int), self.stability_violation.astype(int),
            self.stream_gap.astype(int), self.degenerate_hold.astype(int),
        ])
        assert floats.shape[1] + ints.shape[1] == len(self.csv_header())
        return floats, ints

    def append_csv_rows(self, fh, start: int = 0) -> int:
        """Write rows start.. as CSV lines; returns the new row count."""
        floats, ints = self._csv_matrices()
        for i in range(start, len(self)):
            row = [format(v, ".17g") for v in floats[i]]
            row += [str(int(v)) for v in ints[i]]
            fh.write(",".join(row) + "\n")
        return len(self)

    def write_csv(self, path) -> None:
        """One row per tick; floats carry full precision for replay diffs."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(self.csv_header()) + "\n")
            self.append_csv_rows(fh)


def elbow_angle(shoulder, elbow, wrist) -> float:
    """Interior angle at the elbow: pi for a straight arm."""
    u = np.asarray(shoulder, float) - np.asarray(elbow, float)
    v = np.asarray(wrist, float) - np.asarray(elbow, float)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < 1e-12 or nv < 1e-12:
        raise ValueError("degenerate elbow geometry")
    c = float(np.dot(u, v)) / (nu * nv)
    return math.acos(min(1.0, max(-1.0, c)))


def _goal_elbow_angle(goals: GoalSet) -> float:
    """The goal set's own elbow angle; the shoulder sits at its origin."""
    return elbow_angle(np.zeros(3), goals.rs_re.translation,
                       goals.rs_rw.translation)


_INT_COLUMNS = ("position_clamps", "velocity_clamps")
_BOOL_COLUMNS = ("emergency", "stability_violation", "stream_gap",
                 "degenerate_hold")


class Simulator:
    """The closed loop, advanced one control tick at a time.

    `run` drives it offline for a fixed tick count; the serve loop feeds
    it datagrams as they arrive and ticks only up to the newest
    observation timestamp, keeping every tick causal. The arithmetic and
    its ordering are identical either way, so replaying the datagrams a
    server consumed reproduces its telemetry.

    The first observation must map cleanly; later degenerate or
    incomplete observations hold the previous goals and set a flag. A
    stream that stops keeps its last observation active and raises the
    gap flag once that observation is older than the gap tolerance.
    """

    def __init__(self, config: SimConfig, first_observation):
        model = (config.model if config.model is not None
                 else load_default_model())
        corr = (config.correspondence if config.correspondence is not None
                else make_correspondence(model))
        self.config = config
        self.model = model
        self.corr = corr

        q = (np.array(config.q0, dtype=float) if config.q0 is not None
             else np.zeros(model.dof))
        if q.shape != (model.dof,):
            raise ValueError(f"q0 needs {model.dof} entries")
        self._q = model.clamp(q)
        self._velocity_limits = model.velocity_limits
        self._dt = 1.0 / config.control_rate
        self._force_dt = 1.0 / config.force_sample_rate

        self._base_pose = BasePose(*config.base_start)
        self._controller = AdmittanceController(config.admittance)
        self._monitor = StabilityMonitor(config.admittance)
        self._stack = default_stack(limit_margin=config.limit_margin,
                                    limit_gain=config.limit_gain,
                                    collision_threshold=config.collision_threshold,
                                    collision_gain=config.collision_gain,
                                    k_p=config.k_p)
        self.task_names = self._stack.names()

        self._current = first_observation
        self._goals = map_pose(first_observation, corr)  # must be valid
        self._person_pf = first_observation.segment("pf", corr.side)
        self._offset = init_offset(self._base_pose.transform(),
                                   self._person_pf.inverse())

        self._pending: list = []
        self._next_force = 0.0
        self._last_monitor = None
        self._applied_wrench = Wrench.zero()
        self._i = 0
        names = [f.name for f in dataclasses.fields(SimTrace)
                 if f.name not in ("nonfinite_faults", "joint_names",
                                   "task_names")]
        self._rows: dict = {name: [] for name in names}

    @property
    def ticks_done(self) -> int:
        return self._i

    @property
    def time(self) -> float:
        """Timestamp of the next tick."""
        return self._i * self._dt

    def feed(self, obs) -> None:
        """Queue an observation. Later arrivals win timestamp ties."""
        bisect.insort(self._pending, obs, key=lambda o: o.timestamp)

    def tick(self) -> None:
        """Advance one control tick and record a trace row."""
        i = self._i
        t = i * self._dt
        r = self._rows

        # Newest observation at or before t, zero-order held.
        advanced = False
        while self._pending and self._pending[0].timestamp <= t + 1e-12:
            self._current = self._pending.pop(0)
            advanced = True
        degenerate_hold = False
        if advanced:
            try:
                self._goals = map_pose(self._current, self.corr)
                self._person_pf = self._current.segment("pf", self.corr.side)
            except (DegenerateObservationError, MissingSegmentError):
                degenerate_hold = True

        config = self.config
        goals = self._goals
        controller = self._controller

        # Force path at its own rate; the deflection holds in between.
        while self._next_force <= t + 1e-12:
            self._applied_wrench = scripted_wrench(config.wrench_script,
                                                   self._next_force)
            controller.step(goals.rs_rw, self._force_dt, self._applied_wrench)
            self._last_monitor = self._monitor.update(controller.k,
                                                      self._force_dt)
            self._next_force += self._force_dt
        wrist_cmd = controller.command(goals.rs_rw)
        goals_cmd = GoalSet(ro_rf=goals.ro_rf, rf_rt=goals.rf_rt,
                            rs_re=goals.rs_re, rs_rw=wrist_cmd,
                            timestamp=goals.timestamp)

        q = self._q
        model = self.model
        poses = forward_kinematics(model, q)
        qdot_cmd, reports = solve_stack(self._stack, model, q, goals_cmd,
                                        damping=config.damping, poses=poses,
                                        with_reports=True)
        qdot = np.clip(qdot_cmd, -self._velocity_limits,
                       self._velocity_limits)
        q_next = q + self._dt * qdot
        q_clamped = model.clamp(q_next)

        base_pose = self._base_pose
        t_rf_pf = relative_transform(base_pose.transform(), self._offset,
                                     self._person_pf)
        cmd = imitation_command(t_rf_pf, config.base)

        shoulder = poses[model.frame_link("rs")]
        elbow_link = poses[model.frame_link("re")]
        wrist_link = poses[model.frame_link("rw")]
        last_monitor = self._last_monitor

        r["t"].append(t)
        r["q"].append(q)
        r["qdot_cmd"].append(qdot_cmd)
        r["qdot"].append(qdot)
        r["ee_goal"].append((shoulder @ goals.rs_rw).translation)
        r["ee_cmd"].append((shoulder @ wrist_cmd).translation)
        r["ee_actual"].append(wrist_link.translation)
        r["elbow_angle_goal"].append(_goal_elbow_angle(goals))
        r["elbow_angle_actual"].append(elbow_angle(
            shoulder.translation, elbow_link.translation,
            wrist_link.translation))
        r["base_pose"].append((base_pose.x, base_pose.y, base_pose.theta))
        r["base_cmd"].append((cmd.v, cmd.omega))
        r["base_error"].append((t_rf_pf.translation[0],
                                t_rf_pf.translation[1],
                                t_rf_pf.rotation.yaw()))
        r["psi"].append(controller.psi)
        r["alpha"].append(controller.alpha)
        r["k"].append(controller.k)
        r["k_dot"].append(last_monitor.k_dot if last_monitor else 0.0)
        r["k_bound"].append(last_monitor.bound if last_monitor else 0.0)
        r["deflection"].append(np.array(controller.e))
        r["deflection_rot"].append(np.array(controller.e_rot))
        r["wrench"].append(np.array(self._applied_wrench.force))
        r["force_filtered"].append(controller.filtered.force_norm())
        report_by_name = {rep.name: rep.residual for rep in reports}
        r["residuals"].append([report_by_name.get(nm, 0.0)
                               for nm in self.task_names])
        r["position_clamps"].append(int(np.sum(q_clamped != q_next)))
        r["velocity_clamps"].append(int(np.sum(
            np.abs(qdot_cmd) > self._velocity_limits + 1e-12)))
        r["emergency"].append(any(rep.emergency for rep in reports))
        r["stability_violation"].append(bool(last_monitor.violation)
                                        if last_monitor else False)
        r["stream_gap"].append(
            (t - self._current.timestamp) > config.gap_tolerance)
        r["degenerate_hold"].append(degenerate_hold)

        self._q = q_clamped
        self._base_pose = step_base(base_pose, cmd, self._dt)
        self._i += 1

    def trace(self) -> SimTrace:
        """Snapshot everything recorded so far."""
        widths = {"q": self.model.dof, "qdot_cmd": self.model.dof,
                  "qdot": self.model.dof, "ee_goal": 3, "ee_cmd": 3,
                  "ee_actual": 3, "base_pose": 3, "base_cmd": 2,
                  "base_error": 3, "deflection": 3, "deflection_rot": 3,
                  "wrench": 3, "residuals": len(self.task_names)}
        arrays = {}
        for name, rows in self._rows.items():
            if name in _INT_COLUMNS:
                arrays[name] = np.asarray(rows, dtype=int)
            elif name in _BOOL_COLUMNS:
                arrays[name] = np.asarray(rows, dtype=bool)
            elif not rows and name in widths:
                arrays[name] = np.zeros((0, widths[name]))
            else:
                arrays[name] = np.asarray(rows, dtype=float)
        return SimTrace(**arrays, nonfinite_faults=self._controller.faults,
                        joint_names=self.model.joint_names,
                        task_names=self.task_names)


def run(config: SimConfig, observations) -> SimTrace:
    """Simulate the closed loop over the configured duration."""
    obs_list = sorted(observations, key=lambda o: o.timestamp)
    if not obs_list:
        raise ValueError("empty observation stream")
    ticks = int(round(config.duration * config.control_rate))
    if ticks < 1:
        raise ValueError("duration shorter than one control tick")

    sim = Simulator(config, obs_list[0])
    for obs in obs_list[1:]:
        sim.feed(obs)
    for _ in range(ticks):
        sim.tick()
    return sim.trace()


def metrics(trace: SimTrace) -> dict:
    """Summary statistics of one trace, JSON-ready."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    ee_err = np.linalg.norm(trace.ee_goal - trace.ee_actual, axis=1)
    elbow_err = np.abs(trace.elbow_angle_goal - trace.elbow_angle_actual)
    base_pos_err = np.linalg.norm(trace.base_error[:, :2], axis=1)
    base_yaw_err = np.abs(trace.base_error[:, 2])
    out = {
        "ticks": int(len(trace)),
        "duration_s": float(trace.t[-1] - trace.t[0]),
        "ee_mae_m": float(np.mean(ee_err)),
        "ee_max_err_m": float(np.max(ee_err)),
        "elbow_angle_mae_rad": float(np.mean(elbow_err)),
        "base_pos_mae_m": float(np.mean(base_pos_err)),
        "base_yaw_mae_rad": float(np.mean(base_yaw_err)),
        "max_task_residuals": {
            name: float(np.max(trace.residuals[:, j]))
            for j, name in enumerate(trace.task_names)
        },
        "violations": trace.violation_counts(),
        "saturation": {
            "velocity_clamps": int(np.sum(trace.velocity_clamps)),
        },
        "holds": {
            "stream_gaps": int(np.sum(trace.stream_gap)),
            "degenerate_holds": int(np.sum(trace.degenerate_hold)),
        },
    }
    return out


# -- bundled example pose and scenarios ----------------------------------

# Operating point for the bundled model: torso mid-travel with the arm
# bent forward, clear of both joint limits and the collision envelope.
_EXAMPLE_Q = (0.35, -0.3, -0.55, 0.0, -1.3, 0.0, -0.5, 0.0)

# Free choices for the synthetic person: the mapping only reads
# directions and the footprint offset, so any human-ish sizes work.
_PERSON_CHEST = np.array([0.0, 0.0, 1.25])
_PERSON_SHOULDER = np.array([0.0, -0.20, 1.45])
_PERSON_UPPER_ARM = 0.28
_PERSON_FOREARM = 0.26


def example_configuration(model: RobotModel | None = None) -> np.ndarray:
    """Joint configuration both example poses are built from."""
    model = model if model is not None else load_default_model()
    q = np.array(_EXAMPLE_Q[:model.dof], dtype=float)
    if q.shape != (model.dof,):
        raise ValueError("example configuration does not fit this model")
    return q


def example_pair(model: RobotModel | None = None):
    """Matched person and robot example poses for calibration.

    The person's arm points exactly along the robot's own segment
    directions at the example configuration, which makes the mapping a
    fixed point there: feeding the person example back through the
    calibrated correspondence reproduces the robot pose bit for bit
    (within rounding).
    """
    model = model if model is not None else load_default_model()
    q = example_configuration(model)
    poses = forward_kinematics(model, q)
    robot = {key: poses[model.frame_link(key)] for key in
             ("rf", "rt", "rs", "re", "rw")}

    rs_p = robot["rs"].translation
    re_p = robot["re"].translation
    rw_p = robot["rw"].translation
    u_upper = (re_p - rs_p) / np.linalg.norm(re_p - rs_p)
    u_fore = (rw_p - re_p) / np.linalg.norm(rw_p - re_p)

    identity = Rotation.identity()
    ps = _PERSON_SHOULDER
    pe = ps + _PERSON_UPPER_ARM * u_upper
    pw = pe + _PERSON_FOREARM * u_fore
    person = Observation(timestamp=0.0, poses={
        "pf": Transform(identity, (0.0, 0.0, 0.0)),
        "pelvis": Transform(identity, (0.0, 0.0, 0.95)),
        "pt": Transform(identity, _PERSON_CHEST),
        "ps_r": Transform(identity, ps),
        "pe_r": Transform(identity, pe),
        "pw_r": Transform(identity, pw),
    })
    return person, robot


def make_correspondence(model: RobotModel | None = None) -> CorrespondenceConfig:
    """Calibrate the bundled correspondence from the example pair."""
    model = model if model is not None else load_default_model()
    person, robot = example_pair(model)
    return calibrate(person, robot, model.lengths, side="right")


_SCENARIOS = {}


def _scenario(fn):
    _SCENARIOS[fn.__name__.removeprefix("_scenario_")] = fn
    return fn


@_scenario
def _scenario_static(model: RobotModel):
    """Regulation: hold a static person pose, starting away from it.

    The torso starts lifted clear of the lower joint-limit band; a
    joint parked inside the band can only creep out at the limit
    task's own rate, which would dominate the episode.
    """
    person, _ = example_pair(model)
    frames = synth("static", person, StaticParams(duration=5.0, rate=50.0))
    q0 = np.zeros(model.dof)
    q0[0] = 0.10
    config = SimConfig(duration=5.0, q0=tuple(q0),
                       limit_margin=0.03, model=model)
    return config, frames


@_scenario
def _scenario_spiral(model: RobotModel):
    """Hand spiral at 0.11 m/s average, starting on the example pose."""
    person, _ = example_pair(model)
    frames = synth("spiral", person, SpiralParams(rate=50.0))
    duration = frames[-1].timestamp
    config = SimConfig(duration=duration,
                       q0=tuple(example_configuration(model)),
                       k_p=60.0, limit_margin=0.03, model=model)
    return config, frames


@_scenario
def _scenario_walk(model: RobotModel):
    """Walked path with a left and a right turn; the base follows.

    The person stands still for a few seconds at the end so the base
    closes the chase gap before the episode ends.
    """
    person, _ = example_pair(model)
    frames = synth("walk_path", person, WalkParams(rate=50.0))
    last = frames[-1]
    frames += [Observation(timestamp=last.timestamp + (i + 1) / 50.0,
                           poses=last.poses) for i in range(300)]
    duration = frames[-1].timestamp
    config = SimConfig(duration=duration,
                       q0=tuple(example_configuration(model)),
                       limit_margin=0.03, model=model)
    return config, frames


@_scenario
def _scenario_grasp_release(model: RobotModel):
    """15 N grasp for 3 s, then release; the person holds still."""
    person, _ = example_pair(model)
    frames = synth("static", person, StaticParams(duration=12.0, rate=50.0))
    config = SimConfig(duration=12.0,
                       q0=tuple(example_configuration(model)),
                       k_p=40.0, limit_margin=0.03,
                       wrench_script=(WrenchEvent(1.0, 4.0,
                                                  force=(15.0, 0.0, 0.0)),),
                       model=model)
    return config, frames


SCENARIO_NAMES = tuple(sorted(_SCENARIOS))


def scenario(name: str, model: RobotModel | None = None):
    """Bundled scenario by name: (config, observations)."""
    model = model if model is not None else load_default_model()
    try:
        build = _SCENARIOS[name]
    except KeyError:
        raise ValueError(
            f"unknown scenario {name!r}; choose from {SCENARIO_NAMES}"
        ) from None
    return build(model)
