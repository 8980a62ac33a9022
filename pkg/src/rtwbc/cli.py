"""Operator entry points: replay, live serve, checks, sweeps, calibration.

Subcommands
    replay SOURCE        simulate a bundled scenario or a recording,
                         write trace.csv + metrics.json
    check-stability      evaluate the sufficient stiffness-rate bound
    sweep                grid over schedule parameters -> sweep.csv
    serve                UDP listener + live control loop -> telemetry.csv
    calibrate P R        fit a correspondence file from an example pair

Exit codes: 0 success, 1 a check failed (stability does not hold, or a
replay recorded invariant violations), 2 usage or configuration error.

Configuration is TOML. Every table is optional; defaults reproduce the
bundled parameter set.

    [run]
    scenario = "spiral"            # default replay source
    model = "my_robot.toml"        # robot description
    correspondence = "corr.toml"   # calibration file
    out = "out"                    # output directory
    seed = 0
    speed = 1.0                    # recording playback speed
    listen = "127.0.0.1:9870"      # serve address (env RTWBC_LISTEN wins)

    [sim]                          # closed-loop knobs
    duration = 5.0
    k_p = 5.0
    q0 = [0.35, -0.3, -0.55, 0.0, -1.3, 0.0, -0.5, 0.0]

    [admittance]                   # virtual dynamics and role schedule
    k_min = 10.0
    k_max = 500.0

    [base]                         # imitation gains and deadbands
    eps = 0.15

    [[wrench]]                     # scripted interaction forces
    start = 1.0
    stop = 4.0
    force = [15.0, 0.0, 0.0]

    [sweep]                        # lists; missing keys hold defaults
    k_min = [5.0, 10.0, 20.0]
    c_minus = [-0.2, -2.0]
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .admittance import (
    AdmittanceController,
    AdmittanceParams,
    Wrench,
    check_sufficient_stability,
)
from .base import BaseParams
from .geom import Transform
from .model import ModelError, RobotModel, forward_kinematics, load_default_model, load_model
from .retarget import (
    DegenerateObservationError,
    MissingSegmentError,
    calibrate,
    load_correspondence,
    save_correspondence,
)
from .sim import (
    SCENARIO_NAMES,
    SimConfig,
    Simulator,
    WrenchEvent,
    metrics,
    run,
    scenario,
)
from .stream import (
    DEFAULT_HOST,
    DEFAULT_PORT,
    RecordingError,
    UdpListener,
    parse_address,
    replay as replay_recording,
)

# Parameters the sweep grid may vary, in CSV column order.
GRID_KEYS = ("k_min", "k_max", "a", "b", "c_minus", "c_plus", "zeta", "m")

ROBOT_FRAME_KEYS = ("rf", "rt", "rs", "re", "rw")


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


_RUN_KEYS = {"model", "correspondence", "scenario", "out", "seed", "speed",
             "listen"}
_SIM_KEYS = {f.name for f in dataclasses.fields(SimConfig)} - {
    "model", "correspondence", "admittance", "base", "wrench_script"}
_ADMITTANCE_KEYS = {f.name for f in dataclasses.fields(AdmittanceParams)}
_BASE_KEYS = {f.name for f in dataclasses.fields(BaseParams)}
_WRENCH_KEYS = {"start", "stop", "force", "torque"}


def _check_keys(table: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise UsageError(f"unknown key {where}.{unknown[0]}")


@dataclass
class RunConfig:
    """Merged view of the config file and the command line flags."""

    model_path: Path | None = None
    correspondence_path: Path | None = None
    scenario: str | None = None
    out_dir: Path = Path("out")
    seed: int = 0
    speed: float = 1.0
    listen: str | None = None
    sim_overrides: dict = field(default_factory=dict)
    admittance_overrides: dict = field(default_factory=dict)
    base_overrides: dict = field(default_factory=dict)
    wrench_events: tuple | None = None
    sweep_grid: dict = field(default_factory=dict)

    def load_model(self) -> RobotModel:
        if self.model_path is None:
            return load_default_model()
        if not Path(self.model_path).is_file():
            raise UsageError(f"model file not found: {self.model_path}")
        try:
            return load_model(self.model_path)
        except (ModelError, tomllib.TOMLDecodeError, OSError) as exc:
            raise UsageError(f"cannot load model {self.model_path}: {exc}")

    def load_correspondence(self):
        """Explicit file, or None to calibrate against the example pair."""
        if self.correspondence_path is None:
            return None
        if not Path(self.correspondence_path).is_file():
            raise UsageError(
                f"correspondence file not found: {self.correspondence_path}")
        try:
            return load_correspondence(self.correspondence_path)
        except (ValueError, tomllib.TOMLDecodeError, OSError) as exc:
            raise UsageError(
                f"cannot load correspondence {self.correspondence_path}: {exc}")

    def admittance_params(self) -> AdmittanceParams:
        try:
            return AdmittanceParams(**self.admittance_overrides)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad [admittance] block: {exc}")

    def base_params(self) -> BaseParams:
        try:
            return BaseParams(**self.base_overrides)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad [base] block: {exc}")


def _parse_wrench_events(tables) -> tuple:
    events = []
    for i, tab in enumerate(tables):
        if not isinstance(tab, dict):
            raise UsageError("[[wrench]] entries must be tables")
        _check_keys(tab, _WRENCH_KEYS, "wrench")
        try:
            events.append(WrenchEvent(
                start=float(tab.get("start", 0.0)),
                stop=float(tab.get("stop", 0.0)),
                force=tuple(tab.get("force", (0.0, 0.0, 0.0))),
                torque=tuple(tab.get("torque", (0.0, 0.0, 0.0))),
            ))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad [[wrench]] entry {i}: {exc}")
    return tuple(events)


def load_run_config(path=None) -> RunConfig:
    """Parse a TOML run configuration; unknown keys are errors."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"cannot parse {path}: {exc}")

    _check_keys(doc, {"run", "sim", "admittance", "base", "wrench", "sweep",
                      "serve"}, "config")
    run_tab = doc.get("run", {})
    _check_keys(run_tab, _RUN_KEYS, "run")
    base_dir = path.resolve().parent

    def _resolve(name):
        value = run_tab.get(name)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base_dir / p

    cfg.model_path = _resolve("model")
    cfg.correspondence_path = _resolve("correspondence")
    if "scenario" in run_tab:
        cfg.scenario = str(run_tab["scenario"])
    if "out" in run_tab:
        out = Path(run_tab["out"])
        cfg.out_dir = out if out.is_absolute() else base_dir / out
    if "seed" in run_tab:
        cfg.seed = int(run_tab["seed"])
    if "speed" in run_tab:
        cfg.speed = float(run_tab["speed"])
    if "listen" in run_tab:
        cfg.listen = str(run_tab["listen"])

    serve_tab = doc.get("serve", {})
    _check_keys(serve_tab, {"listen"}, "serve")
    if "listen" in serve_tab:
        cfg.listen = str(serve_tab["listen"])

    sim_tab = doc.get("sim", {})
    _check_keys(sim_tab, _SIM_KEYS, "sim")
    cfg.sim_overrides = {k: (tuple(v) if isinstance(v, list) else v)
                         for k, v in sim_tab.items()}

    adm_tab = doc.get("admittance", {})
    _check_keys(adm_tab, _ADMITTANCE_KEYS, "admittance")
    cfg.admittance_overrides = dict(adm_tab)
    cfg.admittance_params()  # validate now, fail as a config error

    base_tab = doc.get("base", {})
    _check_keys(base_tab, _BASE_KEYS, "base")
    cfg.base_overrides = dict(base_tab)
    cfg.base_params()

    if "wrench" in doc:
        cfg.wrench_events = _parse_wrench_events(doc["wrench"])

    sweep_tab = doc.get("sweep", {})
    _check_keys(sweep_tab, set(GRID_KEYS), "sweep")
    for key, values in sweep_tab.items():
        if not isinstance(values, list):
            raise UsageError(f"sweep.{key} must be a list")
        cfg.sweep_grid[key] = [float(v) for v in values]

    return cfg


def _load(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    if getattr(args, "out", None):
        cfg.out_dir = Path(args.out)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "speed", None) is not None:
        cfg.speed = args.speed
    return cfg


def _sim_config_for_recording(cfg: RunConfig, frames, model,
                              duration=None) -> SimConfig:
    kwargs = dict(cfg.sim_overrides)
    if duration is not None:
        kwargs["duration"] = duration
    elif "duration" not in kwargs:
        # One tick past the last observation so it is consumed.
        rate = float(kwargs.get("control_rate", 100.0))
        kwargs["duration"] = frames[-1].timestamp + 1.0 / rate
    try:
        return SimConfig(model=model,
                         correspondence=cfg.load_correspondence(),
                         admittance=cfg.admittance_params(),
                         base=cfg.base_params(),
                         wrench_script=cfg.wrench_events or (),
                         **kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad [sim] block: {exc}")


def _apply_overrides(sim_config: SimConfig, cfg: RunConfig) -> SimConfig:
    """Layer explicit config-file values over a bundled scenario."""
    changes = dict(cfg.sim_overrides)
    if cfg.admittance_overrides:
        changes["admittance"] = dataclasses.replace(
            sim_config.admittance, **cfg.admittance_overrides)
    if cfg.base_overrides:
        changes["base"] = dataclasses.replace(
            sim_config.base, **cfg.base_overrides)
    if cfg.wrench_events is not None:
        changes["wrench_script"] = cfg.wrench_events
    if cfg.correspondence_path is not None:
        changes["correspondence"] = cfg.load_correspondence()
    if not changes:
        return sim_config
    try:
        return dataclasses.replace(sim_config, **changes)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration override: {exc}")


def _load_frames(path: Path, speed: float):
    try:
        return list(replay_recording(path, speed=speed))
    except FileNotFoundError:
        raise UsageError(f"recording not found: {path}")
    except (RecordingError, ValueError) as exc:
        raise UsageError(f"cannot replay {path}: {exc}")


# -- subcommands ------------------------------------------------------------


def cmd_replay(args) -> int:
    cfg = _load(args)
    source = args.source or cfg.scenario or "static"

    model = cfg.load_model()
    if source in SCENARIO_NAMES:
        sim_config, frames = scenario(source, model)
        sim_config = _apply_overrides(sim_config, cfg)
    elif Path(source).is_file():
        frames = _load_frames(Path(source), cfg.speed)
        if not frames:
            raise UsageError(f"recording {source} is empty")
        sim_config = _sim_config_for_recording(cfg, frames, model)
    else:
        raise UsageError(
            f"source {source!r} is neither a bundled scenario "
            f"{sorted(SCENARIO_NAMES)} nor a recording file")

    try:
        trace = run(sim_config, frames)
    except (DegenerateObservationError, MissingSegmentError) as exc:
        raise UsageError(f"first observation cannot be mapped: {exc}")

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = cfg.out_dir / "trace.csv"
    metrics_path = cfg.out_dir / "metrics.json"
    trace.write_csv(trace_path)
    report = {"source": source, "seed": cfg.seed, **metrics(trace)}
    metrics_path.write_text(json.dumps(report, indent=2, sort_keys=True)
                            + "\n")

    violations = trace.violation_counts()
    print(f"wrote {trace_path}")
    print(f"wrote {metrics_path}")
    print(f"ticks: {len(trace)}  violations: {violations['total']}")
    return 0 if violations["total"] == 0 else 1


def cmd_check_stability(args) -> int:
    cfg = _load(args)
    check = check_sufficient_stability(cfg.admittance_params())
    print(f"lhs = {check.lhs:.6f}")
    print(f"rhs = {check.rhs:.6f}")
    print(f"holds = {'yes' if check.holds else 'no'}")
    return 0 if check.holds else 1


def _grasp_episode_bounded(params: AdmittanceParams) -> bool:
    """Scripted grasp and release on the admittance loop alone.

    Verdict is trajectory-norm boundedness: the deflection must stay
    within a generous multiple of the softest static deflection for the
    whole episode. A schedule that destabilizes the virtual dynamics
    oscillates past any such bound within a few seconds.
    """
    controller = AdmittanceController(params)
    ref = Transform.identity()
    dt = 1.0 / params.sample_rate
    force = 15.0
    bound = 20.0 * force / params.k_min
    steps = int(round(12.0 * params.sample_rate))
    for i in range(steps):
        t = i * dt
        wrench = (Wrench(np.array([force, 0.0, 0.0]), np.zeros(3))
                  if 1.0 <= t < 4.0 else Wrench.zero())
        controller.step(ref, dt, wrench)
        deflection = float(np.linalg.norm(controller.e))
        if not np.isfinite(deflection) or deflection > bound:
            return False
    return controller.faults == 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    defaults = cfg.admittance_params()
    axes = [cfg.sweep_grid.get(key, [getattr(defaults, key)])
            for key in GRID_KEYS]

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out_path = cfg.out_dir / "sweep.csv"
    header = list(GRID_KEYS) + ["lhs", "rhs", "holds", "stable"]
    rows = 0
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for point in itertools.product(*axes):
            values = dict(zip(GRID_KEYS, point))
            try:
                params = dataclasses.replace(defaults, **values)
            except ValueError as exc:
                raise UsageError(f"invalid sweep point {values}: {exc}")
            check = check_sufficient_stability(params)
            stable = _grasp_episode_bounded(params)
            cells = [format(v, ".10g") for v in point]
            cells += [format(check.lhs, ".10g"), format(check.rhs, ".10g"),
                      "yes" if check.holds else "no",
                      "yes" if stable else "no"]
            fh.write(",".join(cells) + "\n")
            rows += 1
    print(f"wrote {out_path} ({rows} points)")
    return 0


def cmd_serve(args) -> int:
    cfg = _load(args)
    address = (args.listen or os.environ.get("RTWBC_LISTEN") or cfg.listen
               or f"{DEFAULT_HOST}:{DEFAULT_PORT}")
    try:
        host, port = parse_address(address)
    except ValueError as exc:
        raise UsageError(str(exc))

    model = cfg.load_model()
    try:
        listener = UdpListener(host, port)
    except OSError as exc:
        raise UsageError(f"cannot bind {host}:{port}: {exc}")
    bound = f"{listener.host}:{listener.port}"  # before stop() closes it
    listener.start()

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    telemetry_path = cfg.out_dir / "telemetry.csv"
    metrics_path = cfg.out_dir / "metrics.json"
    print(f"listening on {bound}", flush=True)

    sim = None
    written = 0
    last_rx = time.monotonic()
    warned = False
    code = 0
    fh = open(telemetry_path, "w", encoding="utf-8", newline="")
    try:
        while True:
            if (sim is not None and args.duration is not None
                    and sim.time > args.duration + 1e-12):
                break
            obs = listener.mailbox.take()
            if obs is None:
                idle = time.monotonic() - last_rx
                if idle > 5.0 and not warned:
                    print("warning: no datagrams for 5.0 s; holding last "
                          "pose", file=sys.stderr, flush=True)
                    warned = True
                if args.duration is not None and idle > 6.0:
                    break  # bounded session, sender went away
                time.sleep(0.001)
                continue
            last_rx = time.monotonic()
            warned = False
            if sim is None:
                try:
                    sim_config = _sim_config_for_recording(
                        cfg, [obs], model,
                        duration=(args.duration
                                  if args.duration is not None else 1e12))
                    sim = Simulator(sim_config, obs)
                except (DegenerateObservationError,
                        MissingSegmentError) as exc:
                    print(f"warning: skipping unusable first observation: "
                          f"{exc}", file=sys.stderr, flush=True)
                    continue
                fh.write(",".join(sim.trace().csv_header()) + "\n")
            else:
                sim.feed(obs)
            while sim.time <= obs.timestamp + 1e-12:
                sim.tick()
            if sim.ticks_done - written >= 200:
                written = sim.trace().append_csv_rows(fh, written)
    except KeyboardInterrupt:
        pass
    finally:
        listener.stop()
        if sim is not None:
            trace = sim.trace()
            trace.append_csv_rows(fh, written)
            fh.flush()
            fh.close()
            report = {"source": f"udp:{bound}",
                      "seed": cfg.seed, **metrics(trace),
                      "listener": listener.stats()}
            metrics_path.write_text(
                json.dumps(report, indent=2, sort_keys=True) + "\n")
            print(f"wrote {telemetry_path}")
            print(f"wrote {metrics_path}")
        else:
            fh.close()
    return code


def cmd_calibrate(args) -> int:
    cfg = _load(args)
    person_path = Path(args.person)
    frames = _load_frames(person_path, speed=1.0)
    if not frames:
        raise UsageError(f"recording {person_path} has no observations")
    person = frames[0]

    robot_path = Path(args.robot)
    if not robot_path.is_file():
        raise UsageError(f"robot example file not found: {robot_path}")
    try:
        with open(robot_path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"cannot parse {robot_path}: {exc}")
    robot_tab = doc.get("robot")
    if not isinstance(robot_tab, dict):
        raise UsageError(f"{robot_path} lacks a [robot] table")
    _check_keys(robot_tab, {"model", "q", "side"}, "robot")

    model_ref = robot_tab.get("model", "default")
    if model_ref == "default":
        model = load_default_model()
    else:
        p = Path(model_ref)
        cfg_model = p if p.is_absolute() else robot_path.resolve().parent / p
        cfg = dataclasses.replace(cfg, model_path=cfg_model)
        model = cfg.load_model()
    if "q" not in robot_tab:
        raise UsageError(f"{robot_path} lacks robot.q")
    q = np.asarray(robot_tab["q"], dtype=float)
    if q.shape != (model.dof,):
        raise UsageError(f"robot.q needs {model.dof} entries")
    side = str(robot_tab.get("side", "right"))

    poses = forward_kinematics(model, q)
    robot_frames = {key: poses[model.frame_link(key)]
                    for key in ROBOT_FRAME_KEYS}
    try:
        corr = calibrate(person, robot_frames, model.lengths, side=side)
    except (MissingSegmentError, DegenerateObservationError,
            ValueError) as exc:
        raise UsageError(f"calibration failed: {exc}")

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out_path = cfg.out_dir / "correspondence.toml"
    save_correspondence(corr, out_path)
    print(f"wrote {out_path}")
    return 0


# -- argument parsing --------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtwbc",
        description="Human to robot motion transfer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH",
                       help="TOML run configuration")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--seed", type=int, metavar="N",
                       help="seed recorded with the outputs")

    p = sub.add_parser("replay",
                       help="simulate a scenario or recording offline")
    common(p)
    p.add_argument("source", nargs="?",
                   help="bundled scenario name or recording path")
    p.add_argument("--speed", type=float, metavar="F",
                   help="recording playback speed factor")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("check-stability",
                       help="evaluate the sufficient stability condition")
    common(p)
    p.set_defaults(func=cmd_check_stability)

    p = sub.add_parser("sweep",
                       help="stability verdicts over a parameter grid")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve", help="listen for UDP observations and run "
                                     "the live loop")
    common(p)
    p.add_argument("--listen", metavar="ADDR:PORT",
                   help="bind address (default env RTWBC_LISTEN, then "
                        f"{DEFAULT_HOST}:{DEFAULT_PORT})")
    p.add_argument("--duration", type=float, metavar="S",
                   help="stop after this much observation time")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("calibrate",
                       help="fit a correspondence file from an example pair")
    common(p)
    p.add_argument("person", help="person example recording (JSON lines)")
    p.add_argument("robot", help="robot example configuration (TOML)")
    p.set_defaults(func=cmd_calibrate)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
