"""Map human segment poses to robot link goals.

A human observation and a robot goal are never the same shape: limb
lengths differ, the torso is a prismatic column instead of a spine, and
the mocap frames are oriented however the suit vendor chose. The
correspondence is split into a rotational part (per-pair alignment
rotations fixed at calibration) and a translational part (copy the
footprint offset, rescale each segment direction to the robot's own
segment length). Both parts are pure functions of one observation and
one immutable config.

Frame naming follows the convention T_a_b = pose of frame b in frame a.
Person frames: po (person odom), pf (virtual footprint), pt (chest),
ps (shoulder), pe (elbow), pw (wrist). Robot frames: ro, rf, rt, rs,
re, rw in the same roles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .geom import Rotation, Transform

# Goal pairs, in chain order. Keys into CorrespondenceConfig.rs and the
# person-side relative rotations they are calibrated against.
GOAL_PAIRS = ("ro_rf", "rf_rt", "rs_re", "rs_rw")

# Human segment vectors shorter than this cannot define a direction.
EPS_LEN = 1e-6

ROBOT_FRAME_KEYS = ("rf", "rt", "rs", "re", "rw")
PERSON_FRAME_KEYS = ("pf", "pt", "ps", "pe", "pw")

_SIDE_SUFFIX = {"left": "_l", "right": "_r"}


class MissingSegmentError(KeyError):
    """An observation lacks a segment the mapping needs."""


class DegenerateObservationError(ValueError):
    """A human segment vector is too short to define a direction."""


@dataclass(frozen=True)
class Observation:
    """One mocap sample: segment poses expressed in the person odom frame."""

    timestamp: float
    poses: Mapping[str, Transform]

    def __post_init__(self):
        object.__setattr__(self, "poses", MappingProxyType(dict(self.poses)))
        if not math.isfinite(self.timestamp):
            raise ValueError("observation timestamp must be finite")

    def segment(self, key: str, side: str = "right") -> Transform:
        """Look up a canonical segment, falling back to the side-suffixed id.

        Arm segments may arrive as ps_l / ps_r etc. when a stream carries
        both arms; the virtual footprint pf is derived from the pelvis
        when absent.
        """
        if key in self.poses:
            return self.poses[key]
        if key in ("ps", "pe", "pw"):
            suffixed = key + _SIDE_SUFFIX[side]
            if suffixed in self.poses:
                return self.poses[suffixed]
        if key == "pf" and "pelvis" in self.poses:
            return derive_footprint(self.poses["pelvis"])
        raise MissingSegmentError(key)


def derive_footprint(pelvis: Transform) -> Transform:
    """Virtual footprint: pelvis projected to the floor, yaw only."""
    x, y, _ = pelvis.translation
    return Transform(Rotation.rot_z(pelvis.rotation.yaw()),
                     np.array([x, y, 0.0]))


@dataclass(frozen=True)
class CorrespondenceConfig:
    """Calibrated person-to-robot mapping parameters.

    rs holds one alignment rotation per goal pair; the lengths are the
    robot's own segment lengths, so mapped elbow and wrist offsets land
    exactly on the robot's reachable sphere.
    """

    rs: Mapping[str, Rotation]
    l_rf_rt: float
    l_rs_re: float
    l_re_rw: float
    side: str = "right"

    def __post_init__(self):
        object.__setattr__(self, "rs", MappingProxyType(dict(self.rs)))
        missing = [p for p in GOAL_PAIRS if p not in self.rs]
        if missing:
            raise ValueError(f"rs is missing pairs {missing}")
        for name in ("l_rf_rt", "l_rs_re", "l_re_rw"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.side not in _SIDE_SUFFIX:
            raise ValueError(f"side must be left or right, got {self.side!r}")


@dataclass(frozen=True)
class GoalSet:
    """Robot link goals produced from one observation.

    ro_rf: base footprint in the robot odom frame.
    rf_rt: torso in the footprint frame.
    rs_re, rs_rw: elbow and wrist in the shoulder frame.
    """

    ro_rf: Transform
    rf_rt: Transform
    rs_re: Transform
    rs_rw: Transform
    timestamp: float = 0.0

    def pair(self, name: str) -> Transform:
        if name not in GOAL_PAIRS:
            raise KeyError(name)
        return getattr(self, name)


def _person_relative_rotations(obs: Observation, side: str) -> dict[str, Rotation]:
    pf = obs.segment("pf", side)
    pt = obs.segment("pt", side)
    ps = obs.segment("ps", side)
    pe = obs.segment("pe", side)
    pw = obs.segment("pw", side)
    return {
        "ro_rf": pf.rotation,
        "rf_rt": pf.rotation.inverse() @ pt.rotation,
        "rs_re": ps.rotation.inverse() @ pe.rotation,
        "rs_rw": ps.rotation.inverse() @ pw.rotation,
    }


def _robot_relative_rotations(robot_example: Mapping[str, Transform]) -> dict[str, Rotation]:
    rf = robot_example["rf"]
    rt = robot_example["rt"]
    rs = robot_example["rs"]
    re = robot_example["re"]
    rw = robot_example["rw"]
    return {
        "ro_rf": rf.rotation,
        "rf_rt": rf.rotation.inverse() @ rt.rotation,
        "rs_re": rs.rotation.inverse() @ re.rotation,
        "rs_rw": rs.rotation.inverse() @ rw.rotation,
    }


def calibrate(person_example: Observation,
              robot_example: Mapping[str, Transform],
              lengths: Mapping[str, float],
              side: str = "right") -> CorrespondenceConfig:
    """Fit the per-pair alignment rotations from one matched pose pair.

    robot_example maps the frame keys rf/rt/rs/re/rw to poses in the
    robot odom frame (forward kinematics of the example configuration);
    lengths carries the robot segment lengths rf_rt, rs_re, re_rw.
    Each alignment rotation is chosen so the rotational mapping sends
    the person example exactly onto the robot example.
    """
    missing = [k for k in ROBOT_FRAME_KEYS if k not in robot_example]
    if missing:
        raise MissingSegmentError(f"robot example lacks frames {missing}")
    person = _person_relative_rotations(person_example, side)
    robot = _robot_relative_rotations(robot_example)
    rs = {pair: robot[pair] @ person[pair].inverse() for pair in GOAL_PAIRS}
    return CorrespondenceConfig(rs=rs,
                                l_rf_rt=float(lengths["rf_rt"]),
                                l_rs_re=float(lengths["rs_re"]),
                                l_re_rw=float(lengths["re_rw"]),
                                side=side)


def map_rotations(obs: Observation, cfg: CorrespondenceConfig) -> dict[str, Rotation]:
    """Goal rotation per pair: alignment rotation times the person's own."""
    person = _person_relative_rotations(obs, cfg.side)
    return {pair: cfg.rs[pair] @ person[pair] for pair in GOAL_PAIRS}


def _unit(vec: np.ndarray, what: str) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm <= EPS_LEN:
        raise DegenerateObservationError(
            f"{what} is degenerate (norm {norm:.3e} <= {EPS_LEN:.0e})")
    return vec / norm


def map_translations(obs: Observation, cfg: CorrespondenceConfig) -> dict[str, np.ndarray]:
    """Goal translation per pair.

    The footprint offset is copied one to one; torso, elbow and wrist
    keep the human direction but take the robot's segment length, so a
    taller or shorter person commands the same reachable goals.
    """
    side = cfg.side
    pf = obs.segment("pf", side)
    pt = obs.segment("pt", side)
    ps = obs.segment("ps", side)
    pe = obs.segment("pe", side)
    pw = obs.segment("pw", side)

    p_pf_pt = (pf.inverse() @ pt).translation
    p_ps_pe = (ps.inverse() @ pe).translation
    p_ps_pw = (ps.inverse() @ pw).translation

    p_rs_re = cfg.l_rs_re * _unit(p_ps_pe, "shoulder-to-elbow vector")
    forearm = _unit(p_ps_pw - p_ps_pe, "elbow-to-wrist vector")
    return {
        "ro_rf": pf.translation.copy(),
        "rf_rt": cfg.l_rf_rt * _unit(p_pf_pt, "footprint-to-chest vector"),
        "rs_re": p_rs_re,
        "rs_rw": p_rs_re + cfg.l_re_rw * forearm,
    }


def map_pose(obs: Observation, cfg: CorrespondenceConfig) -> GoalSet:
    """Full correspondence: one observation in, one goal set out.

    Raises DegenerateObservationError before building anything, so a
    caller can keep its previous goal set on bad input.
    """
    rotations = map_rotations(obs, cfg)
    translations = map_translations(obs, cfg)
    return GoalSet(
        ro_rf=Transform(rotations["ro_rf"], translations["ro_rf"]),
        rf_rt=Transform(rotations["rf_rt"], translations["rf_rt"]),
        rs_re=Transform(rotations["rs_re"], translations["rs_re"]),
        rs_rw=Transform(rotations["rs_rw"], translations["rs_rw"]),
        timestamp=obs.timestamp,
    )


# -- serialization ----------------------------------------------------------

def default_correspondence_path() -> Path:
    """Bundled calibration between the example person and robot pair."""
    return Path(resources.files("rtwbc").joinpath("data/correspondence.toml"))


def save_correspondence(cfg: CorrespondenceConfig, path) -> None:
    """Write a config as TOML (same structured-text family as the model)."""
    lines = ["[correspondence]", f'side = "{cfg.side}"', "", "[lengths]"]
    for name in ("rf_rt", "rs_re", "re_rw"):
        lines.append(f"{name} = {float(getattr(cfg, 'l_' + name))!r}")
    lines += ["", "[rs]"]
    for pair in GOAL_PAIRS:
        w, x, y, z = (float(c) for c in cfg.rs[pair].wxyz)
        lines.append(f"{pair} = [{w!r}, {x!r}, {y!r}, {z!r}]")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_correspondence(path) -> CorrespondenceConfig:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    try:
        lengths = data["lengths"]
        rs_raw = data["rs"]
        side = data["correspondence"]["side"]
    except KeyError as exc:
        raise ValueError(f"correspondence file {path} lacks table {exc}") from exc
    rs = {}
    for pair in GOAL_PAIRS:
        if pair not in rs_raw:
            raise ValueError(f"correspondence file {path} lacks rs.{pair}")
        rs[pair] = Rotation(np.asarray(rs_raw[pair], dtype=float))
    return CorrespondenceConfig(rs=rs,
                                l_rf_rt=float(lengths["rf_rt"]),
                                l_rs_re=float(lengths["rs_re"]),
                                l_re_rw=float(lengths["re_rw"]),
                                side=side)
