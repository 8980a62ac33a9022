"""Differential-drive base: kinematics and the imitation controller.

The base chases the person's footprint displacement, replayed relative
to where both started: person and robot footprints are declared
coincident at initialization, and from then on the controller steers
toward wherever the person's footprint has moved in the robot's own
frame. Goals behind the robot inside a small alignment cone are taken
in reverse, everything else is approached nose-first; inside the
position deadband only the heading is servoed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import Rotation, Transform, wrap_angle


@dataclass(frozen=True)
class BasePose:
    """Planar pose (x, y, theta), theta kept in (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def transform(self) -> Transform:
        """The footprint frame as a full spatial transform."""
        return Transform(Rotation.rot_z(self.theta),
                         np.array([self.x, self.y, 0.0]))

    @classmethod
    def from_transform(cls, tf: Transform) -> "BasePose":
        return cls(float(tf.translation[0]), float(tf.translation[1]),
                   tf.rotation.yaw())


@dataclass(frozen=True)
class BaseCommand:
    v: float = 0.0
    omega: float = 0.0


@dataclass(frozen=True)
class BaseParams:
    """Imitation gains, deadbands and command limits."""

    eps: float = 0.15        # position deadband (m)
    delta: float = 0.78      # backward-alignment cone (rad)
    lam: float = 1.2         # angular gain (1/s)
    sigma: float = 0.8       # linear gain (1/s)
    v_max: float = 1.0
    omega_max: float = 2.0

    def __post_init__(self):
        for name in ("eps", "delta", "lam", "sigma", "v_max", "omega_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.delta < math.pi / 2:
            raise ValueError("alignment cone must stay below pi/2")


def step_base(pose: BasePose, cmd: BaseCommand, dt: float) -> BasePose:
    """Euler step of the unicycle model; heading re-wrapped."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return BasePose(
        pose.x + cmd.v * math.cos(pose.theta) * dt,
        pose.y + cmd.v * math.sin(pose.theta) * dt,
        pose.theta + cmd.omega * dt,
    )


def init_offset(t_ro_rf: Transform, t_pf_po: Transform) -> Transform:
    """Freeze the odom-to-odom offset that glues the two footprints.

    Declaring the person's current footprint coincident with the
    robot's makes T_ro_po = T_ro_rf * T_pf_po; re-running this resets
    any accumulated relative drift to zero.
    """
    return t_ro_rf @ t_pf_po


def relative_transform(t_ro_rf: Transform, t_ro_po: Transform,
                       t_po_pf: Transform) -> Transform:
    """Person footprint seen from the robot footprint."""
    return t_ro_rf.inverse() @ t_ro_po @ t_po_pf


def _sgn(value: float) -> float:
    return 1.0 if value >= 0.0 else -1.0


def imitation_command(t_rf_pf: Transform, params: BaseParams) -> BaseCommand:
    """Algorithmic chase of the displaced footprint, three regimes.

    Inside the deadband only yaw is corrected. A goal behind the robot
    whose heading ray lies within the alignment cone of straight-back
    is approached in reverse; everything else is driven forward, which
    for rear goals outside the cone produces the expected turn-then-go
    arc.
    """
    p_x = float(t_rf_pf.translation[0])
    p_y = float(t_rf_pf.translation[1])
    dist = math.hypot(p_x, p_y)
    yaw = t_rf_pf.rotation.yaw()
    heading = math.atan2(p_y, p_x)

    if dist < params.eps:
        v = 0.0
        omega = params.lam * yaw
    elif p_x < 0.0 and abs(yaw) < params.delta:
        v = -params.sigma * dist
        omega = params.lam * (heading - math.pi * _sgn(heading))
    else:
        v = params.sigma * dist
        omega = params.lam * heading

    v = min(params.v_max, max(-params.v_max, v))
    omega = min(params.omega_max, max(-params.omega_max, omega))
    return BaseCommand(v, omega)
