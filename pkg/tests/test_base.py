"""Unicycle kinematics and footprint-chasing behavior."""

import math

import numpy as np
import pytest

from rtwbc.base import (
    BaseCommand,
    BaseParams,
    BasePose,
    imitation_command,
    init_offset,
    relative_transform,
    step_base,
)
from rtwbc.geom import Rotation, Transform


def planar(x, y, yaw):
    return Transform(Rotation.rot_z(yaw), np.array([x, y, 0.0]))


# -- kinematics ---------------------------------------------------------------


def test_straight_drive():
    pose = step_base(BasePose(), BaseCommand(v=1.0), dt=1.0)
    assert (pose.x, pose.y, pose.theta) == (1.0, 0.0, 0.0)


def test_spin_in_place():
    pose = step_base(BasePose(), BaseCommand(omega=math.pi / 2), dt=1.0)
    assert pose.x == 0.0 and pose.y == 0.0
    assert pose.theta == pytest.approx(math.pi / 2)


def test_no_sideways_motion():
    """Displacement along the wheel axis is identically zero."""
    rng = np.random.default_rng(71)
    for _ in range(100):
        pose = BasePose(rng.uniform(-2, 2), rng.uniform(-2, 2),
                        rng.uniform(-4, 4))
        cmd = BaseCommand(rng.uniform(-1, 1), rng.uniform(-2, 2))
        nxt = step_base(pose, cmd, dt=0.02)
        dx, dy = nxt.x - pose.x, nxt.y - pose.y
        assert abs(dy * math.cos(pose.theta) - dx * math.sin(pose.theta)) < 1e-15


def test_heading_stays_wrapped():
    pose = BasePose(theta=3.0)
    for _ in range(200):
        pose = step_base(pose, BaseCommand(omega=1.7), dt=0.05)
        assert -math.pi < pose.theta <= math.pi


def test_pose_transform_roundtrip():
    pose = BasePose(0.4, -1.2, 2.1)
    back = BasePose.from_transform(pose.transform())
    assert (back.x, back.y) == pytest.approx((pose.x, pose.y))
    assert back.theta == pytest.approx(pose.theta)


# -- session offset -----------------------------------------------------------


def test_init_offset_identity():
    off = init_offset(Transform.identity(), Transform.identity())
    assert off.approx_equal(Transform.identity(), 1e-12)


def test_init_offset_translated_robot():
    t_ro_rf = planar(1.0, 0.0, 0.0)
    off = init_offset(t_ro_rf, Transform.identity())
    assert np.allclose(off.translation, [1.0, 0.0, 0.0])


def test_init_cancels_accumulated_drift():
    """Re-initializing makes the relative transform exactly identity."""
    t_ro_rf = planar(0.7, -0.4, 0.9)
    t_po_pf = planar(-2.0, 1.0, -1.4)
    off = init_offset(t_ro_rf, t_po_pf.inverse())
    rel = relative_transform(t_ro_rf, off, t_po_pf)
    assert rel.approx_equal(Transform.identity(), 1e-12)


# -- imitation branches -------------------------------------------------------


def test_deadband_turns_in_place():
    cmd = imitation_command(planar(0.0, 0.0, 0.3), BaseParams(lam=1.0))
    assert cmd.v == 0.0
    assert cmd.omega == pytest.approx(0.3, abs=1e-12)


def test_deadband_zero_linear_velocity_everywhere():
    params = BaseParams()
    rng = np.random.default_rng(72)
    for _ in range(200):
        r = rng.uniform(0, params.eps * 0.999)
        ang = rng.uniform(-math.pi, math.pi)
        rel = planar(r * math.cos(ang), r * math.sin(ang),
                     rng.uniform(-math.pi, math.pi))
        assert imitation_command(rel, params).v == 0.0


def test_straight_backward():
    params = BaseParams(sigma=0.5, lam=1.0)
    cmd = imitation_command(planar(-1.0, 0.0, 0.0), params)
    assert cmd.v == pytest.approx(-0.5, abs=1e-12)
    assert cmd.omega == pytest.approx(0.0, abs=1e-12)


def test_forward_diagonal():
    params = BaseParams(sigma=0.5, lam=1.0, v_max=5.0)
    cmd = imitation_command(planar(1.0, 1.0, 2.0), params)
    assert cmd.v == pytest.approx(0.5 * math.sqrt(2), abs=1e-12)
    assert cmd.omega == pytest.approx(math.pi / 4, abs=1e-12)


def test_rear_goal_within_cone_reverses():
    params = BaseParams()
    for y in (-0.3, 0.0, 0.3):
        cmd = imitation_command(planar(-1.0, y, 0.2), params)
        assert cmd.v < 0.0


def test_rear_goal_outside_cone_goes_forward():
    cmd = imitation_command(planar(-1.0, 0.1, 1.5), BaseParams())
    assert cmd.v > 0.0


def test_commands_clamped():
    params = BaseParams(sigma=5.0, lam=10.0, v_max=1.0, omega_max=2.0)
    cmd = imitation_command(planar(3.0, 3.0, 0.0), params)
    assert cmd.v == 1.0
    assert cmd.omega == 2.0
    cmd = imitation_command(planar(-3.0, 0.0, 0.0), params)
    assert cmd.v == -1.0


def test_linear_velocity_lipschitz_within_branches():
    """v is sigma-Lipschitz in range along any ray, per branch regime.

    The deadband edge itself carries a deliberate jump from sigma*eps
    to zero (v is held at exactly zero inside), so the sweep checks
    each side of the boundary separately.
    """
    params = BaseParams()
    ang = 0.7
    radii = np.linspace(params.eps + 1e-6, 3.0, 500)
    vs = [imitation_command(planar(r * math.cos(ang), r * math.sin(ang), 0.1),
                            params).v for r in radii]
    for (r1, v1), (r2, v2) in zip(zip(radii, vs), zip(radii[1:], vs[1:])):
        assert abs(v2 - v1) <= params.sigma * (r2 - r1) + 1e-9


def test_sign_convention_at_straight_back():
    """atan2 puts a dead-astern goal at +pi; sgn(+pi) = +1 zeroes omega."""
    cmd = imitation_command(planar(-2.0, 0.0, 0.0), BaseParams(lam=1.0))
    assert cmd.omega == pytest.approx(0.0, abs=1e-12)


# -- closed-loop convergence --------------------------------------------------


def run_chase(goal_xy, goal_yaw, params, seconds=70.0, dt=0.02):
    t_po_pf_start = Transform.identity()
    pose = BasePose()
    offset = init_offset(pose.transform(), t_po_pf_start.inverse())
    goal = planar(goal_xy[0], goal_xy[1], goal_yaw)
    history = []
    for _ in range(int(seconds / dt)):
        rel = relative_transform(pose.transform(), offset, goal)
        cmd = imitation_command(rel, params)
        pose = step_base(pose, cmd, dt)
        history.append((np.hypot(rel.translation[0], rel.translation[1]),
                        abs(rel.rotation.yaw())))
    return pose, history


@pytest.mark.parametrize("goal", [
    ((2.5, 1.0), 0.5),
    ((-2.0, 0.3), 0.0),
    ((0.0, 2.9), -2.0),
    ((-1.5, -1.5), 3.0),
])
def test_static_goal_convergence(goal):
    """Position inside the deadband by 60 s, yaw aligned 10 s later."""
    params = BaseParams()
    goal_xy, goal_yaw = goal
    _, history = run_chase(goal_xy, goal_yaw, params)
    t60 = int(60.0 / 0.02)
    assert min(h[0] for h in history[:t60]) < params.eps
    assert history[-1][0] < params.eps
    assert history[-1][1] < 0.02


def test_parameter_validation():
    with pytest.raises(ValueError):
        BaseParams(eps=0.0)
    with pytest.raises(ValueError):
        BaseParams(delta=2.0)
    with pytest.raises(ValueError):
        BaseParams(v_max=-1.0)
