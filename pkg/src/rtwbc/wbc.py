"""Prioritized velocity-level whole-body control.

Tasks are resolved strictly in order: each lower-priority task only
steers inside the null space accumulated by everything above it, so a
conflicting secondary goal degrades gracefully instead of corrupting
the primary one. The recursion is

    qd_i = qd_{i-1} + pinv(J_i N_{i-1}) (xd_i - J_i qd_{i-1})

with N_{i-1} the projector onto the null space of the stacked
higher-priority Jacobians. All pseudo-inverses are damped, so singular
tasks saturate rather than blow up.

The default five-task hierarchy, highest priority first: joint-limit
avoidance, self-collision avoidance, torso position, wrist pose, elbow
position. The two arm tasks track goals expressed in the shoulder
frame and use difference Jacobians (wrist minus shoulder), so arm
posture survives even when the torso goal itself is unreachable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geom import Transform, null_space_projector
from .model import RobotModel, forward_kinematics, geometric_jacobian, sphere_distances
from .retarget import GoalSet

TaskBuild = Callable[..., tuple[np.ndarray, np.ndarray]]

DEFAULT_TASK_ORDER = ("joint_limit", "self_collision", "torso", "wrist", "elbow")


@dataclass(frozen=True)
class Task:
    """One priority level: build(model, q, goals, poses) -> (J, xdot)."""

    name: str
    build: TaskBuild


@dataclass(frozen=True)
class TaskStack:
    """Ordered tasks, highest priority first."""

    tasks: tuple[Task, ...]

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))

    def names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tasks)


@dataclass(frozen=True)
class TaskReport:
    """Telemetry for one solved priority level."""

    name: str
    dimension: int
    residual: float
    nullspace_dim: int
    emergency: bool = False


def task_error_velocity(goal: Transform, current: Transform, k_p: float) -> np.ndarray:
    """Proportional pose-error twist, linear stacked over angular."""
    out = np.empty(6)
    out[:3] = k_p * (goal.translation - current.translation)
    out[3:] = k_p * (goal.rotation @ current.rotation.inverse()).as_rotvec()
    return out


# -- safety tasks -------------------------------------------------------------

def joint_limit_rows(model: RobotModel, q: np.ndarray, margin: float,
                     gain: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """One selection row per joint inside the margin band near a limit.

    The commanded rate pushes back toward the range interior and grows
    linearly with penetration, peaking at gain*margin on the limit.
    """
    q = np.asarray(q, dtype=float)
    rows, rates = [], []
    for i in range(model.dof):
        into_lo = margin - (q[i] - model.lower[i])
        into_hi = margin - (model.upper[i] - q[i])
        if into_lo > 0.0:
            row = np.zeros(model.dof)
            row[i] = 1.0
            rows.append(row)
            rates.append(gain * into_lo)
        elif into_hi > 0.0:
            row = np.zeros(model.dof)
            row[i] = 1.0
            rows.append(row)
            rates.append(-gain * into_hi)
    if not rows:
        return np.zeros((0, model.dof)), np.zeros(0)
    return np.array(rows), np.array(rates)


def joint_limit_task(model: RobotModel, q, margin: float, gain: float = 1.0):
    return joint_limit_rows(model, np.asarray(q, float), margin, gain)


def self_collision_rows(model: RobotModel, q: np.ndarray, threshold: float,
                        gain: float = 1.0, poses=None):
    """Separating-velocity rows for every sphere pair closer than threshold.

    Returns (J, xdot, emergency): emergency is set when spheres already
    overlap, in which case the row demands the maximum rate gain*threshold.
    """
    q = np.asarray(q, dtype=float)
    rows, rates = [], []
    emergency = False
    for sph_a, sph_b, gap, center_a, center_b in sphere_distances(model, q, poses):
        if gap >= threshold:
            continue
        sep = center_a - center_b
        norm = float(np.linalg.norm(sep))
        direction = sep / norm if norm > 1e-12 else np.array([1.0, 0.0, 0.0])
        jac_a = geometric_jacobian(model, q, sph_a.link, point=center_a)[:3]
        jac_b = geometric_jacobian(model, q, sph_b.link, point=center_b)[:3]
        rows.append(direction @ (jac_a - jac_b))
        if gap <= 0.0:
            emergency = True
            rates.append(gain * threshold)
        else:
            rates.append(gain * (threshold - gap))
    if not rows:
        return np.zeros((0, model.dof)), np.zeros(0), emergency
    return np.array(rows), np.array(rates), emergency


def self_collision_task(model: RobotModel, q, threshold: float, gain: float = 1.0):
    jac, xdot, _ = self_collision_rows(model, np.asarray(q, float), threshold, gain)
    return jac, xdot


# -- pose tasks ---------------------------------------------------------------

def _difference_jacobian(model, q, frame_a: str, frame_b: str) -> np.ndarray:
    """Jacobian of frame b's twist relative to frame a (both in root frame)."""
    jac_b = geometric_jacobian(model, q, model.frames[frame_b])
    jac_a = geometric_jacobian(model, q, model.frames[frame_a])
    return jac_b - jac_a


def make_torso_task(k_p: float = 5.0) -> Task:
    def build(model, q, goals, poses):
        current = poses[model.frames["rt"]]
        jac = geometric_jacobian(model, q, model.frames["rt"])[:3]
        err = task_error_velocity(goals.rf_rt, current, k_p)[:3]
        return jac, err
    return Task("torso", build)


def make_wrist_task(k_p: float = 5.0) -> Task:
    """Full 6-DOF wrist pose, tracked relative to the current shoulder."""
    def build(model, q, goals, poses):
        shoulder = poses[model.frames["rs"]]
        current = poses[model.frames["rw"]]
        target = shoulder @ goals.rs_rw
        jac = _difference_jacobian(model, q, "rs", "rw")
        return jac, task_error_velocity(target, current, k_p)
    return Task("wrist", build)


def make_elbow_task(k_p: float = 5.0) -> Task:
    def build(model, q, goals, poses):
        shoulder = poses[model.frames["rs"]]
        current = poses[model.frames["re"]]
        target = shoulder @ goals.rs_re
        jac = _difference_jacobian(model, q, "rs", "re")[:3]
        err = task_error_velocity(target, current, k_p)[:3]
        return jac, err
    return Task("elbow", build)


def make_joint_limit_task(margin: float = 0.1, gain: float = 1.0) -> Task:
    def build(model, q, goals, poses):
        return joint_limit_rows(model, q, margin, gain)
    return Task("joint_limit", build)


def make_self_collision_task(threshold: float = 0.05, gain: float = 1.0) -> Task:
    def build(model, q, goals, poses):
        return self_collision_rows(model, q, threshold, gain, poses)
    return Task("self_collision", build)


def default_stack(limit_margin: float = 0.1, limit_gain: float = 1.0,
                  collision_threshold: float = 0.05, collision_gain: float = 1.0,
                  k_p: float = 5.0) -> TaskStack:
    """The fixed five-level hierarchy, safety above tracking."""
    return TaskStack((
        make_joint_limit_task(limit_margin, limit_gain),
        make_self_collision_task(collision_threshold, collision_gain),
        make_torso_task(k_p),
        make_wrist_task(k_p),
        make_elbow_task(k_p),
    ))


# -- solver -------------------------------------------------------------------

def _blocked_damped_pinv(mat: np.ndarray, damping: float, scale: float) -> np.ndarray:
    """Damped inverse that treats noise-level singular values as exact zeros.

    Once the hierarchy has used up the null space, J N collapses to
    rounding noise; a plain damped inverse amplifies such values by up
    to 1/(2*damping) along directions inside the higher tasks' row
    space. Anything below the floor is a blocked direction and must
    contribute nothing.
    """
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    floor = 1e-10 * max(1.0, scale)
    gains = np.where(s > floor, s / (s * s + damping * damping), 0.0)
    return (vt.T * gains) @ u.T


def solve_stack(stack: TaskStack, model: RobotModel, q,
                goals: GoalSet | None = None, damping: float = 1e-6,
                poses=None, with_reports: bool = False):
    """Resolve the hierarchy into one joint velocity vector.

    Zero-dimension tasks are skipped and cost nothing. With
    with_reports=True also returns per-level telemetry (residuals,
    remaining null-space dimension, collision emergencies).
    """
    q = np.asarray(q, dtype=float)
    if poses is None:
        poses = forward_kinematics(model, q)
    qdot = np.zeros(model.dof)
    j_aug = np.zeros((0, model.dof))
    projector = np.eye(model.dof)
    reports = []
    for task in stack.tasks:
        built = task.build(model, q, goals, poses)
        jac, xdot = built[:2]
        emergency = bool(built[2]) if len(built) > 2 else False
        jac = np.atleast_2d(np.asarray(jac, dtype=float))
        xdot = np.atleast_1d(np.asarray(xdot, dtype=float))
        if jac.shape[0] == 0:
            if with_reports:
                nullity = model.dof - (np.linalg.matrix_rank(j_aug)
                                       if j_aug.size else 0)
                reports.append(TaskReport(task.name, 0, 0.0, nullity, emergency))
            continue
        if jac.shape[1] != model.dof:
            raise ValueError(f"task {task.name}: {jac.shape[1]} columns "
                             f"for a {model.dof}-DOF model")
        if not np.all(np.isfinite(xdot)):
            raise ValueError(f"task {task.name}: non-finite desired velocity")
        inv = _blocked_damped_pinv(jac @ projector, damping,
                                   float(np.linalg.norm(jac)))
        qdot = qdot + inv @ (xdot - jac @ qdot)
        j_aug = np.vstack([j_aug, jac])
        projector = null_space_projector(j_aug)
        if with_reports:
            nullity = model.dof - np.linalg.matrix_rank(j_aug)
            residual = float(np.linalg.norm(jac @ qdot - xdot))
            reports.append(TaskReport(task.name, jac.shape[0], residual,
                                      nullity, emergency))
    if with_reports:
        return qdot, reports
    return qdot
