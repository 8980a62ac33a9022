"""Robot description: joint tree, forward kinematics, geometric Jacobians.

Models are declared in a TOML file as an array of [[joint]] tables plus a
[frames] section naming the footprint/torso/shoulder/elbow/wrist links, the
segment lengths used for pose correspondence, and optional collision
spheres. The bundled default is a mobile manipulator with a prismatic torso
and a 7-joint arm (spherical shoulder and wrist); with the differential
base's two command DOF it totals ten.
"""

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .geom import Rotation, Transform

__all__ = [
    "JointSpec",
    "CollisionSphere",
    "RobotModel",
    "JointLimitError",
    "ModelError",
    "load_model",
    "load_default_model",
    "default_model_path",
    "forward_kinematics",
    "geometric_jacobian",
    "frame_jacobian",
    "sphere_distances",
    "FRAME_KEYS",
]

FRAME_KEYS = ("rf", "rt", "rs", "re", "rw")


class ModelError(ValueError):
    """Malformed model file."""


class JointLimitError(ValueError):
    """Configuration outside a joint's position limits."""


@dataclass(frozen=True)
class JointSpec:
    name: str
    kind: str  # "revolute" | "prismatic"
    axis: np.ndarray  # unit, in the joint frame
    lower: float
    upper: float
    velocity_limit: float
    parent: str  # parent link
    child: str  # child link (coincides with the joint frame after motion)
    origin: Transform  # fixed parent-link -> joint-frame offset


@dataclass(frozen=True)
class CollisionSphere:
    link: str
    offset: np.ndarray  # center in the link frame
    radius: float


@dataclass(frozen=True)
class RobotModel:
    name: str
    joints: tuple[JointSpec, ...]  # topological order, root first
    root: str
    frames: dict[str, str]  # canonical frame key -> link name
    lengths: dict[str, float]  # "rf_rt", "rs_re", "re_rw"
    spheres: tuple[CollisionSphere, ...] = ()
    # Derived, filled by the loader:
    links: tuple[str, ...] = ()
    path_joints: dict[str, tuple[int, ...]] = field(default_factory=dict)
    adjacent_links: frozenset[frozenset] = frozenset()

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def joint_names(self) -> tuple[str, ...]:
        return tuple(j.name for j in self.joints)

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints])

    @property
    def velocity_limits(self) -> np.ndarray:
        return np.array([j.velocity_limit for j in self.joints])

    def joint_index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise KeyError(name)

    def frame_link(self, key: str) -> str:
        return self.frames[key]

    def clamp(self, q) -> np.ndarray:
        return np.clip(np.asarray(q, dtype=float), self.lower, self.upper)


def _joint_motion(spec: JointSpec, value: float) -> Transform:
    if spec.kind == "revolute":
        return Transform(Rotation.from_axis_angle(spec.axis, value))
    return Transform(None, spec.axis * value)


def _check_q(model: RobotModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != model.dof:
        raise ValueError(f"expected {model.dof} joint values, got {q.shape[0]}")
    if not np.isfinite(q).all():
        raise ValueError("non-finite joint value")
    for i, spec in enumerate(model.joints):
        if q[i] < spec.lower - 1e-9 or q[i] > spec.upper + 1e-9:
            raise JointLimitError(
                f"joint '{spec.name}' value {q[i]:.6f} outside "
                f"[{spec.lower:.6f}, {spec.upper:.6f}]")
    return q


def forward_kinematics(model: RobotModel, q) -> dict[str, Transform]:
    """Pose of every link in the root (footprint) frame."""
    q = _check_q(model, q)
    poses: dict[str, Transform] = {model.root: Transform.identity()}
    for i, spec in enumerate(model.joints):
        frame = poses[spec.parent] @ spec.origin
        poses[spec.child] = frame @ _joint_motion(spec, q[i])
    return poses


def _fk_with_joint_frames(model: RobotModel, q):
    """Link poses plus each joint's pre-motion frame (for Jacobians)."""
    q = _check_q(model, q)
    poses: dict[str, Transform] = {model.root: Transform.identity()}
    joint_frames: list[Transform] = []
    for i, spec in enumerate(model.joints):
        frame = poses[spec.parent] @ spec.origin
        joint_frames.append(frame)
        poses[spec.child] = frame @ _joint_motion(spec, q[i])
    return poses, joint_frames


def geometric_jacobian(model: RobotModel, q, link: str,
                       point=None) -> np.ndarray:
    """6 x dof Jacobian of a link (rows: linear then angular, root frame).

    `point` optionally names a world-frame point rigidly attached to the
    link; its linear rows replace the link origin's.
    """
    poses, joint_frames = _fk_with_joint_frames(model, q)
    if link not in poses:
        raise KeyError(f"unknown link '{link}'")
    p = poses[link].translation if point is None else np.asarray(point, float)
    jac = np.zeros((6, model.dof))
    for idx in model.path_joints[link]:
        spec = model.joints[idx]
        frame = joint_frames[idx]
        axis_w = frame.rotation.apply(spec.axis)
        if spec.kind == "revolute":
            jac[:3, idx] = np.cross(axis_w, p - frame.translation)
            jac[3:, idx] = axis_w
        else:
            jac[:3, idx] = axis_w
    return jac


def frame_jacobian(model: RobotModel, q, key: str) -> np.ndarray:
    """Jacobian of a canonical frame (rf/rt/rs/re/rw)."""
    return geometric_jacobian(model, q, model.frame_link(key))


def sphere_distances(model: RobotModel, q,
                     poses: dict[str, Transform] | None = None):
    """Surface distances between collision spheres on non-adjacent links.

    Returns a list of (sphere_i, sphere_j, distance, center_i, center_j)
    ordered as in the model file; adjacent and same-link pairs are skipped.
    """
    if poses is None:
        poses = forward_kinematics(model, q)
    centers = [poses[s.link].apply(s.offset) for s in model.spheres]
    out = []
    for i in range(len(model.spheres)):
        for j in range(i + 1, len(model.spheres)):
            si, sj = model.spheres[i], model.spheres[j]
            if si.link == sj.link:
                continue
            if frozenset((si.link, sj.link)) in model.adjacent_links:
                continue
            gap = float(np.linalg.norm(centers[i] - centers[j])
                        - si.radius - sj.radius)
            out.append((si, sj, gap, centers[i], centers[j]))
    return out


# -- loading -------------------------------------------------------------


def _parse_transform(table: dict, where: str) -> Transform:
    xyz = table.get("origin_xyz", [0.0, 0.0, 0.0])
    rpy = table.get("origin_rpy", [0.0, 0.0, 0.0])
    if len(xyz) != 3 or len(rpy) != 3:
        raise ModelError(f"{where}: origin_xyz/origin_rpy must have 3 entries")
    rot = (Rotation.rot_z(rpy[2]) @ Rotation.rot_y(rpy[1])
           @ Rotation.rot_x(rpy[0]))
    return Transform(rot, xyz)


def load_model(path) -> RobotModel:
    """Parse and validate a robot model file."""
    path = Path(path)
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)

    name = doc.get("robot", {}).get("name", path.stem)

    raw_joints = doc.get("joint", [])
    if not raw_joints:
        raise ModelError("model file declares no joints")

    joints = []
    children = set()
    parents = set()
    for jt in raw_joints:
        jname = jt.get("name")
        if not jname:
            raise ModelError("joint without a name")
        kind = jt.get("kind")
        if kind not in ("revolute", "prismatic"):
            raise ModelError(f"joint '{jname}': kind must be revolute|prismatic")
        axis = np.asarray(jt.get("axis", ()), dtype=float)
        if axis.shape != (3,):
            raise ModelError(f"joint '{jname}': axis must have 3 entries")
        norm = float(np.linalg.norm(axis))
        if abs(norm - 1.0) > 1e-6:
            raise ModelError(f"joint '{jname}': axis norm {norm:.6f} != 1")
        axis = axis / norm
        limits = jt.get("limits")
        if (not isinstance(limits, (list, tuple)) or len(limits) != 2):
            raise ModelError(f"joint '{jname}': limits must be [lower, upper]")
        lower, upper = float(limits[0]), float(limits[1])
        if not lower < upper:
            raise ModelError(f"joint '{jname}': lower {lower} must be < upper {upper}")
        vmax = float(jt.get("velocity_limit", 0.0))
        if vmax <= 0.0:
            raise ModelError(f"joint '{jname}': velocity_limit must be > 0")
        parent, child = jt.get("parent"), jt.get("child")
        if not parent or not child:
            raise ModelError(f"joint '{jname}': parent and child links required")
        if child in children:
            raise ModelError(f"link '{child}' has two parent joints")
        children.add(child)
        parents.add(parent)
        joints.append(JointSpec(jname, kind, axis, lower, upper, vmax,
                                parent, child,
                                _parse_transform(jt, f"joint '{jname}'")))

    roots = parents - children
    if len(roots) != 1:
        raise ModelError(f"tree must have exactly one root link, found {sorted(roots)}")
    root = roots.pop()

    # Topological order by repeated sweep (models are small).
    placed = {root}
    ordered: list[JointSpec] = []
    pending = list(joints)
    while pending:
        progressed = False
        for jt in list(pending):
            if jt.parent in placed:
                ordered.append(jt)
                placed.add(jt.child)
                pending.remove(jt)
                progressed = True
        if not progressed:
            loose = sorted(j.name for j in pending)
            raise ModelError(f"joints unreachable from root: {loose}")

    links = (root,) + tuple(j.child for j in ordered)

    # Ancestor joint indices per link.
    parent_joint = {j.child: i for i, j in enumerate(ordered)}
    path_joints: dict[str, tuple[int, ...]] = {root: ()}
    for link in links[1:]:
        chain = []
        cur = link
        while cur != root:
            idx = parent_joint[cur]
            chain.append(idx)
            cur = ordered[idx].parent
        path_joints[link] = tuple(reversed(chain))

    frames = doc.get("frames")
    if not frames:
        raise ModelError("missing [frames] section")
    for key in FRAME_KEYS:
        if key not in frames:
            raise ModelError(f"[frames] missing '{key}'")
        if frames[key] not in links:
            raise ModelError(f"[frames] {key} = '{frames[key]}' is not a link")
    # The canonical chain must be nested root-out: each frame's link lies on
    # (or equals the end of) the next frame's ancestor path.
    chain_links = [frames[k] for k in FRAME_KEYS]
    for nearer, farther in zip(chain_links, chain_links[1:]):
        anc = {ordered[i].child for i in path_joints[farther]} | {root, farther}
        if nearer not in anc:
            raise ModelError(f"frame chain broken: '{nearer}' is not an "
                             f"ancestor of '{farther}'")

    lengths_raw = doc.get("lengths")
    if not lengths_raw:
        raise ModelError("missing [lengths] section")
    lengths = {}
    for key in ("rf_rt", "rs_re", "re_rw"):
        if key not in lengths_raw:
            raise ModelError(f"[lengths] missing '{key}'")
        val = float(lengths_raw[key])
        if val <= 0.0:
            raise ModelError(f"[lengths] {key} must be > 0")
        lengths[key] = val

    spheres = []
    for st in doc.get("sphere", []):
        link = st.get("link")
        if link not in links:
            raise ModelError(f"sphere on unknown link '{link}'")
        offset = np.asarray(st.get("offset", (0.0, 0.0, 0.0)), dtype=float)
        if offset.shape != (3,):
            raise ModelError(f"sphere on '{link}': offset must have 3 entries")
        radius = float(st.get("radius", 0.0))
        if radius <= 0.0:
            raise ModelError(f"sphere on '{link}': radius must be > 0")
        spheres.append(CollisionSphere(link, offset, radius))

    adjacent = frozenset(frozenset((j.parent, j.child)) for j in ordered)

    return RobotModel(
        name=name,
        joints=tuple(ordered),
        root=root,
        frames={k: frames[k] for k in FRAME_KEYS},
        lengths=lengths,
        spheres=tuple(spheres),
        links=links,
        path_joints=path_joints,
        adjacent_links=adjacent,
    )


def default_model_path() -> Path:
    return Path(resources.files("rtwbc").joinpath("data/mobile_arm.toml"))


def load_default_model() -> RobotModel:
    return load_model(default_model_path())
