"""Rigid-body geometry and the matrix helpers shared by every controller.

Rotations are stored as unit quaternions (w, x, y, z); composing quaternions
keeps long kinematic chains on the unit sphere where chained 3x3 products
slowly drift. Transforms pair a rotation with a translation and compose as
T_a_b * T_b_c = T_a_c.
"""

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Rotation",
    "Transform",
    "pseudo_inverse",
    "null_space_projector",
    "wrap_angle",
]


def _vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    if not np.isfinite(a).all():
        raise ValueError("non-finite 3-vector")
    return a


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(theta + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion, scalar first.

    The constructor normalizes its input and rejects anything further than
    1e-3 from the unit sphere; everything downstream may then assume unit
    norm to 1e-9.
    """

    wxyz: np.ndarray

    def __init__(self, wxyz):
        q = np.asarray(wxyz, dtype=float).reshape(4)
        if not np.isfinite(q).all():
            raise ValueError("non-finite quaternion")
        n = float(np.linalg.norm(q))
        if abs(n - 1.0) > 1e-3:
            raise ValueError(f"quaternion norm {n:.6f} too far from 1")
        if abs(n - 1.0) > 4.0 * np.finfo(float).eps:
            q = q / n
        # Inputs already unit to machine precision are stored verbatim so a
        # quaternion survives serialize/parse cycles bit for bit.
        object.__setattr__(self, "wxyz", q)

    # -- constructors -------------------------------------------------

    @staticmethod
    def identity() -> "Rotation":
        return Rotation((1.0, 0.0, 0.0, 0.0))

    @staticmethod
    def from_axis_angle(axis, angle: float) -> "Rotation":
        a = _vec3(axis)
        n = float(np.linalg.norm(a))
        if n < 1e-12:
            if abs(angle) < 1e-12:
                return Rotation.identity()
            raise ValueError("zero axis with non-zero angle")
        half = 0.5 * float(angle)
        return Rotation(np.concatenate(([math.cos(half)], math.sin(half) * a / n)))

    @staticmethod
    def from_rotvec(rv) -> "Rotation":
        r = _vec3(rv)
        angle = float(np.linalg.norm(r))
        if angle < 1e-12:
            # First-order quaternion; adequate far below the norm tolerance.
            return Rotation(np.concatenate(([1.0], 0.5 * r)))
        return Rotation.from_axis_angle(r / angle, angle)

    @staticmethod
    def rot_x(angle: float) -> "Rotation":
        return Rotation.from_axis_angle((1.0, 0.0, 0.0), angle)

    @staticmethod
    def rot_y(angle: float) -> "Rotation":
        return Rotation.from_axis_angle((0.0, 1.0, 0.0), angle)

    @staticmethod
    def rot_z(angle: float) -> "Rotation":
        return Rotation.from_axis_angle((0.0, 0.0, 1.0), angle)

    @staticmethod
    def from_matrix(mat) -> "Rotation":
        """Shepperd's method: branch on the largest diagonal term."""
        m = np.asarray(mat, dtype=float).reshape(3, 3)
        t = m[0, 0] + m[1, 1] + m[2, 2]
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            q = (0.25 * s,
                 (m[2, 1] - m[1, 2]) / s,
                 (m[0, 2] - m[2, 0]) / s,
                 (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = ((m[2, 1] - m[1, 2]) / s,
                 0.25 * s,
                 (m[0, 1] + m[1, 0]) / s,
                 (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] >= m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q = ((m[0, 2] - m[2, 0]) / s,
                 (m[0, 1] + m[1, 0]) / s,
                 0.25 * s,
                 (m[1, 2] + m[2, 1]) / s)
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q = ((m[1, 0] - m[0, 1]) / s,
                 (m[0, 2] + m[2, 0]) / s,
                 (m[1, 2] + m[2, 1]) / s,
                 0.25 * s)
        return Rotation(q)

    # -- algebra ------------------------------------------------------

    def compose(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self.wxyz
        w2, x2, y2, z2 = other.wxyz
        return Rotation((
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return self.compose(other)

    def inverse(self) -> "Rotation":
        w, x, y, z = self.wxyz
        return Rotation((w, -x, -y, -z))

    def apply(self, v) -> np.ndarray:
        """Rotate a 3-vector (or an (..., 3) stack of them)."""
        a = np.asarray(v, dtype=float)
        if a.shape == (3,):
            return self.as_matrix() @ a
        return a @ self.as_matrix().T

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.wxyz
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def canonical(self) -> "Rotation":
        """Representative with w >= 0 (quaternions double-cover rotations)."""
        if self.wxyz[0] < 0.0:
            return Rotation(-self.wxyz)
        return self

    def as_rotvec(self) -> np.ndarray:
        """Axis-angle vector of the shorter arc; norm in [0, pi]."""
        q = self.canonical().wxyz
        w = min(1.0, q[0])
        vn = float(np.linalg.norm(q[1:]))
        if vn < 1e-12:
            return 2.0 * q[1:]
        angle = 2.0 * math.atan2(vn, w)
        return (angle / vn) * q[1:]

    def angle_to(self, other: "Rotation") -> float:
        return float(np.linalg.norm((other @ self.inverse()).as_rotvec()))

    def approx_equal(self, other: "Rotation", tol: float = 1e-9) -> bool:
        """Equality as rotations: q and -q name the same element."""
        d = min(np.abs(self.wxyz - other.wxyz).max(),
                np.abs(self.wxyz + other.wxyz).max())
        return d <= tol

    def yaw(self) -> float:
        m = self.as_matrix()
        return math.atan2(m[1, 0], m[0, 0])

    def __repr__(self) -> str:
        w, x, y, z = self.wxyz
        return f"Rotation(w={w:.6f}, x={x:.6f}, y={y:.6f}, z={z:.6f})"


@dataclass(frozen=True, eq=False)
class Transform:
    """Rigid transform: rotation plus translation, T_a_b = pose of b in a."""

    rotation: Rotation
    translation: np.ndarray

    def __init__(self, rotation: Rotation | None = None, translation=None):
        object.__setattr__(self, "rotation",
                           rotation if rotation is not None else Rotation.identity())
        object.__setattr__(self, "translation",
                           _vec3(translation) if translation is not None
                           else np.zeros(3))

    @staticmethod
    def identity() -> "Transform":
        return Transform()

    @staticmethod
    def from_matrix(mat) -> "Transform":
        m = np.asarray(mat, dtype=float).reshape(4, 4)
        return Transform(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Transform") -> "Transform":
        return Transform(self.rotation @ other.rotation,
                         self.translation + self.rotation.apply(other.translation))

    def __matmul__(self, other: "Transform") -> "Transform":
        return self.compose(other)

    def inverse(self) -> "Transform":
        rinv = self.rotation.inverse()
        return Transform(rinv, -rinv.apply(self.translation))

    def apply(self, point) -> np.ndarray:
        return self.rotation.apply(point) + self.translation

    def approx_equal(self, other: "Transform", tol: float = 1e-9) -> bool:
        return (self.rotation.approx_equal(other.rotation, tol)
                and bool(np.abs(self.translation - other.translation).max() <= tol))

    def __repr__(self) -> str:
        t = self.translation
        return (f"Transform(t=[{t[0]:.6f}, {t[1]:.6f}, {t[2]:.6f}], "
                f"r={self.rotation!r})")


def pseudo_inverse(mat, damping: float = 0.0) -> np.ndarray:
    """Right pseudo-inverse with optional Tikhonov damping.

    damping == 0 computes J^T (J J^T)^-1 and requires full row rank;
    damping > 0 returns the damped least-squares inverse, well posed for
    any J (a rank-deficient direction simply contributes nothing).
    """
    j = np.atleast_2d(np.asarray(mat, dtype=float))
    if not np.isfinite(j).all():
        raise ValueError("non-finite matrix")
    if damping < 0.0:
        raise ValueError("damping must be >= 0")
    m, n = j.shape
    if damping == 0.0:
        gram = j @ j.T
        try:
            return np.linalg.solve(gram, j).T
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                "undamped pseudo-inverse needs full row rank") from exc
    lam2 = damping * damping
    if m <= n:
        return j.T @ np.linalg.inv(j @ j.T + lam2 * np.eye(m))
    # Tall matrix: invert on the smaller (column) side, same operator.
    return np.linalg.solve(j.T @ j + lam2 * np.eye(n), j.T)


def null_space_projector(j_aug, rcond: float = 1e-10) -> np.ndarray:
    """Orthogonal projector onto the null space of a stacked task matrix.

    Built from the right singular vectors above the rank cutoff, so the
    result is symmetric and idempotent to machine precision and J @ N
    vanishes up to rcond * sigma_max even for rank-deficient stacks.
    """
    j = np.atleast_2d(np.asarray(j_aug, dtype=float))
    if not np.isfinite(j).all():
        raise ValueError("non-finite matrix")
    n = j.shape[1]
    if j.shape[0] == 0:
        return np.eye(n)
    _, s, vt = np.linalg.svd(j, full_matrices=False)
    if s.size == 0 or s[0] <= 0.0:
        return np.eye(n)
    row_basis = vt[s > rcond * s[0]]
    return np.eye(n) - row_basis.T @ row_basis
