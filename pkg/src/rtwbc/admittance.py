"""Variable admittance between the motion reference and the tracker.

The commanded pose is the reference deflected by a virtual mass-spring-
damper, one scalar system per axis:

    m*edd + d(t)*ed + k(t)*e = f_ext

Stiffness is scheduled by who is leading. A filtered interaction force
above the threshold raises the interaction factor psi; the sigmoid role
factor turns psi into the follower share, and the robot's stiffness
runs on the leader share (1 - role factor): no contact means a stiff,
faithful tracker, a sustained grasp means a compliant arm the person
can steer. Damping keeps a constant damping ratio throughout.

Each control tick holds force and gains constant and propagates the
two-dimensional state with the exact matrix exponential of that tick's
system, so the discrete trajectory samples the continuous solution
exactly; integrator drift never eats into the stability margins the
monitor is checking.
"""

from __future__ import annotations

import cmath
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .geom import Rotation, Transform


@dataclass(frozen=True)
class AdmittanceParams:
    """Virtual dynamics, role schedule, and filtering configuration."""

    m: float = 1.0
    zeta: float = 1.1
    k_min: float = 10.0
    k_max: float = 500.0
    a: float = 20.0
    b: float = -5.5
    c_plus: float = 1.5
    c_minus: float = -0.2
    f_thres: float = 5.0
    filter_window: int = 25
    sample_rate: float = 40.0

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError("virtual mass must be positive")
        if not self.zeta > 0:
            raise ValueError("damping ratio must be positive")
        if not 0 < self.k_min < self.k_max:
            raise ValueError("need 0 < k_min < k_max")
        if not self.c_plus > 0:
            raise ValueError("c_plus must be positive")
        if not self.c_minus < 0:
            raise ValueError("c_minus must be negative")
        if not self.f_thres > 0:
            raise ValueError("force threshold must be positive")
        if self.filter_window < 1:
            raise ValueError("filter window needs at least one sample")
        if not self.sample_rate > 0:
            raise ValueError("sample rate must be positive")

    @property
    def gamma(self) -> float:
        """Least conservative decay rate, 2*zeta*sqrt(k_min/m)."""
        return 2.0 * self.zeta * math.sqrt(self.k_min / self.m)


@dataclass(frozen=True)
class Wrench:
    force: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "force", np.asarray(self.force, dtype=float))
        object.__setattr__(self, "torque", np.asarray(self.torque, dtype=float))
        if self.force.shape != (3,) or self.torque.shape != (3,):
            raise ValueError("wrench needs 3-vector force and torque")

    @classmethod
    def zero(cls) -> "Wrench":
        return cls(np.zeros(3), np.zeros(3))

    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.force))
                    and np.all(np.isfinite(self.torque)))

    def force_norm(self) -> float:
        return float(np.linalg.norm(self.force))


def filter_wrench(history: deque, sample: Wrench) -> Wrench:
    """Append and return the unweighted mean over the retained window.

    history must be a deque with maxlen = filter_window; during warm-up
    the mean runs over however many samples exist, so the output never
    jumps from an artificial zero-fill.
    """
    history.append(sample)
    force = np.mean([w.force for w in history], axis=0)
    torque = np.mean([w.torque for w in history], axis=0)
    return Wrench(force, torque)


class WrenchFilter:
    """Moving-average force filter with warm-up handling."""

    def __init__(self, window: int):
        self._history = deque(maxlen=int(window))

    def update(self, sample: Wrench) -> Wrench:
        return filter_wrench(self._history, sample)

    def __len__(self):
        return len(self._history)


def update_interaction_factor(psi: float, f_filtered: Wrench, dt: float,
                              params: AdmittanceParams) -> float:
    """Integrate the interaction factor one tick and clamp to [0, 1].

    Only the force magnitude is tested against the threshold; torque is
    deliberately excluded.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    rate = params.c_plus if f_filtered.force_norm() > params.f_thres \
        else params.c_minus
    return min(1.0, max(0.0, psi + rate * dt))


def role_factor(psi: float, params: AdmittanceParams) -> float:
    """Follower share: logistic in psi, near 0 at rest, near 1 in contact."""
    return 1.0 / (1.0 + math.exp(-(params.a * psi + params.b)))


def stiffness(alpha: float, params: AdmittanceParams) -> float:
    """Affine schedule between the stiffness bounds."""
    return params.k_min + alpha * (params.k_max - params.k_min)


def damping(k: float, params: AdmittanceParams) -> float:
    """Damping for a constant damping ratio at the current stiffness."""
    return 2.0 * params.zeta * math.sqrt(params.m * k)


def stiffness_rate_bound(k: float, params: AdmittanceParams) -> float:
    """Largest stiffening rate that keeps the energy argument valid."""
    gamma = params.gamma
    sk = math.sqrt(k)
    return 2.0 * gamma * k * sk / (sk + 2.0 * params.zeta * gamma
                                   * math.sqrt(params.m))


@dataclass(frozen=True)
class StabilityCheck:
    lhs: float
    rhs: float
    holds: bool


def check_sufficient_stability(params: AdmittanceParams) -> StabilityCheck:
    """Worst-case schedule rate against the worst-case admissible rate.

    The left side bounds how fast the schedule can stiffen as contact is
    released; the right side is the rate bound at the softest point. If
    lhs < rhs the scheduled system can never outrun its own stability
    margin, independent of the force profile.
    """
    eb = math.exp(-params.b)
    lhs = (-params.a * eb * (params.k_max - params.k_min) * params.c_minus
           / (1.0 + eb) ** 2)
    rhs = (4.0 * params.zeta * math.sqrt(params.k_min ** 3)
           / (1.0 + 4.0 * params.zeta * math.sqrt(params.m)))
    return StabilityCheck(lhs=lhs, rhs=rhs, holds=lhs < rhs)


@dataclass(frozen=True)
class MonitorSample:
    t: float
    k: float
    k_dot: float
    bound: float
    margin: float
    violation: bool


class StabilityMonitor:
    """Tracks the realized stiffness rate against its admissible bound."""

    def __init__(self, params: AdmittanceParams):
        self._params = params
        self._last_k: float | None = None
        self._t = 0.0
        self.samples: list[MonitorSample] = []
        self.violations = 0

    def update(self, k: float, dt: float) -> MonitorSample:
        k_dot = 0.0 if self._last_k is None else (k - self._last_k) / dt
        self._last_k = k
        self._t += dt
        bound = stiffness_rate_bound(k, self._params)
        margin = bound - k_dot
        violation = margin < 0.0
        if violation:
            self.violations += 1
        sample = MonitorSample(self._t, k, k_dot, bound, margin, violation)
        self.samples.append(sample)
        return sample


# -- integration --------------------------------------------------------------

def _propagator(k: float, d: float, m: float, dt: float) -> np.ndarray:
    """Exact one-tick transition matrix of [e, ed] for frozen k, d, f.

    Built from the eigenvalues of [[0, 1], [-k/m, -d/m]]; complex
    arithmetic covers the underdamped case, and nearly repeated roots
    fall back to the confluent limit.
    """
    disc = cmath.sqrt(complex(d * d - 4.0 * k * m))
    s1 = (-d + disc) / (2.0 * m)
    s2 = (-d - disc) / (2.0 * m)
    a_mat = np.array([[0.0, 1.0], [-k / m, -d / m]], dtype=complex)
    eye = np.eye(2, dtype=complex)
    if abs(s1 - s2) < 1e-9 * max(1.0, abs(s1), abs(s2)):
        s = 0.5 * (s1 + s2)
        phi = cmath.exp(s * dt) * (eye + dt * (a_mat - s * eye))
    else:
        phi = (cmath.exp(s1 * dt) * (a_mat - s2 * eye)
               - cmath.exp(s2 * dt) * (a_mat - s1 * eye)) / (s1 - s2)
    return phi.real


def integrate_axis(e: float, edot: float, f: float, k: float, d: float,
                   m: float, dt: float) -> tuple[float, float]:
    """One exact tick of m*edd + d*ed + k*e = f with everything frozen."""
    phi = _propagator(k, d, m, dt)
    rest = np.array([f / k, 0.0])
    z = rest + phi @ (np.array([e, edot]) - rest)
    return float(z[0]), float(z[1])


class AdmittanceController:
    """Stateful six-axis admittance filter for the wrist reference.

    Owns the force filter, the interaction factor, the stiffness
    schedule, and the per-axis deflection state. One step per control
    tick; the caller supplies the current reference pose and whatever
    wrench sample arrived (None means no contact measurement).
    """

    def __init__(self, params: AdmittanceParams | None = None):
        self.params = params or AdmittanceParams()
        self._filter = WrenchFilter(self.params.filter_window)
        self.psi = 0.0
        self.alpha = role_factor(0.0, self.params)
        self.k = stiffness(1.0 - self.alpha, self.params)
        self.d = damping(self.k, self.params)
        self.e = np.zeros(3)
        self.e_dot = np.zeros(3)
        self.e_rot = np.zeros(3)
        self.e_rot_dot = np.zeros(3)
        self.filtered = Wrench.zero()
        self.faults = 0

    def step(self, x_ref: Transform, dt: float,
             wrench: Wrench | None = None) -> Transform:
        """Advance one tick and return the deflected command pose.

        A non-finite wrench sample is rejected outright: nothing
        advances, the fault counter ticks, and the previous deflection
        is re-applied to the new reference.
        """
        if not 0.0 < dt <= 0.1:
            raise ValueError("dt must be in (0, 0.1]")
        sample = wrench if wrench is not None else Wrench.zero()
        if not sample.finite():
            self.faults += 1
            return self.command(x_ref)

        self.filtered = self._filter.update(sample)
        self.psi = update_interaction_factor(self.psi, self.filtered, dt,
                                             self.params)
        self.alpha = role_factor(self.psi, self.params)
        # the robot stiffens on the leader share: contact hands over the lead
        self.k = stiffness(1.0 - self.alpha, self.params)
        self.d = damping(self.k, self.params)

        for axis in range(3):
            self.e[axis], self.e_dot[axis] = integrate_axis(
                self.e[axis], self.e_dot[axis], self.filtered.force[axis],
                self.k, self.d, self.params.m, dt)
            self.e_rot[axis], self.e_rot_dot[axis] = integrate_axis(
                self.e_rot[axis], self.e_rot_dot[axis],
                self.filtered.torque[axis], self.k, self.d, self.params.m, dt)
        return self.command(x_ref)

    def command(self, x_ref: Transform) -> Transform:
        """Apply the held deflection to a reference without advancing time."""
        rot = Rotation.from_rotvec(self.e_rot) @ x_ref.rotation
        return Transform(rot, x_ref.translation + self.e)
