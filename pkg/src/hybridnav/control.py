"""Rolling-mode controller, Kalman-Bucy estimator and system identification helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import wrap_angle


def angle_dist_s1(a: float, b: float) -> float:
    """Signed shortest rotation from ``b`` to ``a`` on the circle, in (-pi, pi]."""
    return wrap_angle(a - b)


# -- rolling controller -------------------------------------------------------

@dataclass(frozen=True)
class ControllerGains:
    pos_kp: float = 0.8
    yaw_kp: float = 2.0
    yaw_kd: float = 0.2
    vel_kd: float = 1.5
    vel_ki: float = 0.3
    pitch_kp: float = 4.0
    pitch_kd: float = 0.5
    pitch_ki: float = 0.2

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"gain {name} must be >= 0")


@dataclass
class ControllerState:
    chi1: float = 0.0
    chi2: float = 0.0
    prev_yaw_error: float | None = None
    clamp: float = 2.0


@dataclass(frozen=True)
class RollingInput:
    """Estimated state seen by the rolling controller."""

    x: float
    y: float
    yaw: float
    pitch: float = 0.0
    pitch_rate: float = 0.0
    forward_velocity: float = 0.0


@dataclass(frozen=True)
class RollingOutput:
    pitch_moment: float
    roll_moment: float
    yaw_moment: float
    desired_pitch: float
    desired_velocity: float
    saturated: bool = False


def rolling_control_step(state: RollingInput, goal_xy, gains: ControllerGains, cstate: ControllerState,
                         dt: float, mass: float = 1.5, thrust: float = 14.7, feedforward_velocity: float = 0.0):
    """One cycle of the position -> yaw/velocity -> mixer -> pitch cascade.

    Mutates ``cstate`` (integrators and the stored yaw error) and returns a
    ``RollingOutput``.
    """
    ex_w = goal_xy[0] - state.x
    ey_w = goal_xy[1] - state.y
    c, s = math.cos(state.yaw), math.sin(state.yaw)
    # world error expressed in the yaw-aligned rolling frame
    ex_r = c * ex_w + s * ey_w
    v_des = gains.pos_kp * ex_r

    if ex_w == 0.0 and ey_w == 0.0:
        yaw_err = 0.0
    else:
        yaw_err = angle_dist_s1(math.atan2(ey_w, ex_w), state.yaw)
    yaw_err_rate = 0.0 if cstate.prev_yaw_error is None or dt <= 0 else (yaw_err - cstate.prev_yaw_error) / dt
    cstate.prev_yaw_error = yaw_err
    m_z = gains.yaw_kp * yaw_err + gains.yaw_kd * yaw_err_rate

    vel_err = v_des + feedforward_velocity - state.forward_velocity
    force = mass * thrust
    a_x = gains.vel_kd * vel_err + gains.vel_ki * cstate.chi1
    saturated = abs(a_x) > force
    if not saturated:
        # conditional integration: the integrator freezes while the mixer saturates
        cstate.chi1 = float(np.clip(cstate.chi1 + vel_err * dt, -cstate.clamp, cstate.clamp))
    ratio = max(-1.0, min(1.0, a_x / force)) if force > 0 else 0.0
    theta_d = math.asin(ratio)

    # yaw moment re-expressed in the pitched body frame
    m_x_body = m_z * math.sin(state.pitch)
    m_z_body = m_z * math.cos(state.pitch)

    pitch_err = angle_dist_s1(theta_d, state.pitch)
    cstate.chi2 = float(np.clip(cstate.chi2 + pitch_err * dt, -cstate.clamp, cstate.clamp))
    m_y = gains.pitch_kp * pitch_err + gains.pitch_kd * (-state.pitch_rate) + gains.pitch_ki * cstate.chi2
    return RollingOutput(m_y, m_x_body, m_z_body, theta_d, v_des, saturated)


# -- thrust rating ------------------------------------------------------------

class NoHoverError(ValueError):
    pass


def thrust_rating(mass: float, g: float, t_max: float) -> float:
    if t_max <= 0:
        raise ValueError("maximum thrust must be positive")
    return mass * g / t_max


def extract_hover_rating(log, rate_tol: float = 0.02, min_duration: float = 1.0,
                         min_altitude: float = 0.1) -> float:
    """Mean thrust fraction over the longest steady-altitude window of a flight log.

    ``log`` rows are ``(thrust_fraction, altitude, t)``.  A sample is steady
    when the altitude rate on every adjacent interval is below ``rate_tol``
    and the vehicle is airborne (altitude above ``min_altitude``).
    """
    arr = np.asarray(log, dtype=float)
    if arr.ndim != 2 or len(arr) < 3:
        raise NoHoverError("log too short")
    thrust, alt, t = arr[:, 0], arr[:, 1], arr[:, 2]
    slow = np.abs(np.diff(alt) / np.diff(t)) < rate_tol
    steady = np.empty(len(arr), dtype=bool)
    steady[0] = slow[0]
    steady[-1] = slow[-1]
    steady[1:-1] = slow[:-1] & slow[1:]
    steady &= alt > min_altitude

    best = None
    start = None
    for i, flag in enumerate(np.append(steady, False)):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            span = t[i - 1] - t[start]
            if best is None or span > best[0]:
                best = (span, start, i)
            start = None
    if best is None or best[0] < min_duration:
        raise NoHoverError("no steady-altitude window in log")
    _, lo, hi = best
    return float(thrust[lo:hi].mean())


def read_hover_log(path):
    """Parse ``t thrust_fraction altitude`` lines into ``(thrust, altitude, t)`` rows."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 't thrust altitude'")
        t, thrust, alt = map(float, parts)
        rows.append((thrust, alt, t))
    return rows


# -- estimator ----------------------------------------------------------------

@dataclass
class EkfSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Bw: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x_hat: np.ndarray
    X: np.ndarray
    _r_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("A", "B", "C", "Bw", "Q", "R", "X"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        self.x_hat = np.atleast_1d(np.asarray(self.x_hat, dtype=float))
        self._r_inv = np.linalg.inv(self.R)

    @property
    def gain(self) -> np.ndarray:
        return self.X @ self.C.T @ self._r_inv


def ekf_step(sys: EkfSystem, u, y, dt: float) -> EkfSystem:
    """Advance estimate and covariance over ``dt`` with one RK4 step.

    The measurement and input are held constant across the step.  The
    covariance is re-symmetrised and its eigenvalues floored at zero.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    A, B, C = sys.A, sys.B, sys.C
    rinv = sys._r_inv
    diffusion = sys.Bw @ sys.Q @ sys.Bw.T
    n = len(sys.x_hat)

    def deriv(z):
        xh = z[:n]
        X = z[n:].reshape(n, n)
        L = X @ C.T @ rinv
        dx = A @ xh + B @ u + L @ (y - C @ xh)
        dX = A @ X + X @ A.T + diffusion - X @ C.T @ rinv @ C @ X
        return np.concatenate((dx, dX.ravel()))

    z = np.concatenate((sys.x_hat, sys.X.ravel()))
    k1 = deriv(z)
    k2 = deriv(z + 0.5 * dt * k1)
    k3 = deriv(z + 0.5 * dt * k2)
    k4 = deriv(z + dt * k3)
    z = z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    X = z[n:].reshape(n, n)
    X = 0.5 * (X + X.T)
    w, v = np.linalg.eigh(X)
    if w.min() < 0:
        X = (v * np.maximum(w, 0.0)) @ v.T
        X = 0.5 * (X + X.T)
    sys.x_hat = z[:n]
    sys.X = X
    return sys


# -- step response ------------------------------------------------------------

@dataclass(frozen=True)
class StepMetrics:
    overshoot_pct: float
    settling_time: float
    oscillations: int


def step_response_metrics(trace, setpoint: float, band: float = 0.02) -> StepMetrics:
    """Overshoot, 2% settling time and setpoint crossings of a step response.

    The initial value is taken from the first sample; a trace starting on
    the setpoint measures its band against the setpoint.  A trace that is
    still outside the band at its last sample never settled and reports an
    infinite settling time.
    """
    arr = np.asarray(trace, dtype=float)
    if arr.ndim != 2 or len(arr) == 0:
        raise ValueError("trace must be a non-empty list of (t, value)")
    t, v = arr[:, 0], arr[:, 1]
    if np.any(np.diff(t) <= 0):
        raise ValueError("time must be strictly increasing")
    step = setpoint - v[0]
    if step == 0:
        # no step to normalise by: judge the band against the setpoint itself
        overshoot = 0.0
        scale = max(abs(setpoint), 1.0)
    else:
        progress = (v - v[0]) / step
        overshoot = max(0.0, float(progress.max()) - 1.0) * 100.0
        scale = abs(step)
    outside = np.abs(v - setpoint) > band * scale
    if outside[-1]:
        settling = math.inf
    elif not outside.any():
        settling = 0.0
    else:
        last = int(np.flatnonzero(outside)[-1])
        settling = float(t[last + 1] - t[0])
    err = v - setpoint
    signs = np.sign(err[err != 0])
    crossings = int(np.count_nonzero(np.diff(signs)))
    return StepMetrics(overshoot, settling, crossings)
