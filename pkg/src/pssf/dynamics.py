"""Control-affine systems, the planar Segway model pair, and rollouts.

Systems are represented by their drift f(x) and actuation g(x) evaluators,
so xdot = f(x) + g(x) u (+ d for an additive disturbance). Rollouts use
fixed-step classical Runge-Kutta with zero-order-hold inputs, which keeps
simulations deterministic and mirrors a discrete control loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .ioutil import write_csv

#: Any state component beyond this magnitude is treated as numerical blow-up.
BLOWUP_LIMIT = 1e8


class NumericalBlowUpError(RuntimeError):
    """A state component exceeded :data:`BLOWUP_LIMIT` during integration."""


class NonFiniteDynamicsError(RuntimeError):
    """Drift or actuation produced NaN/Inf, which is a hard error."""


class SingularMassMatrixError(RuntimeError):
    """Mass matrix determinant fell below the guard threshold."""


class DisturbanceBoundError(RuntimeError):
    """A disturbance sample exceeded its declared sup-norm bound."""


@dataclass(frozen=True)
class ControlAffineSystem:
    """Evaluators for xdot = f(x) + g(x) u.

    Attributes:
        state_dim: n, dimension of the state.
        input_dim: m, dimension of the input.
        drift: x -> f(x), shape (n,).
        actuation: x -> g(x), shape (n, m).

    Local Lipschitz continuity of f and g is assumed, not checked; see
    :func:`lipschitz_probe` for a numerical diagnostic.
    """

    state_dim: int
    input_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    actuation: Callable[[np.ndarray], np.ndarray]

    def field_at(self, x: np.ndarray, u: np.ndarray, d: Optional[np.ndarray] = None) -> np.ndarray:
        """xdot = f(x) + g(x) u (+ d)."""
        xdot = self.drift(x) + self.actuation(x) @ u
        if d is not None:
            xdot = xdot + d
        return xdot


@dataclass(frozen=True)
class SegwayParams:
    """Physical parameters of the planar Segway (artifact defaults, SI units).

    The defaults describe a plausible human-carrying platform. They are
    artifact choices kept in config, not measured data.
    """

    body_mass: float = 44.8
    wheel_mass: float = 2.0
    com_length: float = 0.8
    body_inertia: float = 6.0
    wheel_radius: float = 0.195
    gravity: float = 9.81
    viscous_friction: float = 0.1
    motor_torque_scale: float = 1.0

    def __post_init__(self):
        positive = (
            "body_mass", "wheel_mass", "com_length", "body_inertia",
            "wheel_radius", "gravity", "motor_torque_scale",
        )
        for name in positive:
            if not getattr(self, name) > 0.0:
                raise ValueError(f"SegwayParams.{name} must be strictly positive")
        if self.viscous_friction < 0.0:
            raise ValueError("SegwayParams.viscous_friction must be >= 0")


@dataclass(frozen=True)
class PerturbationSpec:
    """Multiplicative parameter scalings plus effects to drop from a model."""

    scale: Mapping[str, float] = field(default_factory=dict)
    drop_friction: bool = False

    def apply(self, params: SegwayParams) -> SegwayParams:
        unknown = set(self.scale) - set(SegwayParams.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown Segway parameters in perturbation: {sorted(unknown)}")
        scaled = {name: getattr(params, name) * factor for name, factor in self.scale.items()}
        out = replace(params, **scaled)
        if self.drop_friction:
            out = replace(out, viscous_friction=0.0)
        return out


#: Nominal-model perturbation used by the benchmark scenario. It exercises
#: both the drift-error and actuation-error channels of the residual.
BENCHMARK_PERTURBATION = PerturbationSpec(
    scale={"body_mass": 1.15, "body_inertia": 0.85, "motor_torque_scale": 0.9},
    drop_friction=True,
)


def _segway_accelerations(p: SegwayParams, x: np.ndarray):
    """Mass-matrix pieces at state x = (pos, vel, pitch, pitch_rate).

    Wheeled inverted pendulum with coordinates q = (pos, pitch):

        D(q) qdd + C(q, qd) qd + G(q) = B tau

    The wheel's equivalent translational inertia uses the solid-disc value
    J_w / R^2 = wheel_mass / 2.

    Returns (free, gain): qdd = free + gain * tau.
    """
    _, vel, pitch, rate = x
    sin_t = math.sin(pitch)
    cos_t = math.cos(pitch)
    ml = p.body_mass * p.com_length

    d11 = p.body_mass + 1.5 * p.wheel_mass
    d12 = ml * cos_t
    d22 = p.body_inertia + ml * p.com_length
    det = d11 * d22 - d12 * d12
    if abs(det) < 1e-10:
        raise SingularMassMatrixError(f"det D(q) = {det} at pitch {pitch}")

    # rhs = B tau - C qd - G, with viscous friction acting on vel.
    c1 = -ml * sin_t * rate * rate + p.viscous_friction * vel
    g2 = -p.body_mass * p.gravity * p.com_length * sin_t
    b1 = p.motor_torque_scale / p.wheel_radius
    b2 = -p.motor_torque_scale

    # Explicit 2x2 inverse: D^-1 = [[d22, -d12], [-d12, d11]] / det.
    free1 = (d22 * (-c1) - d12 * (-g2)) / det
    free2 = (-d12 * (-c1) + d11 * (-g2)) / det
    gain1 = (d22 * b1 - d12 * b2) / det
    gain2 = (-d12 * b1 + d11 * b2) / det
    return (free1, free2), (gain1, gain2)


def segway_true(params: SegwayParams) -> ControlAffineSystem:
    """4-state planar Segway: x = (pos, vel, pitch, pitch_rate), scalar torque u."""

    def drift(x: np.ndarray) -> np.ndarray:
        (f1, f2), _ = _segway_accelerations(params, x)
        return np.array([x[1], f1, x[3], f2])

    def actuation(x: np.ndarray) -> np.ndarray:
        _, (g1, g2) = _segway_accelerations(params, x)
        return np.array([[0.0], [g1], [0.0], [g2]])

    return ControlAffineSystem(4, 1, drift, actuation)


def segway_nominal(params: SegwayParams, perturbation: PerturbationSpec) -> ControlAffineSystem:
    """Design model built from perturbed parameters (see PerturbationSpec)."""
    return segway_true(perturbation.apply(params))


def segway_energy(params: SegwayParams, x: np.ndarray) -> float:
    """Total mechanical energy; conserved when unactuated and frictionless."""
    _, vel, pitch, rate = x
    ml = params.body_mass * params.com_length
    d11 = params.body_mass + 1.5 * params.wheel_mass
    d12 = ml * math.cos(pitch)
    d22 = params.body_inertia + ml * params.com_length
    kinetic = 0.5 * (d11 * vel * vel + 2.0 * d12 * vel * rate + d22 * rate * rate)
    potential = params.body_mass * params.gravity * params.com_length * math.cos(pitch)
    return kinetic + potential


@dataclass(frozen=True)
class DisturbanceSignal:
    """Additive state disturbance with a declared sup-norm bound.

    ``evaluator(t, x, u)`` returns d in R^n. Every sample drawn during a
    rollout is checked against ``declared_bound`` (Euclidean norm); exceeding
    it raises :class:`DisturbanceBoundError`.
    """

    evaluator: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    declared_bound: float

    def __call__(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        d = np.asarray(self.evaluator(t, x, u), dtype=float)
        norm = float(np.linalg.norm(d))
        if norm > self.declared_bound * (1.0 + 1e-12) + 1e-15:
            raise DisturbanceBoundError(
                f"disturbance norm {norm} exceeds declared bound {self.declared_bound}"
            )
        return d


@dataclass(frozen=True)
class Trajectory:
    """Fixed-step rollout record.

    len(states) == len(times) and len(inputs) == len(times) - 1; inputs[j]
    is the zero-order-hold input applied over [times[j], times[j+1]).
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    terminated_early: bool = False
    termination_reason: Optional[str] = None

    def to_csv(self, path) -> None:
        """Write `t, x1..xn, u1..um` rows; the final row has no input cells."""
        n = self.states.shape[1]
        m = self.inputs.shape[1] if self.inputs.size else 1
        header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
        rows = []
        for j, t in enumerate(self.times):
            u = list(self.inputs[j]) if j < len(self.inputs) else [None] * m
            rows.append([t, *self.states[j], *u])
        write_csv(path, header, rows)


def step_rk4(
    system: ControlAffineSystem,
    x: np.ndarray,
    u: np.ndarray,
    d: Optional[np.ndarray],
    dt: float,
) -> np.ndarray:
    """One classical RK4 step of xdot = f(x) + g(x)u + d, u and d held constant."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    k1 = system.field_at(x, u, d)
    k2 = system.field_at(x + 0.5 * dt * k1, u, d)
    k3 = system.field_at(x + 0.5 * dt * k2, u, d)
    k4 = system.field_at(x + dt * k3, u, d)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteDynamicsError(f"non-finite state after step from {x}")
    if np.max(np.abs(x_next)) > BLOWUP_LIMIT:
        raise NumericalBlowUpError(f"state magnitude exceeded {BLOWUP_LIMIT:g}")
    return x_next


def simulate(
    system: ControlAffineSystem,
    controller: Callable[[np.ndarray, float], np.ndarray],
    x0: Sequence[float],
    duration: float,
    dt: float,
    disturbance: Optional[DisturbanceSignal] = None,
) -> Trajectory:
    """Fixed-step closed-loop rollout.

    ``controller(x, t)`` returns the input applied over the following step;
    the recorded inputs are exactly the controller outputs used. Numerical
    blow-up or non-finite dynamics terminate the rollout early with a reason
    instead of raising. duration/dt must be within 1e-9 of an integer.
    """
    steps_exact = duration / dt
    n_steps = int(round(steps_exact))
    if abs(steps_exact - n_steps) > 1e-9:
        raise ValueError(f"duration/dt = {steps_exact} is not close to an integer")

    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (system.state_dim,):
        raise ValueError(f"x0 has shape {x.shape}, expected {(system.state_dim,)}")

    states = np.empty((n_steps + 1, system.state_dim))
    inputs = np.empty((n_steps, system.input_dim))
    states[0] = x
    reason = None
    completed = 0
    for j in range(n_steps):
        t = j * dt
        u = np.asarray(controller(x, t), dtype=float).reshape(system.input_dim)
        d = disturbance(t, x, u) if disturbance is not None else None
        try:
            x = step_rk4(system, x, u, d, dt)
        except NumericalBlowUpError:
            reason = "numerical blow-up"
            break
        except NonFiniteDynamicsError:
            reason = "non-finite dynamics"
            break
        inputs[j] = u
        states[j + 1] = x
        completed = j + 1

    times = np.arange(completed + 1) * dt
    return Trajectory(
        times=times,
        states=states[: completed + 1].copy(),
        inputs=inputs[:completed].copy(),
        terminated_early=reason is not None,
        termination_reason=reason,
    )


def finite_difference_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of fn at x, shape (len(fn(x)), len(x))."""
    x = np.asarray(x, dtype=float)
    base = np.atleast_1d(np.asarray(fn(x), dtype=float))
    jac = np.empty((base.size, x.size))
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += eps
        lo[i] -= eps
        jac[:, i] = (np.atleast_1d(fn(hi)) - np.atleast_1d(fn(lo))) / (2.0 * eps)
    return jac


def lipschitz_probe(fn: Callable[[np.ndarray], np.ndarray], samples: Sequence[np.ndarray]) -> float:
    """Max finite-difference ratio ||fn(a)-fn(b)|| / ||a-b|| over sample pairs.

    Diagnostic only; local Lipschitz continuity is an assumption of the
    theory, not something a finite sample can establish.
    """
    values = [np.atleast_1d(np.asarray(fn(s), dtype=float)).ravel() for s in samples]
    worst = 0.0
    for i in range(len(samples)):
        for j in range(i + 1, len(samples)):
            dx = float(np.linalg.norm(np.asarray(samples[i]) - np.asarray(samples[j])))
            if dx == 0.0:
                continue
            worst = max(worst, float(np.linalg.norm(values[i] - values[j])) / dx)
    return worst
