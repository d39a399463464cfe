"""Projected disturbances and projection-to-state safety certificates.

Model uncertainty is quantified where it matters for safety: as the scalar
mismatch delta between the true and modeled barrier derivative along the
closed loop. The worst observed |delta| inflates the safe set; the inflated
set {h >= -alpha^-1(delta_bar)} is what a certificate claims stays
invariant, and :func:`verify_certificate` checks that claim against a
trajectory instead of assuming it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .barrier import BarrierFunction, HdotResidual, h_dot
from .dynamics import ControlAffineSystem, Trajectory, finite_difference_jacobian
from .ioutil import write_csv
from .kfun import ComparisonFunction, Linear, compose

MODE_MODEL_ERROR = "model_error"
MODE_LEARNED = "learned_residual"


@dataclass(frozen=True)
class Projection:
    """Continuously differentiable map y = P(x) with analytic Jacobian.

    ``map(x)`` returns y in R^k, ``jacobian(x)`` its k x n Jacobian.
    """

    map: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    output_dim: int


@dataclass(frozen=True)
class CompatiblePair:
    """Candidate compatible projection for a barrier.

    Claims sigma_lower(h(x)) <= h_proj(P(x)) <= sigma_upper(h(x)) for all x,
    which makes safe-set membership survive the projection. The claim is
    checked on samples by :func:`check_compatibility`, never assumed.
    """

    barrier: BarrierFunction
    h_proj: Callable[[np.ndarray], float]
    projection: Projection
    sigma_lower: ComparisonFunction
    sigma_upper: ComparisonFunction


@dataclass(frozen=True)
class CompatibilityReport:
    passed: bool
    lower_ok: bool
    upper_ok: bool
    set_preservation_ok: bool
    worst_lower_slack: float
    worst_upper_slack: float
    first_violation: Optional[np.ndarray]
    samples_checked: int


@dataclass(frozen=True)
class DeltaTrace:
    """Projected-disturbance samples along a trajectory."""

    times: np.ndarray
    delta: np.ndarray
    mode: str

    def __post_init__(self):
        if len(self.times) != len(self.delta):
            raise ValueError("times and delta must have equal length")
        if not np.all(np.isfinite(self.delta)):
            raise ValueError("delta trace contains non-finite values")

    def to_csv(self, path) -> None:
        write_csv(path, ["t", "abs_delta"], zip(self.times, np.abs(self.delta)))


@dataclass(frozen=True)
class PssfCertificate:
    """Worst-case projected disturbance and the inflated-set floor it implies.

    floor = -alpha^-1(delta_bar); the certified claim is that h never drops
    below the floor along the closed loop.
    """

    delta_bar: float
    alpha: ComparisonFunction
    inflation: float
    floor: float


@dataclass(frozen=True)
class CertificateReport:
    min_h: float
    floor: float
    margin: float
    status: str  # "pass" | "fail" | "precondition_violated"

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def projected_dynamics(
    proj: Projection,
    sys: ControlAffineSystem,
    x: np.ndarray,
    u: np.ndarray,
    d: Optional[np.ndarray] = None,
) -> np.ndarray:
    """ydot = D_P(x) (f(x) + g(x) u + d)."""
    jac = np.atleast_2d(np.asarray(proj.jacobian(x), dtype=float))
    return jac @ sys.field_at(x, u, d)


def check_compatibility(pair: CompatiblePair, samples: Sequence[np.ndarray], slack: float = 1e-9) -> CompatibilityReport:
    """Verify the sandwich inequalities and set preservation at every sample.

    Slacks are h_proj(P(x)) - sigma_lower(h(x)) and
    sigma_upper(h(x)) - h_proj(P(x)); both must stay above -slack. Set
    preservation additionally requires h(x) >= 0 => h_proj(P(x)) >= -slack.
    Violations are report content, not errors.
    """
    if len(samples) == 0:
        raise ValueError("samples must be nonempty")
    worst_lower = np.inf
    worst_upper = np.inf
    lower_ok = upper_ok = preserve_ok = True
    first_violation = None
    for x in samples:
        x = np.asarray(x, dtype=float)
        hx = pair.barrier.h(x)
        hp = float(pair.h_proj(np.atleast_1d(pair.projection.map(x))))
        lo = hp - pair.sigma_lower(hx)
        hi = pair.sigma_upper(hx) - hp
        worst_lower = min(worst_lower, lo)
        worst_upper = min(worst_upper, hi)
        bad = False
        if lo < -slack:
            lower_ok = False
            bad = True
        if hi < -slack:
            upper_ok = False
            bad = True
        if hx >= 0.0 and hp < -slack:
            preserve_ok = False
            bad = True
        if bad and first_violation is None:
            first_violation = x
    return CompatibilityReport(
        passed=lower_ok and upper_ok and preserve_ok,
        lower_ok=lower_ok,
        upper_ok=upper_ok,
        set_preservation_ok=preserve_ok,
        worst_lower_slack=float(worst_lower),
        worst_upper_slack=float(worst_upper),
        first_violation=first_violation,
        samples_checked=len(samples),
    )


def projected_disturbance_model_error(
    bar: BarrierFunction,
    true_sys: ControlAffineSystem,
    nominal_sys: ControlAffineSystem,
    x: np.ndarray,
    u: np.ndarray,
) -> float:
    """delta = grad_h(x) . [(f - f_hat)(x) + (g - g_hat)(x) u].

    Equals hdot under the true system minus hdot under the design model;
    this is where model uncertainty shows up in the barrier derivative.
    """
    grad = bar.grad_h(x)
    df = true_sys.drift(x) - nominal_sys.drift(x)
    dg = true_sys.actuation(x) - nominal_sys.actuation(x)
    return float(grad @ (df + dg @ u))


def projected_disturbance_learned(
    bar: BarrierFunction,
    nominal_sys: ControlAffineSystem,
    residual: HdotResidual,
    true_sys: ControlAffineSystem,
    x: np.ndarray,
    u: np.ndarray,
) -> float:
    """Residual delta once the learned terms join the modeled derivative.

    delta = hdot_true(x, u) - [hdot_model(x, u) + b_hat(x) + a_hat(x) . u],
    i.e. the model-error delta minus the residual model's prediction.
    """
    b_hat, a_hat = residual.terms(x)
    predicted = b_hat + float(np.asarray(a_hat) @ u)
    return h_dot(bar, true_sys, x, u) - h_dot(bar, nominal_sys, x, u) - predicted


def closed_loop_delta_trace(
    traj: Trajectory,
    bar: BarrierFunction,
    true_sys: ControlAffineSystem,
    nominal_sys: ControlAffineSystem,
    residual: Optional[HdotResidual] = None,
) -> DeltaTrace:
    """Evaluate delta along a recorded closed loop (one sample per step).

    Uses the recorded inputs, so the controller is baked in exactly as it
    acted during the rollout.
    """
    deltas = np.empty(len(traj.inputs))
    for j in range(len(traj.inputs)):
        x, u = traj.states[j], traj.inputs[j]
        if residual is None:
            deltas[j] = projected_disturbance_model_error(bar, true_sys, nominal_sys, x, u)
        else:
            deltas[j] = projected_disturbance_learned(bar, nominal_sys, residual, true_sys, x, u)
    mode = MODE_MODEL_ERROR if residual is None else MODE_LEARNED
    return DeltaTrace(times=traj.times[:-1].copy(), delta=deltas, mode=mode)


def delta_bound(trace: DeltaTrace) -> float:
    """Discrete sup-norm proxy: max over samples of |delta(t)|.

    The continuous-time quantity is an essential supremum; the sampled max
    is the documented approximation, with convergence under dt refinement
    exercised by the acceptance suite.
    """
    if len(trace.delta) == 0:
        raise ValueError("delta trace is empty")
    return float(np.max(np.abs(trace.delta)))


def make_certificate(alpha: ComparisonFunction, delta_bar: float) -> PssfCertificate:
    """Certificate with floor -alpha^-1(delta_bar); for alpha = k r this is -delta_bar/k."""
    if delta_bar < 0.0:
        raise ValueError("delta_bar must be >= 0")
    inflation = alpha.inverse()(delta_bar)
    return PssfCertificate(delta_bar=delta_bar, alpha=alpha, inflation=inflation, floor=-inflation)


def transport_inflation(sigma_upper: ComparisonFunction, gamma: ComparisonFunction) -> ComparisonFunction:
    """Pull an inflation gain on the projected set back to the original set.

    Returns gamma' = sigma_upper^-1 . gamma: if {h_proj >= -gamma(r)} is
    invariant in the projected space and sigma_upper bounds h_proj(P(x))
    from above by sigma_upper(h(x)), then {h >= -gamma'(r)} is invariant in
    the original space.
    """
    return compose(sigma_upper.inverse(), gamma)


def direct_transport_floor(sigma_upper: ComparisonFunction, gamma: ComparisonFunction, delta_bar: float) -> float:
    """Diagnostic alternative floor sigma_upper^-1(-gamma(delta_bar)).

    Inverts the sandwich bound directly instead of composing gains; the two
    coincide for linear sigma_upper and may differ otherwise. Requires an
    extended sigma_upper since the argument is negative.
    """
    return sigma_upper.inverse()(-gamma(delta_bar))


def verify_certificate(traj: Trajectory, bar: BarrierFunction, cert: PssfCertificate, tol: float = 1e-6) -> CertificateReport:
    """Check h(x(t)) >= floor - tol along the trajectory.

    The initial condition must already lie in the inflated set
    (h(x0) >= floor); calls violating that get a distinct status instead of
    a pass/fail verdict. Failures are reported, never masked.
    """
    h_values = np.array([bar.h(x) for x in traj.states])
    min_h = float(np.min(h_values))
    margin = min_h - cert.floor
    if h_values[0] < cert.floor:
        status = "precondition_violated"
    elif margin >= -tol:
        status = "pass"
    else:
        status = "fail"
    return CertificateReport(min_h=min_h, floor=cert.floor, margin=margin, status=status)


def certificate_json(cert: PssfCertificate, report: Optional[CertificateReport] = None) -> dict:
    """JSON payload `delta_bar, k, floor, min_h, pass` (k only for linear alpha)."""
    return {
        "delta_bar": cert.delta_bar,
        "k": cert.alpha.k if isinstance(cert.alpha, Linear) else None,
        "floor": cert.floor,
        "min_h": report.min_h if report is not None else None,
        "pass": report.passed if report is not None else None,
    }


def check_jacobian(proj: Projection, samples: Sequence[np.ndarray], rel_tol: float = 1e-5) -> float:
    """Worst relative mismatch between the analytic Jacobian and finite differences."""
    worst = 0.0
    for x in samples:
        x = np.asarray(x, dtype=float)
        analytic = np.atleast_2d(np.asarray(proj.jacobian(x), dtype=float))
        numeric = finite_difference_jacobian(lambda z: np.atleast_1d(proj.map(z)), x)
        err = float(np.linalg.norm(analytic - numeric)) / max(1.0, float(np.linalg.norm(numeric)))
        worst = max(worst, err)
    if worst > rel_tol:
        raise AssertionError(f"jacobian mismatch {worst} exceeds {rel_tol}")
    return worst
