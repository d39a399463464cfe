"""Benchmark scenario assembly and the config-driven run pipeline.

Everything here is glue: turn a resolved config into systems, barrier,
controller, and learning setup, run the closed loop with and without a
learned model, and emit the CSV/JSON artifacts that the CLI promises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import kfun
from .barrier import BarrierFunction, FilteredController
from .certify import (
    CompatiblePair,
    Projection,
    certificate_json,
    closed_loop_delta_trace,
    delta_bound,
    make_certificate,
    verify_certificate,
)
from .config import save_config, set_by_path, validate_config
from .dynamics import (
    ControlAffineSystem,
    DisturbanceSignal,
    PerturbationSpec,
    SegwayParams,
    segway_nominal,
    segway_true,
    simulate,
)
from .ioutil import fmt_float, write_csv, write_json
from .learning import EpisodicConfig, FeatureMap, ResidualModel, episodic_train


def ellipse_pitch_barrier(pitch_max: float, rate_max: float, alpha) -> BarrierFunction:
    """h(x) = 1 - (pitch/pitch_max)^2 - (rate/rate_max)^2 on the Segway state."""
    inv_p2 = 1.0 / (pitch_max * pitch_max)
    inv_r2 = 1.0 / (rate_max * rate_max)

    def h(x):
        return 1.0 - x[2] * x[2] * inv_p2 - x[3] * x[3] * inv_r2

    def grad_h(x):
        return np.array([0.0, 0.0, -2.0 * x[2] * inv_p2, -2.0 * x[3] * inv_r2])

    return BarrierFunction(h=h, grad_h=grad_h, alpha=alpha)


def pd_pitch_controller(kp: float, kd: float, amplitude: float, frequency: float) -> Callable:
    """PD tracking of the pitch reference amplitude*sin(2 pi f t).

    Positive gains: wheel torque enters the pitch acceleration with negative
    sign, so u = kp (pitch - ref) + kd (rate - ref_rate) drives the pitch
    toward the reference.
    """
    omega = 2.0 * math.pi * frequency

    def controller(x, t):
        ref = amplitude * math.sin(omega * t)
        ref_rate = amplitude * omega * math.cos(omega * t)
        return np.array([kp * (x[2] - ref) + kd * (x[3] - ref_rate)])

    return controller


def make_excitation(amplitude: float, hold_steps: int, dt: float, duration: float,
                    input_dim: int, rng: np.random.Generator) -> Callable[[float], np.ndarray]:
    """Seeded zero-mean piecewise-constant input excitation."""
    n_steps = max(1, int(round(duration / dt)))
    n_blocks = -(-n_steps // hold_steps)
    values = rng.uniform(-amplitude, amplitude, size=(n_blocks, input_dim))

    def signal(t: float) -> np.ndarray:
        block = int(round(t / dt)) // hold_steps
        return values[min(block, n_blocks - 1)]

    return signal


@dataclass
class Scenario:
    """Config-built pieces of the benchmark closed loop."""

    cfg: dict
    params: SegwayParams
    true_system: ControlAffineSystem
    nominal_system: ControlAffineSystem
    barrier: BarrierFunction
    alpha: kfun.ComparisonFunction
    desired: Callable
    x0: np.ndarray
    duration: float
    dt: float
    seed: int
    u_limit: float


def build_scenario(cfg: dict) -> Scenario:
    cfg = validate_config(cfg)
    sys_cfg = cfg["system"]
    params = SegwayParams(**{k: sys_cfg[k] for k in SegwayParams.__dataclass_fields__})
    perturbation = PerturbationSpec(
        scale=dict(sys_cfg["perturbation"]["scale"]),
        drop_friction=sys_cfg["perturbation"]["drop_friction"],
    )
    alpha = kfun.from_config(cfg["barrier"]["alpha"])
    bar = ellipse_pitch_barrier(cfg["barrier"]["pitch_max"], cfg["barrier"]["pitch_rate_max"], alpha)
    ctl = cfg["controller"]
    desired = pd_pitch_controller(ctl["kp"], ctl["kd"], ctl["reference"]["amplitude"],
                                  ctl["reference"]["frequency"])
    run = cfg["run"]
    return Scenario(
        cfg=cfg,
        params=params,
        true_system=segway_true(params),
        nominal_system=segway_nominal(params, perturbation),
        barrier=bar,
        alpha=alpha,
        desired=desired,
        x0=np.asarray(run["x0"], dtype=float),
        duration=run["duration"],
        dt=run["dt"],
        seed=run["seed"],
        u_limit=ctl["u_max"],
    )


def model_error_drift_sup(scn: Scenario, samples: int = 1000) -> float:
    """Brute-force sup of ||f(x) - f_hat(x)|| over sampled scenario states.

    Recorded as scenario metadata so the raw size of the model error is
    visible next to its projected counterpart.
    """
    rng = np.random.default_rng(scn.seed)
    lows = np.array([-1.0, -2.0, -scn.cfg["barrier"]["pitch_max"], -scn.cfg["barrier"]["pitch_rate_max"]])
    highs = -lows
    worst = 0.0
    for _ in range(samples):
        x = rng.uniform(lows, highs)
        err = scn.true_system.drift(x) - scn.nominal_system.drift(x)
        worst = max(worst, float(np.linalg.norm(err)))
    return worst


def _mode_summary(scn: Scenario, residual: Optional[ResidualModel], excitation) -> dict:
    """Roll out one mode, compute its delta trace and certificate, verify."""
    if excitation is None:
        desired = scn.desired
    else:
        def desired(x, t):
            return np.asarray(scn.desired(x, t), dtype=float) + excitation(t)

    controller = FilteredController(scn.barrier, scn.nominal_system, desired,
                                    residual=residual, u_limit=scn.u_limit)
    traj = simulate(scn.true_system, controller, scn.x0, scn.duration, scn.dt)
    trace = closed_loop_delta_trace(traj, scn.barrier, scn.true_system, scn.nominal_system, residual=residual)
    dbar = delta_bound(trace)
    cert = make_certificate(scn.alpha, dbar)
    report = verify_certificate(traj, scn.barrier, cert)
    return {
        "trajectory": traj,
        "trace": trace,
        "certificate": cert,
        "report": report,
        "summary": {
            "delta_bar": dbar,
            "floor": cert.floor,
            "min_h": report.min_h,
            "pass": report.passed,
            "status": report.status,
            "terminated_early": traj.terminated_early,
            "termination_reason": traj.termination_reason,
            "filter_infeasible_steps": controller.infeasible_count,
        },
    }


def simulate_artifacts(cfg: dict, out_dir, model: Optional[ResidualModel] = None) -> dict:
    """Run the scenario without (and, given a model, with) learned terms.

    Writes trajectory/delta CSVs, certificate JSONs, the resolved config,
    and summary.json into out_dir. Returns the summary dictionary.
    """
    scn = build_scenario(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    exc_cfg = scn.cfg["controller"]["excitation"]
    excitation = None
    if exc_cfg["amplitude"] > 0.0:
        rng = np.random.default_rng(scn.seed)
        excitation = make_excitation(exc_cfg["amplitude"], exc_cfg["hold_steps"], scn.dt,
                                     scn.duration, scn.true_system.input_dim, rng)

    modes = {"no_learning": _mode_summary(scn, None, excitation)}
    if model is not None:
        modes["learned"] = _mode_summary(scn, model, excitation)

    save_config(scn.cfg, out / "resolved_config.yaml")
    for name, result in modes.items():
        result["trajectory"].to_csv(out / f"trajectory_{name}.csv")
        result["trace"].to_csv(out / f"delta_{name}.csv")
        write_json(out / f"certificate_{name}.json",
                   certificate_json(result["certificate"], result["report"]))

    summary = {
        "duration": scn.duration,
        "dt": scn.dt,
        "seed": scn.seed,
        "k": scn.alpha.k if isinstance(scn.alpha, kfun.Linear) else None,
        "model_error_drift_sup": model_error_drift_sup(scn),
        "no_learning": modes["no_learning"]["summary"],
        "learned": modes["learned"]["summary"] if model is not None else None,
    }
    write_json(out / "summary.json", summary)
    return summary


def learn_artifacts(cfg: dict, out_dir) -> dict:
    """Run episodic training; write model.json and per-episode metrics."""
    scn = build_scenario(cfg)
    learn = scn.cfg["learning"]
    if not learn["enabled"]:
        from .config import ConfigError

        raise ConfigError("learning block is disabled in this config")
    features = FeatureMap.from_config(learn["features"])
    econfig = EpisodicConfig(
        true_system=scn.true_system,
        nominal_system=scn.nominal_system,
        barrier=scn.barrier,
        desired=scn.desired,
        x0=scn.x0,
        episodes=learn["episodes"],
        episode_duration=learn["episode_duration"],
        dt=scn.dt,
        features=features,
        ridge_lambda=learn["ridge_lambda"],
        excitation_amplitude=learn["excitation"]["amplitude"],
        excitation_hold_steps=learn["excitation"]["hold_steps"],
        x0_jitter=None if learn["x0_jitter"] is None else np.asarray(learn["x0_jitter"], dtype=float),
        noise_std=learn["noise_std"],
        seed=scn.seed,
        validation_duration=scn.duration,
        u_limit=scn.u_limit,
    )
    model, history = episodic_train(econfig)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(scn.cfg, out / "resolved_config.yaml")
    model.save(out / "model.json")
    history.to_csv(out / "episodes.csv")
    last = [r for r in history.records if not r.excluded][-1]
    summary = {
        "episodes": learn["episodes"],
        "excluded_episodes": sum(1 for r in history.records if r.excluded),
        "no_learning_delta_bar": history.no_learning_delta_bar,
        "final_validation_delta_bar": last.validation_delta_bar,
        "final_training_rms": last.training_rms,
    }
    write_json(out / "learn_summary.json", summary)
    return summary


_SWEEP_HEADER = [
    "value",
    "delta_bar_no_learning", "floor_no_learning", "min_h_no_learning", "pass_no_learning",
    "delta_bar_learned", "floor_learned", "min_h_learned", "pass_learned",
    "status",
]


def sweep_artifacts(cfg: dict, param: str, values, out_dir,
                    model: Optional[ResidualModel] = None) -> list:
    """Run simulate_artifacts per parameter value; failures stay in-row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = validate_config(cfg)
    set_by_path(base, param, values[0])  # bad parameter paths are config errors, not row errors
    rows = []
    for i, value in enumerate(values):
        run_dir = out / f"run_{i:03d}"
        try:
            run_cfg = set_by_path(base, param, value)
            summary = simulate_artifacts(run_cfg, run_dir, model=model)
            no_learn = summary["no_learning"]
            learned = summary["learned"]
            row = [
                float(value),
                no_learn["delta_bar"], no_learn["floor"], no_learn["min_h"], no_learn["pass"],
                learned["delta_bar"] if learned else None,
                learned["floor"] if learned else None,
                learned["min_h"] if learned else None,
                learned["pass"] if learned else None,
                "ok",
            ]
        except Exception as exc:  # per-run failures recorded, sweep continues
            row = [float(value)] + [None] * 8 + [f"error: {type(exc).__name__}: {exc}"]
        rows.append(row)
    write_csv(out / "sweep.csv", _SWEEP_HEADER, rows)
    return rows


@dataclass(frozen=True)
class PlanarDiskDemo:
    """Planar single integrator with a nontrivial norm projection.

    h(x) = 1 - ||x||^2 over R^2 with projection y = ||x||^2 and projected
    barrier h_proj(y) = 1 - y, sandwiched exactly by identity bounds. The
    disturbance pushes radially outward with a pulsing magnitude bounded by
    ``dist_bound``, and the desired input also pushes outward so the filter
    rides the constraint.
    """

    system: ControlAffineSystem
    barrier: BarrierFunction
    projection: Projection
    h_proj: Callable
    pair: CompatiblePair
    disturbance: DisturbanceSignal
    desired: Callable
    alpha: kfun.ComparisonFunction
    dist_bound: float


def planar_disk_demo(k: float = 1.0, dist_bound: float = 0.25,
                     pulse_frequency: float = 1.0, push: float = 0.5) -> PlanarDiskDemo:
    system = ControlAffineSystem(
        state_dim=2,
        input_dim=2,
        drift=lambda x: np.zeros(2),
        actuation=lambda x: np.eye(2),
    )
    alpha = kfun.Linear(k)
    bar = BarrierFunction(
        h=lambda x: 1.0 - float(x @ x),
        grad_h=lambda x: -2.0 * x,
        alpha=alpha,
    )
    projection = Projection(
        map=lambda x: np.array([float(x @ x)]),
        jacobian=lambda x: 2.0 * x.reshape(1, 2),
        output_dim=1,
    )

    def h_proj(y):
        return 1.0 - float(np.atleast_1d(y)[0])

    pair = CompatiblePair(
        barrier=bar,
        h_proj=h_proj,
        projection=projection,
        sigma_lower=kfun.Linear(1.0),
        sigma_upper=kfun.Linear(1.0),
    )

    omega = 2.0 * math.pi * pulse_frequency

    def pulsed_outward(t, x, u):
        r = float(np.linalg.norm(x))
        if r < 1e-9:
            return np.zeros(2)
        magnitude = dist_bound * (0.7 + 0.3 * math.sin(omega * t))
        return (magnitude / r) * x

    disturbance = DisturbanceSignal(evaluator=pulsed_outward, declared_bound=dist_bound)

    def desired(x, t):
        r = float(np.linalg.norm(x))
        if r < 1e-9:
            return np.zeros(2)
        return (push / r) * x

    return PlanarDiskDemo(
        system=system,
        barrier=bar,
        projection=projection,
        h_proj=h_proj,
        pair=pair,
        disturbance=disturbance,
        desired=desired,
        alpha=alpha,
        dist_bound=dist_bound,
    )
