"""Ground-truth plants, fixed-step RK4 integration, input signals, seeded noise.

All randomness flows through counter-based Philox streams keyed by
(seed, stream lane) so trials are reproducible and order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "IntegrationBlowupError",
    "Plant",
    "VdpParams",
    "ArmParams",
    "NoiseSpec",
    "Trace",
    "vdp_dynamics",
    "vdp_jacobian",
    "arm_dynamics",
    "arm_jacobian",
    "make_vdp_plant",
    "make_arm_plant",
    "rk4_step",
    "simulate_plant",
    "prbs_torque",
    "constant_signal",
    "make_rng",
    "trace_to_csv",
]


class IntegrationBlowupError(RuntimeError):
    """Integration produced a non-finite state."""

    def __init__(self, time: float):
        super().__init__(f"integration blew up at t={time:.6g}")
        self.time = time


def make_rng(seed: int, spawn_key: Sequence[int] = ()) -> np.random.Generator:
    """Counter-based generator for a (seed, lane...) stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in spawn_key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class VdpParams:
    mu: float = 1.0

    def __post_init__(self) -> None:
        if not self.mu > 0:
            raise ValueError("mu must be positive")


@dataclass(frozen=True)
class ArmParams:
    J: float = 0.5
    m: float = 1.0
    l: float = 0.5
    g: float = 9.81
    b_f: float = 0.2
    f_c: float = 0.5
    f_v: float = 0.3
    sgn_smoothing: float = 0.01

    def __post_init__(self) -> None:
        if min(self.J, self.m, self.l, self.g) <= 0:
            raise ValueError("J, m, l, g must be positive")
        if min(self.b_f, self.f_c, self.f_v) < 0:
            raise ValueError("friction coefficients must be non-negative")
        if not self.sgn_smoothing > 0:
            raise ValueError("sgn smoothing scale must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    variance: float
    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if self.variance < 0:
            raise ValueError("noise variance must be non-negative")


@dataclass(frozen=True)
class Plant:
    """Continuous-time plant: dynamics (x, u, t) -> xdot and clean output h(x)."""

    state_dim: int
    input_dim: int
    dynamics: Callable[[np.ndarray, np.ndarray, float], np.ndarray]
    output: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    parameters: dict = field(default_factory=dict)
    name: str = ""
    measured_indices: tuple[int, ...] = (0,)


def vdp_dynamics(x: np.ndarray, u: float, params: VdpParams) -> np.ndarray:
    """Van der Pol in first-order form: (x2, mu(1-x1^2)x2 - x1 + u)."""
    x1, x2 = x[0], x[1]
    return np.array([x2, params.mu * (1.0 - x1 * x1) * x2 - x1 + u])


def vdp_jacobian(x: np.ndarray, u: float, params: VdpParams) -> np.ndarray:
    x1, x2 = x[0], x[1]
    return np.array([
        [0.0, 1.0],
        [-2.0 * params.mu * x1 * x2 - 1.0, params.mu * (1.0 - x1 * x1)],
    ])


def _friction(omega: float, p: ArmParams) -> float:
    # Coulomb sgn smoothed as tanh(omega / eps) to keep RK4 order and EKF Jacobians.
    return p.f_c * math.tanh(omega / p.sgn_smoothing) + p.f_v * omega


def arm_dynamics(x: np.ndarray, u: float, params: ArmParams) -> np.ndarray:
    """Single-link arm: J*thdd = -mgl sin(th) - b_f*thd - F(thd) + tau."""
    th, om = x[0], x[1]
    thdd = (-params.m * params.g * params.l * math.sin(th)
            - params.b_f * om - _friction(om, params) + u) / params.J
    return np.array([om, thdd])


def arm_jacobian(x: np.ndarray, u: float, params: ArmParams) -> np.ndarray:
    th, om = x[0], x[1]
    s = math.tanh(om / params.sgn_smoothing)
    dfric = params.f_c * (1.0 - s * s) / params.sgn_smoothing + params.f_v
    return np.array([
        [0.0, 1.0],
        [-params.m * params.g * params.l * math.cos(th) / params.J,
         -(params.b_f + dfric) / params.J],
    ])


def _selector_output(measured: tuple[int, ...]) -> Callable[[np.ndarray], np.ndarray]:
    idx = np.array(measured, dtype=int)
    return lambda x: np.asarray(x)[idx]


def make_vdp_plant(params: VdpParams = VdpParams(), measured: Sequence[int] = (0,)) -> Plant:
    measured = tuple(measured)
    return Plant(
        state_dim=2,
        input_dim=1,
        dynamics=lambda x, u, t: vdp_dynamics(x, float(u[0]), params),
        output=_selector_output(measured),
        jacobian=lambda x, u: vdp_jacobian(x, float(u[0]), params),
        parameters={"mu": params.mu},
        name="vdp",
        measured_indices=measured,
    )


def make_arm_plant(params: ArmParams = ArmParams(), measured: Sequence[int] = (0,)) -> Plant:
    measured = tuple(measured)
    return Plant(
        state_dim=2,
        input_dim=1,
        dynamics=lambda x, u, t: arm_dynamics(x, float(u[0]), params),
        output=_selector_output(measured),
        jacobian=lambda x, u: arm_jacobian(x, float(u[0]), params),
        parameters={"J": params.J, "m": params.m, "l": params.l, "g": params.g,
                    "b_f": params.b_f, "f_c": params.f_c, "f_v": params.f_v,
                    "sgn_smoothing": params.sgn_smoothing},
        name="arm",
        measured_indices=measured,
    )


def rk4_step(dynamics, x: np.ndarray, u: np.ndarray, t: float, dt: float) -> np.ndarray:
    """Classical RK4 step with the input held constant over the step."""
    k1 = dynamics(x, u, t)
    k2 = dynamics(x + 0.5 * dt * k1, u, t + 0.5 * dt)
    k3 = dynamics(x + 0.5 * dt * k2, u, t + 0.5 * dt)
    k4 = dynamics(x + dt * k3, u, t + dt)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationBlowupError(t + dt)
    return x_next


@dataclass(frozen=True)
class Trace:
    """Uniform-grid simulation record. All arrays share the grid length."""

    times: np.ndarray           # (N,)
    states: np.ndarray          # (N, n)
    inputs: np.ndarray          # (N, m)
    outputs_clean: np.ndarray   # (N, p)
    outputs_noisy: np.ndarray   # (N, p)

    def __post_init__(self) -> None:
        N = len(self.times)
        for arr in (self.states, self.inputs, self.outputs_clean, self.outputs_noisy):
            if len(arr) != N:
                raise ValueError("trace arrays must share the grid length")
        steps = np.diff(self.times)
        if N > 1 and (np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12)):
            raise ValueError("times must be strictly increasing with constant step")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


def simulate_plant(plant: Plant, x0: np.ndarray, input_signal, duration: float,
                   dt: float, noise: NoiseSpec) -> Trace:
    """Integrate the plant and sample noisy outputs on the uniform grid.

    ``input_signal`` is a callable t -> u of shape (input_dim,); the input is
    held constant over each step (zero-order hold). Output noise is i.i.d.
    Gaussian per time point, deterministic for fixed (seed, stream_id).
    """
    n_steps_f = duration / dt
    n_steps = int(round(n_steps_f))
    if abs(n_steps_f - n_steps) > 1e-9:
        raise ValueError("duration must be a whole number of steps")
    times = np.arange(n_steps + 1) * dt
    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((n_steps + 1, plant.state_dim))
    inputs = np.empty((n_steps + 1, plant.input_dim))
    states[0] = x
    for k in range(n_steps):
        u = np.atleast_1d(np.asarray(input_signal(times[k]), dtype=float))
        inputs[k] = u
        x = rk4_step(plant.dynamics, x, u, times[k], dt)
        states[k + 1] = x
    inputs[n_steps] = np.atleast_1d(np.asarray(input_signal(times[n_steps]), dtype=float))

    outputs_clean = np.stack([plant.output(s) for s in states])
    p = outputs_clean.shape[1]
    if noise.variance > 0:
        rng = make_rng(noise.seed, (0, noise.stream_id))
        v = rng.normal(0.0, math.sqrt(noise.variance), size=(n_steps + 1, p))
    else:
        v = np.zeros((n_steps + 1, p))
    return Trace(times, states, inputs, outputs_clean, outputs_clean + v)


class PiecewiseConstantSignal:
    """Seeded piecewise-constant signal: uniform levels held for hold_steps samples."""

    def __init__(self, levels: np.ndarray, dt: float, hold_steps: int):
        self.levels = levels
        self.dt = dt
        self.hold_steps = hold_steps

    def __call__(self, t: float) -> np.ndarray:
        k = int(math.floor(t / self.dt + 1e-9))
        idx = min(k // self.hold_steps, len(self.levels) - 1)
        return self.levels[idx]


def prbs_torque(seed: int, duration: float, dt: float, amplitude: float,
                hold_steps: int, stream_id: int = 0) -> PiecewiseConstantSignal:
    """Pseudo-random piecewise-constant input, levels uniform on [-amplitude, amplitude]."""
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    if hold_steps < 1:
        raise ValueError("hold_steps must be >= 1")
    n_steps = int(round(duration / dt))
    n_levels = n_steps // hold_steps + 1
    rng = make_rng(seed, (1, stream_id))
    levels = rng.uniform(-amplitude, amplitude, size=(n_levels, 1))
    return PiecewiseConstantSignal(levels, dt, hold_steps)


def constant_signal(value: float = 0.0, input_dim: int = 1):
    u = np.full(input_dim, float(value))
    return lambda t: u


def trace_to_csv(trace: Trace, path) -> None:
    """Write the trace as CSV with full double precision (17 significant digits)."""
    n = trace.states.shape[1]
    m = trace.inputs.shape[1]
    p = trace.outputs_clean.shape[1]
    header = (["t"]
              + [f"x{i+1}" for i in range(n)]
              + [f"u{i+1}" for i in range(m)]
              + [f"y{i+1}" for i in range(p)]
              + [f"y_noisy{i+1}" for i in range(p)])
    data = np.column_stack([trace.times, trace.states, trace.inputs,
                            trace.outputs_clean, trace.outputs_noisy])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
