"""Dynamic bicycle model with Pacejka lateral tire forces.

States are stored as length-9 float arrays in the order
``(p_x, p_y, gamma, v_f, v_l, omega, tau, delta, theta)`` and inputs as
length-3 arrays ``(d_tau, d_delta, d_theta)``.  Every model function accepts
arrays with arbitrary leading batch dimensions and an array namespace ``xp``
(``numpy`` by default, ``jax.numpy`` for differentiation) so that the same
equations back both simulation and the optimizer's derivatives.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from typing import Any, Sequence

import numpy as np

STATE_NAMES = ("p_x", "p_y", "gamma", "v_f", "v_l", "omega", "tau", "delta", "theta")
INPUT_NAMES = ("d_tau", "d_delta", "d_theta")
NX = len(STATE_NAMES)
NU = len(INPUT_NAMES)

# state indices
PX, PY, GAMMA, VF, VL, OMEGA, TAU, DELTA, THETA = range(NX)
# input indices
DTAU, DDELTA, DTHETA = range(NU)

DT = 1.0 / 30.0


@dataclass(frozen=True)
class VehicleState:
    """Named view of a 9-component model state."""

    p_x: float = 0.0
    p_y: float = 0.0
    gamma: float = 0.0
    v_f: float = 0.0
    v_l: float = 0.0
    omega: float = 0.0
    tau: float = 0.0
    delta: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("VehicleState components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in STATE_NAMES], dtype=float)

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "VehicleState":
        x = np.asarray(x, dtype=float)
        if x.shape != (NX,):
            raise ValueError(f"expected a state of shape ({NX},), got {x.shape}")
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class ControlInput:
    """Named view of a 3-component control input."""

    d_tau: float = 0.0
    d_delta: float = 0.0
    d_theta: float = 0.0

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("ControlInput components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.d_tau, self.d_delta, self.d_theta], dtype=float)

    @classmethod
    def from_array(cls, u: Sequence[float]) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        if u.shape != (NU,):
            raise ValueError(f"expected an input of shape ({NU},), got {u.shape}")
        return cls(*(float(v) for v in u))


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters of the 1:28 scale car.

    The defaults are plausible miniature-car values chosen so that the
    discretized model stays well behaved at 30 Hz; they are not identified
    from hardware.
    """

    m: float = 0.2
    I_z: float = 5.0e-4
    l_f: float = 0.045
    l_r: float = 0.045
    B_f: float = 3.0
    C_f: float = 1.3
    D_f: float = 0.6
    B_r: float = 3.0
    C_r: float = 1.3
    D_r: float = 0.65
    C_m1: float = 1.2
    C_m2: float = 0.2
    C_d: float = 0.02
    C_roll: float = 0.03
    epsilon_v: float = 0.5

    def __post_init__(self) -> None:
        for f in fields(self):
            if not np.isfinite(getattr(self, f.name)):
                raise ValueError(f"parameter {f.name} must be finite")
        for name in ("m", "I_z", "l_f", "l_r", "epsilon_v"):
            if getattr(self, name) <= 0:
                raise ValueError(f"parameter {name} must be positive")
        if self.D_f < 0 or self.D_r < 0:
            raise ValueError("Pacejka peak factors D_f, D_r must be nonnegative")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "VehicleParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown vehicle parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    def digest(self) -> str:
        """Stable short hash used to tie artifacts to a parameter set."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def tire_forces(x, params: VehicleParams, xp=np):
    """Front/rear lateral tire forces and longitudinal drive force.

    Slip angles divide by ``max(v_f, epsilon_v)`` so the model stays smooth
    down to standstill.
    """
    v_f, v_l, omega, tau, delta = x[..., VF], x[..., VL], x[..., OMEGA], x[..., TAU], x[..., DELTA]
    v_reg = xp.maximum(v_f, params.epsilon_v)
    side = -xp.arctan(v_l / v_reg)
    alpha_f = side - params.l_f * omega / v_reg + delta
    alpha_r = side + params.l_r * omega / v_reg
    F_f = params.D_f * xp.sin(params.C_f * xp.arctan(params.B_f * alpha_f))
    F_r = params.D_r * xp.sin(params.C_r * xp.arctan(params.B_r * alpha_r))
    F_x = (params.C_m1 - params.C_m2 * v_f) * tau - params.C_d * v_f**2 - params.C_roll
    return F_f, F_r, F_x


def continuous_dynamics(x, u, params: VehicleParams, xp=np):
    """Right-hand side of the bicycle-model ODE, shape ``(..., 9)``."""
    gamma, v_f, v_l, omega, delta = x[..., GAMMA], x[..., VF], x[..., VL], x[..., OMEGA], x[..., DELTA]
    F_f, F_r, F_x = tire_forces(x, params, xp)
    cg, sg = xp.cos(gamma), xp.sin(gamma)
    cd, sd = xp.cos(delta), xp.sin(delta)
    return xp.stack(
        [
            v_f * cg - v_l * sg,
            v_f * sg + v_l * cg,
            omega,
            (F_x - F_f * sd) / params.m + v_l * omega,
            (F_r + F_f * cd) / params.m - v_f * omega,
            (F_f * params.l_f * cd - F_r * params.l_r) / params.I_z,
            u[..., DTAU],
            u[..., DDELTA],
            u[..., DTHETA],
        ],
        axis=-1,
    )


def rk4_step(x, u, params: VehicleParams, dt: float, xp=np):
    """One classical RK4 step of the nominal model."""
    k1 = continuous_dynamics(x, u, params, xp)
    k2 = continuous_dynamics(x + 0.5 * dt * k1, u, params, xp)
    k3 = continuous_dynamics(x + 0.5 * dt * k2, u, params, xp)
    k4 = continuous_dynamics(x + dt * k3, u, params, xp)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def discrete_step(x, u, w, params: VehicleParams, dt: float = DT) -> np.ndarray:
    """Disturbed discrete dynamics: RK4 step followed by a position displacement.

    ``w`` is the 2-vector added to ``(p_x, p_y)``; ``w = 0`` gives the
    nominal model.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    nxt = rk4_step(x, np.asarray(u, dtype=float), params, dt)
    nxt[..., PX] += w[..., 0]
    nxt[..., PY] += w[..., 1]
    return nxt


def simulate(x, inputs, disturbances, params: VehicleParams, dt: float = DT) -> np.ndarray:
    """Compose ``k`` disturbed steps and return the final state."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    disturbances = np.atleast_2d(np.asarray(disturbances, dtype=float))
    if len(inputs) != len(disturbances):
        raise ValueError(
            f"inputs and disturbances differ in length ({len(inputs)} vs {len(disturbances)})"
        )
    if len(inputs) < 1:
        raise ValueError("need at least one step")
    state = np.asarray(x, dtype=float)
    for u, w in zip(inputs, disturbances):
        state = discrete_step(state, u, w, params, dt)
    return state


def rollout(x0, inputs, params: VehicleParams, dt: float = DT) -> np.ndarray:
    """Nominal state trajectory ``x_0..x_k`` under an input sequence."""
    inputs = np.asarray(inputs, dtype=float)
    traj = np.empty((len(inputs) + 1, NX))
    traj[0] = x0
    for i, u in enumerate(inputs):
        traj[i + 1] = rk4_step(traj[i], u, params, dt)
    return traj
