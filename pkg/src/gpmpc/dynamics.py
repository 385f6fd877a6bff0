"""Single-track vehicle model with MAGIC (true plant) and linear (nominal) tires.

States are arrays ``[X, Y, phi, vx, vy, omega]`` and inputs ``[delta, T]``.
Every function broadcasts over leading batch dimensions, so a ``(B, 6)`` stack
of states can be stepped in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

STATE_DIM = 6
INPUT_DIM = 2
STATE_NAMES = ("X", "Y", "phi", "vx", "vy", "omega")
INPUT_NAMES = ("delta", "T")

# rows of the state touched by model mismatch and process noise
BD = np.vstack([np.zeros((3, 3)), np.eye(3)])


class DomainError(ValueError):
    """Raised when the model is evaluated outside its validity region."""


class VehicleState(NamedTuple):
    X: float
    Y: float
    phi: float
    vx: float
    vy: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


class ControlInput(NamedTuple):
    delta: float
    T: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


@dataclass(frozen=True)
class VehicleParams:
    M: float = 500.0
    Iz: float = 600.0
    Lf: float = 0.9
    Lr: float = 1.5
    zeta: float = 1.0
    Fa: float = 4000.0
    Fb: float = 6000.0
    vx_floor: float = 0.5
    # Fy = -F(alpha) so the tires resist slip (alpha = atan(..) - delta);
    # False applies +F(alpha), which makes the lateral mode open-loop unstable
    restoring_tires: bool = True

    def __post_init__(self):
        if min(self.M, self.Iz, self.Lf, self.Lr, self.Fa, self.Fb) <= 0:
            raise ValueError("vehicle parameters must be positive")
        if not 0.0 <= self.zeta <= 1.0:
            raise ValueError("torque distribution zeta must lie in [0, 1]")


@dataclass(frozen=True)
class TireParamsMagic:
    Bf: float = 0.4
    Cf: float = 8.0
    Df: float = 4560.4
    Ef: float = -0.5
    Br: float = 0.45
    Cr: float = 8.0
    Dr: float = 4000.0
    Er: float = -0.5

    def __post_init__(self):
        if self.Df <= 0 or self.Dr <= 0:
            raise ValueError("peak factors must be positive")


@dataclass(frozen=True)
class TireParamsLinear:
    Clf: float = 1400.0
    Clr: float = 1400.0

    def __post_init__(self):
        if self.Clf <= 0 or self.Clr <= 0:
            raise ValueError("cornering stiffness must be positive")


TireParams = Union[TireParamsMagic, TireParamsLinear]


@dataclass(frozen=True)
class ProcessNoise:
    sigma_vx2: float = 7.1304e-4
    sigma_vy2: float = 1.0358e-10
    sigma_omega2: float = 1.0059e-10

    def __post_init__(self):
        if min(self.sigma_vx2, self.sigma_vy2, self.sigma_omega2) < 0:
            raise ValueError("noise variances must be non-negative")

    @property
    def cov(self) -> np.ndarray:
        return np.diag([self.sigma_vx2, self.sigma_vy2, self.sigma_omega2])

    @classmethod
    def zero(cls) -> "ProcessNoise":
        return cls(0.0, 0.0, 0.0)


def slip_angles(x, u, params: VehicleParams):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    vx, vy, omega = x[..., 3], x[..., 4], x[..., 5]
    if np.any(vx <= params.vx_floor):
        raise DomainError(
            f"longitudinal speed {np.min(vx):.3f} m/s at or below floor {params.vx_floor} m/s"
        )
    alpha_f = np.arctan((vy + params.Lf * omega) / vx) - u[..., 0]
    alpha_r = np.arctan((vy - params.Lr * omega) / vx)
    return alpha_f, alpha_r


def _magic(alpha, B, C, D, E):
    ba = B * alpha
    return D * np.sin(C * np.arctan(ba - E * (ba - np.arctan(ba))))


def lateral_forces_magic(alpha_f, alpha_r, tires: TireParamsMagic):
    return (
        _magic(alpha_f, tires.Bf, tires.Cf, tires.Df, tires.Ef),
        _magic(alpha_r, tires.Br, tires.Cr, tires.Dr, tires.Er),
    )


def lateral_forces_linear(alpha_f, alpha_r, tires: TireParamsLinear):
    return tires.Clf * np.asarray(alpha_f), tires.Clr * np.asarray(alpha_r)


def lateral_forces(alpha_f, alpha_r, tires: TireParams):
    if isinstance(tires, TireParamsMagic):
        return lateral_forces_magic(alpha_f, alpha_r, tires)
    return lateral_forces_linear(alpha_f, alpha_r, tires)


def longitudinal_forces(u, vx, params: VehicleParams):
    """Pedal-proportional drive/brake force split between the axles.

    Returns ``(Ffx, Frx)``. Braking opposes the direction of travel, with
    ``sign(0)`` taken as +1.
    """
    T = np.asarray(u, dtype=float)[..., 1]
    sign_vx = np.where(np.asarray(vx) < 0.0, -1.0, 1.0)
    gain = np.where(T > 0.0, params.Fa, np.where(T < 0.0, params.Fb * sign_vx, 0.0))
    fw = T * gain
    return (1.0 - params.zeta) * fw, params.zeta * fw


def continuous_dynamics(x, u, params: VehicleParams, tires: TireParams):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    phi, vx, vy, omega = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
    delta = u[..., 0]

    alpha_f, alpha_r = slip_angles(x, u, params)
    ffy, fry = lateral_forces(alpha_f, alpha_r, tires)
    if params.restoring_tires:
        ffy, fry = -ffy, -fry
    ffx, frx = longitudinal_forces(u, vx, params)

    cphi, sphi = np.cos(phi), np.sin(phi)
    cd, sd = np.cos(delta), np.sin(delta)
    M = params.M
    return np.stack(
        [
            vx * cphi - vy * sphi,
            vx * sphi + vy * cphi,
            omega,
            (frx + ffx * cd - ffy * sd + M * omega * vy) / M,
            (fry + ffx * sd + ffy * cd - M * omega * vx) / M,
            (ffy * params.Lf * cd + ffx * params.Lf * sd - fry * params.Lr) / params.Iz,
        ],
        axis=-1,
    )


def integrate(x, u, params: VehicleParams, tires: TireParams, Ts: float, method: str = "rk4"):
    """One fixed step of the continuous model, zero-order hold on ``u``."""
    if Ts <= 0:
        raise ValueError("sampling time must be positive")
    x = np.asarray(x, dtype=float)
    f = continuous_dynamics
    if method == "euler":
        return x + Ts * f(x, u, params, tires)
    if method != "rk4":
        raise ValueError(f"unknown integration method {method!r}")
    k1 = f(x, u, params, tires)
    k2 = f(x + 0.5 * Ts * k1, u, params, tires)
    k3 = f(x + 0.5 * Ts * k2, u, params, tires)
    k4 = f(x + Ts * k3, u, params, tires)
    return x + (Ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_nominal(x, u, params: VehicleParams, Ts: float,
                 tires: TireParamsLinear = TireParamsLinear(), method: str = "rk4"):
    """Discrete nominal model used by the controller (linear tires)."""
    return integrate(x, u, params, tires, Ts, method)


def step_true(x, u, params: VehicleParams, tires: TireParamsMagic, noise: ProcessNoise,
              rng: np.random.Generator, Ts: float, method: str = "rk4"):
    """True plant: MAGIC-tire step plus Gaussian noise on (vx, vy, omega)."""
    x_next = integrate(x, u, params, tires, Ts, method)
    std = np.sqrt([noise.sigma_vx2, noise.sigma_vy2, noise.sigma_omega2])
    w = rng.standard_normal(np.shape(x_next)[:-1] + (3,)) * std
    return x_next + w @ BD.T


@dataclass(frozen=True)
class NominalModel:
    """Discrete nominal model ``f_n`` bundled with its parameters."""

    params: VehicleParams = VehicleParams()
    tires: TireParamsLinear = TireParamsLinear()
    Ts: float = 0.05
    method: str = "rk4"

    def step(self, x, u):
        return step_nominal(x, u, self.params, self.Ts, self.tires, self.method)
