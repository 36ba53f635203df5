"""CSTR plant: true and misspecified dynamics, RK4 discretization, RL stage cost.

State is ``x = (V, Ca, T)`` in liters, mol/L and kelvin; control is
``u = (qs, qc)`` in L/min. All functions here are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STATE_NAMES = ("V", "Ca", "T")
CONTROL_NAMES = ("qs", "qc")

X_REF = np.array([105.0, 0.12, 433.0])
U_REF = np.array([100.0, 110.0])

STATE_LB = np.array([90.0, 0.0, 400.0])
STATE_UB = np.array([110.0, 0.35, 480.0])
CONTROL_LB = np.array([55.0, 55.0])
CONTROL_UB = np.array([140.0, 140.0])

STAGE_STATE_WEIGHTS = np.array([10.0, 5000.0, 10.0])
STAGE_CONTROL_WEIGHTS = np.array([10.0, 10.0])
CONSTRAINT_PENALTY = np.array([1e5, 1e5, 1e5])

DT = 0.05


class DomainError(ValueError):
    """Raised when a state or control lies outside the model's domain."""


@dataclass(frozen=True)
class CstrParams:
    """Physical constants of the reactor (units as in the usual CSTR tables)."""

    q_o: float = 100.0
    C_ao: float = 1.0
    T_o: float = 350.0
    T_co: float = 350.0
    dH: float = -2e5
    rho_cp: float = 1000.0
    k0: float = 7.2e10
    E_over_R: float = 1e4
    rhoc_cpc: float = 1000.0
    hA: float = 7e5

    @property
    def k1(self) -> float:
        return -self.dH * self.k0 / self.rho_cp

    @property
    def k2(self) -> float:
        return self.rhoc_cpc / self.rho_cp

    @property
    def k3(self) -> float:
        return self.hA / self.rhoc_cpc


@dataclass(frozen=True)
class ModelVariant:
    """Multiplicative biases applied to the CSTR vector field.

    The true plant has every bias equal to one. The misspecified model used
    inside the MPC scales the dilution term, the Arrhenius consumption, the
    reaction heat, the coolant heat exchange and ``k3``.
    """

    name: str = "TruePlant"
    dilution: float = 1.0
    reaction: float = 1.0
    heat: float = 1.0
    cooling: float = 1.0
    k3_factor: float = 1.0

    @classmethod
    def true_plant(cls) -> "ModelVariant":
        return cls()

    @classmethod
    def misspecified(cls) -> "ModelVariant":
        return cls("Misspecified", 1.1, 1.2, 1.15, 0.9, 1.2)

    @classmethod
    def from_name(cls, name: str) -> "ModelVariant":
        key = name.replace("-", "").replace("_", "").lower()
        if key in ("trueplant", "true", "perfect"):
            return cls.true_plant()
        if key in ("misspecified", "wrong"):
            return cls.misspecified()
        raise ValueError(f"unknown model variant {name!r}")


TRUE_PLANT = ModelVariant.true_plant()
MISSPECIFIED = ModelVariant.misspecified()
DEFAULT_PARAMS = CstrParams()


def cstr_rhs(x, u, params: CstrParams = DEFAULT_PARAMS, variant: ModelVariant = TRUE_PLANT, exp=np.exp):
    """Unchecked right-hand side returning the three derivative components.

    ``exp`` is injected so that the same expression builds casadi graphs.
    """
    V, Ca, T = x[0], x[1], x[2]
    qs, qc = u[0], u[1]
    arrhenius = exp(-params.E_over_R / T)
    dV = params.q_o - qs
    dCa = (
        variant.dilution * params.q_o / V * (params.C_ao - Ca)
        - variant.reaction * params.k0 * arrhenius * Ca
    )
    dT = (
        params.q_o / V * (params.T_o - T)
        + variant.heat * params.k1 * arrhenius * Ca
        + variant.cooling * params.k2 * qc / V
        * (1.0 - exp(-variant.k3_factor * params.k3 / qc))
        * (params.T_co - T)
    )
    return dV, dCa, dT


def _check(state, control):
    x = np.asarray(state, dtype=float)
    u = np.asarray(control, dtype=float)
    if x.shape != (3,) or u.shape != (2,):
        raise DomainError(f"expected state of shape (3,) and control (2,), got {x.shape}, {u.shape}")
    for name, value in zip(STATE_NAMES + CONTROL_NAMES, np.r_[x, u]):
        if not np.isfinite(value):
            raise DomainError(f"{name} is not finite ({value})")
    if x[0] <= 0.0:
        raise DomainError(f"V must be positive, got {x[0]}")
    if u[1] <= 0.0:
        raise DomainError(f"qc must be positive, got {u[1]}")
    return x, u


def vector_field(state, control, params: CstrParams = DEFAULT_PARAMS,
                 variant: ModelVariant = TRUE_PLANT) -> np.ndarray:
    """Evaluate ``(dV/dt, dCa/dt, dT/dt)`` at the given state and control.

    Raises:
        DomainError: on non-finite input, ``V <= 0`` or ``qc <= 0``.
    """
    x, u = _check(state, control)
    return np.array(cstr_rhs(x, u, params, variant))


def rk4(f, x, u, dt):
    """One classical RK4 step of ``f(x, u)`` with ``u`` held constant."""
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(state, control, dt: float = DT, variant: ModelVariant = TRUE_PLANT,
             params: CstrParams = DEFAULT_PARAMS) -> np.ndarray:
    """Advance the CSTR by one sampling period with zero-order-hold control."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    _check(state, control)
    return rk4(lambda x, u: vector_field(x, u, params, variant),
               np.asarray(state, dtype=float), np.asarray(control, dtype=float), dt)


@dataclass(frozen=True)
class StageCost:
    """Quadratic tracking cost plus a linear penalty on state-box violations."""

    x_ref: np.ndarray = field(default_factory=lambda: X_REF.copy())
    u_ref: np.ndarray = field(default_factory=lambda: U_REF.copy())
    state_weights: np.ndarray = field(default_factory=lambda: STAGE_STATE_WEIGHTS.copy())
    control_weights: np.ndarray = field(default_factory=lambda: STAGE_CONTROL_WEIGHTS.copy())
    penalty: np.ndarray = field(default_factory=lambda: CONSTRAINT_PENALTY.copy())
    state_lb: np.ndarray = field(default_factory=lambda: STATE_LB.copy())
    state_ub: np.ndarray = field(default_factory=lambda: STATE_UB.copy())

    def violation(self, state) -> np.ndarray:
        x = np.asarray(state, dtype=float)
        # lower and upper violations of one component cannot both be positive
        return np.maximum(0.0, self.state_lb - x) + np.maximum(0.0, x - self.state_ub)

    def __call__(self, state, control) -> float:
        x = np.asarray(state, dtype=float)
        u = np.asarray(control, dtype=float)
        dx = x - self.x_ref
        du = u - self.u_ref
        tracking = dx @ (self.state_weights * dx) + du @ (self.control_weights * du)
        return float(tracking + self.penalty @ self.violation(x))


DEFAULT_STAGE_COST = StageCost()


def rl_stage_cost(state, control, refs=None, cost: StageCost = DEFAULT_STAGE_COST) -> float:
    """RL stage cost ``L(x, u)``; ``refs`` optionally overrides ``(x_r, u_r)``."""
    if refs is not None:
        x_r, u_r = refs
        cost = StageCost(np.asarray(x_r, float), np.asarray(u_r, float), cost.state_weights,
                         cost.control_weights, cost.penalty, cost.state_lb, cost.state_ub)
    return cost(state, control)


def clip_control(control, lb=CONTROL_LB, ub=CONTROL_UB) -> np.ndarray:
    return np.clip(np.asarray(control, dtype=float), lb, ub)


DEFAULT_INITIAL_BOX = (np.array([95.0, 0.05, 410.0]), np.array([108.0, 0.3, 460.0]))


def sample_initial_state(rng: np.random.Generator, box=DEFAULT_INITIAL_BOX) -> np.ndarray:
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    return lo + (hi - lo) * rng.random(3)
