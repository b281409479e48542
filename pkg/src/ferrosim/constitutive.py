"""Pointwise constitutive laws and the applied magnetizing field."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np
from scipy.special import expit

from .errors import ConfigError, SingularityError


@dataclass(frozen=True)
class ModelParams:
    epsilon: float = 0.01
    gamma: float = 2e-4
    lam: float = 0.05
    relaxation_time: float = 1e-4
    mu0: float = 1.0
    chi0: float = 0.5
    nu_w: float = 1.0
    nu_f: float = 2.0
    eta: float | None = None  # defaults to epsilon
    r: float = 0.1
    gravity: Tuple[float, float] = (0.0, -30000.0)
    dt: float = 5e-4
    t_final: float = 2.0

    def __post_init__(self):
        if self.eta is None:
            object.__setattr__(self, "eta", self.epsilon)
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        self.validate()

    def validate(self, mode: str = "simplified"):
        positive = {
            "epsilon": self.epsilon, "gamma": self.gamma, "lambda": self.lam,
            "relaxation_time": self.relaxation_time, "mu0": self.mu0,
            "nu_w": self.nu_w, "nu_f": self.nu_f, "eta": self.eta, "dt": self.dt,
            "t_final": self.t_final,
        }
        for key, val in positive.items():
            if not np.isfinite(val) or val <= 0:
                raise ConfigError(f"must be positive, got {val}", key)
        if self.chi0 < 0:
            raise ConfigError(f"must be nonnegative, got {self.chi0}", "chi0")
        if self.r < 0:
            raise ConfigError(f"must be nonnegative, got {self.r}", "r")
        if self.eta > self.epsilon:
            raise ConfigError(
                f"stabilization eta = {self.eta} must not exceed epsilon = {self.epsilon}", "eta"
            )
        if mode == "full" and self.chi0 > 4:
            raise ConfigError(f"full mode requires chi0 <= 4, got {self.chi0}", "chi0")
        return self

    def with_(self, **kw) -> "ModelParams":
        return replace(self, **kw)


def double_well(phi):
    """Truncated double well F and its derivative f.

    Quadratic outside [-1, 1], quartic inside, C^1 at the junctions.
    """
    phi = np.asarray(phi, dtype=float)
    F = np.where(
        phi <= -1.0, (phi + 1.0) ** 2,
        np.where(phi >= 1.0, (phi - 1.0) ** 2, 0.25 * (phi**2 - 1.0) ** 2),
    )
    f = np.where(
        phi <= -1.0, 2.0 * (phi + 1.0),
        np.where(phi >= 1.0, 2.0 * (phi - 1.0), phi**3 - phi),
    )
    return F, f


def heaviside_sigmoid(x):
    return expit(x)


def viscosity(phi, params: ModelParams):
    return params.nu_w + (params.nu_f - params.nu_w) * expit(np.asarray(phi) / params.epsilon)


def susceptibility(phi, params: ModelParams):
    return params.chi0 * expit(np.asarray(phi) / params.epsilon)


def boussinesq_force(phi, params: ModelParams):
    """(1 + r H(phi/eps)) g; trailing axis holds the two components."""
    scale = 1.0 + params.r * expit(np.asarray(phi, dtype=float) / params.epsilon)
    return scale[..., None] * np.asarray(params.gravity)


# -- applied field ----------------------------------------------------------

@dataclass(frozen=True)
class Dipole:
    position: Tuple[float, float]
    direction: Tuple[float, float] = (0.0, 1.0)
    alpha_max: float = 1.0


@dataclass(frozen=True)
class DipoleConfig:
    dipoles: Tuple[Dipole, ...] = ()
    t_ramp: float = 1.0
    hold: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dipoles", tuple(self.dipoles))
        if not self.t_ramp > 0:
            raise ConfigError(f"must be positive, got {self.t_ramp}", "dipoles.t_ramp")
        for d in self.dipoles:
            if abs(np.hypot(*d.direction) - 1.0) > 1e-14:
                raise ConfigError(f"direction {d.direction} is not a unit vector",
                                  "dipoles.direction")

    def intensity(self, t: float, alpha_max: float) -> float:
        """Linear ramp to alpha_max at t_ramp; held afterwards (or kept ramping)."""
        s = t / self.t_ramp
        if self.hold:
            s = min(s, 1.0)
        return alpha_max * max(s, 0.0)

    def scaled(self, factor: float) -> "DipoleConfig":
        return replace(self, dipoles=tuple(replace(d, alpha_max=d.alpha_max * factor)
                                           for d in self.dipoles))

    @property
    def active(self) -> bool:
        return any(d.alpha_max != 0 for d in self.dipoles)


def applied_field(x, t: float, cfg: DipoleConfig):
    """Applied field h_a and its scalar potential at points ``x`` (..., 2).

    Each dipole contributes alpha * d.(x_s - x) / |x_s - x|^2, a harmonic
    potential; h_a is its spatial gradient.
    """
    x = np.asarray(x, dtype=float)
    h = np.zeros(x.shape)
    pot = np.zeros(x.shape[:-1])
    for dip in cfg.dipoles:
        alpha = cfg.intensity(t, dip.alpha_max)
        if alpha == 0.0:
            continue
        d = np.asarray(dip.direction)
        r = np.asarray(dip.position) - x
        r2 = np.einsum("...a,...a->...", r, r)
        if np.any(r2 == 0.0):
            raise SingularityError(f"applied field evaluated at dipole location {dip.position}")
        dr = r @ d
        pot += alpha * dr / r2
        h += alpha * (-d / r2[..., None] + 2.0 * (dr / r2**2)[..., None] * r)
    return h, pot


def applied_field_rate(x, t: float, dt: float, cfg: DipoleConfig):
    """Backward difference quotient (h_a(t) - h_a(t - dt)) / dt."""
    return (applied_field(x, t, cfg)[0] - applied_field(x, t - dt, cfg)[0]) / dt
