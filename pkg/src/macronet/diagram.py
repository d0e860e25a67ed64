"""Fundamental diagrams: velocity, flux, demand/supply envelopes and their derivatives.

Every quantity is expressed in terms of the *total* density ``r`` of all
vehicle classes; a diagram instance describes one class on one road. The
demand ``D(r) = Q(min(r, r_cr))`` and supply ``S(r) = Q(max(r, r_cr))``
envelopes are what the Godunov-type interface fluxes consume: the interface
flux of the scalar problem is ``min(D(r_up), S(r_down))``.

All evaluation methods broadcast over numpy arrays, so the same code serves
scalar unit tests and vectorised bulk evaluation over road cells.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, replace

import numpy as np


class FundamentalDiagram(ABC):
    """Interface every concave fundamental diagram must provide.

    Implementations must expose velocity/flux, the critical density, the
    demand and supply envelopes and the four partial derivatives the adjoint
    assembly needs (with respect to total density and to the speed scale).
    """

    V: float
    R: float

    @abstractmethod
    def velocity(self, r):
        ...

    @abstractmethod
    def flux(self, r):
        ...

    @abstractmethod
    def critical_density(self) -> float:
        ...

    @abstractmethod
    def demand(self, r):
        ...

    @abstractmethod
    def supply(self, r):
        ...

    @abstractmethod
    def d_demand_dr(self, r):
        ...

    @abstractmethod
    def d_supply_dr(self, r):
        ...

    @abstractmethod
    def d_demand_dV(self, r):
        ...

    @abstractmethod
    def d_supply_dV(self, r):
        ...

    @abstractmethod
    def max_wave_speed(self) -> float:
        ...


def _check_nonnegative(r) -> None:
    if np.any(np.asarray(r) < 0):
        raise ValueError("density must be non-negative")


@dataclass(frozen=True)
class Greenshields(FundamentalDiagram):
    """Parabolic diagram: v(r) = V (1 - r/R), clamped to 0 for r >= R.

    Flux Q(r) = V r (1 - r/R) peaks at the critical density R/2 with
    capacity V R / 4.
    """

    V: float
    R: float

    def __post_init__(self) -> None:
        if self.V <= 0:
            raise ValueError("maximum speed must be positive")
        if self.R <= 0:
            raise ValueError("maximum density must be positive")

    def with_speed(self, V: float) -> "Greenshields":
        return replace(self, V=V)

    def velocity(self, r):
        _check_nonnegative(r)
        return self.V * np.maximum(1.0 - np.asarray(r, dtype=float) / self.R, 0.0)

    def flux(self, r):
        return np.asarray(r, dtype=float) * self.velocity(r)

    def critical_density(self) -> float:
        return 0.5 * self.R

    def demand(self, r):
        _check_nonnegative(r)
        return self.flux(np.minimum(r, self.critical_density()))

    def supply(self, r):
        _check_nonnegative(r)
        return self.flux(np.maximum(r, self.critical_density()))

    def d_flux_dr(self, r):
        # Q'(r) = V(1 - 2r/R) on [0, R]; outside the support the flux is 0.
        r = np.asarray(r, dtype=float)
        return np.where(r < self.R, self.V * (1.0 - 2.0 * r / self.R), 0.0)

    def d_demand_dr(self, r):
        # Active (rising) branch for r <= r_cr, clamped to 0 beyond.
        r = np.asarray(r, dtype=float)
        return np.where(r <= self.critical_density(), self.d_flux_dr(r), 0.0)

    def d_supply_dr(self, r):
        r = np.asarray(r, dtype=float)
        return np.where(r > self.critical_density(), self.d_flux_dr(r), 0.0)

    def d_velocity_dV(self, r):
        r = np.asarray(r, dtype=float)
        return np.maximum(1.0 - r / self.R, 0.0)

    def d_demand_dV(self, r):
        m = np.minimum(np.asarray(r, dtype=float), self.critical_density())
        return m * self.d_velocity_dV(m)

    def d_supply_dV(self, r):
        m = np.maximum(np.asarray(r, dtype=float), self.critical_density())
        return m * self.d_velocity_dV(m)

    def max_wave_speed(self) -> float:
        # max(|v|_inf, |Q'|_inf) = V for the parabola.
        return self.V


def godunov_scalar_flux(d_up: FundamentalDiagram, d_down: FundamentalDiagram,
                        r_up: float, r_down: float) -> float:
    """Scalar Godunov interface flux min(D_up(r_up), S_down(r_down))."""
    return float(np.minimum(d_up.demand(r_up), d_down.supply(r_down)))
