"""Deterministic SEIR metapopulation dynamics (forward Euler)."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence


class DegenerateRegion(ValueError):
    """Raised for a region with zero population."""


@dataclass(frozen=True)
class EpidemicParams:
    beta: float = 0.5
    sigma: float = 0.2
    gamma: float = 0.1
    dt: float = 0.1
    sir_mode: bool = False

    def __post_init__(self):
        for name in ("beta", "sigma", "gamma"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be finite and >= 0")
        if not 0 < self.dt <= 1:
            raise ValueError("dt must be in (0, 1]")
        if self.dt * max(self.beta, self.sigma, self.gamma) >= 1:
            raise ValueError("dt * max(beta, sigma, gamma) must be < 1")


@dataclass(frozen=True)
class RegionCompartments:
    region_id: str
    S: float
    E: float
    I: float
    R: float

    def __post_init__(self):
        if min(self.S, self.E, self.I, self.R) < 0:
            raise ValueError(f"negative compartment in region {self.region_id}")

    @property
    def N(self) -> float:
        return self.S + self.E + self.I + self.R


@dataclass(frozen=True)
class MetapopulationState:
    t: float
    regions: tuple[RegionCompartments, ...]
    mobility: tuple[tuple[float, ...], ...]

    @classmethod
    def create(
        cls,
        regions: Sequence[RegionCompartments],
        mobility: Sequence[Sequence[float]] | None = None,
        t: float = 0.0,
    ) -> "MetapopulationState":
        n = len(regions)
        if mobility is None:
            mobility = [[0.0] * n for _ in range(n)]
        m = tuple(tuple(float(x) for x in row) for row in mobility)
        if len(m) != n or any(len(row) != n for row in m):
            raise ValueError(f"mobility matrix must be {n}x{n}")
        for i, row in enumerate(m):
            if row[i] != 0:
                raise ValueError("mobility diagonal must be zero")
            if any(x < 0 for x in row):
                raise ValueError("mobility rates must be >= 0")
        return cls(float(t), tuple(regions), m)

    def total(self) -> float:
        return math.fsum(r.N for r in self.regions)

    def region(self, region_id: str) -> RegionCompartments:
        for r in self.regions:
            if r.region_id == region_id:
                return r
        raise KeyError(region_id)


def seir_step(c: RegionCompartments, p: EpidemicParams) -> RegionCompartments:
    """Advance one region by ``p.dt`` days.

    Each flow is capped by its source compartment, so nothing goes negative
    and S+E+I+R is preserved even if the step is too aggressive.
    """
    n = c.N
    if n == 0:
        raise DegenerateRegion(c.region_id)
    dt = p.dt
    infection = min(c.S, dt * p.beta * c.S * c.I / n)
    recovery = min(c.I, dt * p.gamma * c.I)
    if p.sir_mode:
        return replace(
            c,
            S=c.S - infection,
            I=c.I + infection - recovery,
            R=c.R + recovery,
        )
    onset = min(c.E, dt * p.sigma * c.E)
    return replace(
        c,
        S=c.S - infection,
        E=c.E + infection - onset,
        I=c.I + onset - recovery,
        R=c.R + recovery,
    )


def _check_mobility(state: MetapopulationState, dt: float) -> None:
    for i, row in enumerate(state.mobility):
        if dt * sum(row) > 1 + 1e-12:
            raise ValueError(f"row {i} of mobility moves more than the population in one step")


def apply_mobility(state: MetapopulationState, dt: float) -> MetapopulationState:
    """Exchange a proportional share of every compartment between regions."""
    _check_mobility(state, dt)
    m = state.mobility
    n = len(state.regions)
    out = []
    for i, region in enumerate(state.regions):
        values = {}
        for comp in "SEIR":
            own = getattr(region, comp)
            leaving = dt * own * sum(m[i])
            arriving = dt * math.fsum(
                m[j][i] * getattr(state.regions[j], comp) for j in range(n) if j != i
            )
            values[comp] = max(0.0, own - leaving + arriving)
        out.append(replace(region, **values))
    return replace(state, regions=tuple(out))


def step(state: MetapopulationState, p: EpidemicParams) -> MetapopulationState:
    """Mobility exchange followed by local SEIR dynamics in every region."""
    moved = apply_mobility(state, p.dt)
    regions = tuple(
        seir_step(r, p) if r.N > 0 else r for r in moved.regions
    )
    return replace(moved, t=state.t + p.dt, regions=regions)


def prevalence(c: RegionCompartments) -> float:
    n = c.N
    if n == 0:
        raise DegenerateRegion(c.region_id)
    return c.I / n


def simulate(
    state: MetapopulationState, p: EpidemicParams, n_steps: int
) -> list[MetapopulationState]:
    """Return the trajectory including the initial state (n_steps + 1 items)."""
    out = [state]
    for _ in range(n_steps):
        state = step(state, p)
        out.append(state)
    return out
