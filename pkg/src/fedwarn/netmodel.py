"""Delay model for the NB-IoT access link and ledger processing stages."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Literal

import numpy as np

Kind = Literal["constant", "uniform", "shifted-exponential"]


@dataclass(frozen=True)
class DelayDistribution:
    """A nonnegative delay in seconds.

    ``a``/``b`` hold value/unused for constant, low/high for uniform and
    offset/mean-of-the-exponential-part for shifted-exponential.
    """

    kind: Kind
    a: float
    b: float = 0.0

    def __post_init__(self):
        if self.kind == "constant":
            if self.a < 0:
                raise ValueError("constant delay must be >= 0")
        elif self.kind == "uniform":
            if self.a < 0 or self.a > self.b:
                raise ValueError("uniform delay needs 0 <= low <= high")
        elif self.kind == "shifted-exponential":
            if self.a < 0 or self.b < 0:
                raise ValueError("shifted-exponential needs offset >= 0 and mean >= 0")
        else:
            raise ValueError(f"unknown delay kind {self.kind!r}")

    @classmethod
    def constant(cls, value: float) -> "DelayDistribution":
        return cls("constant", float(value))

    @classmethod
    def uniform(cls, low: float, high: float) -> "DelayDistribution":
        return cls("uniform", float(low), float(high))

    @classmethod
    def shifted_exponential(cls, offset: float, mean: float) -> "DelayDistribution":
        return cls("shifted-exponential", float(offset), float(mean))

    @property
    def mean(self) -> float:
        if self.kind == "constant":
            return self.a
        if self.kind == "uniform":
            return 0.5 * (self.a + self.b)
        return self.a + self.b

    @property
    def variance(self) -> float:
        if self.kind == "constant":
            return 0.0
        if self.kind == "uniform":
            return (self.b - self.a) ** 2 / 12.0
        return self.b**2

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": self.kind, "value": self.a}
        if self.kind == "uniform":
            return {"kind": self.kind, "low": self.a, "high": self.b}
        return {"kind": self.kind, "offset": self.a, "mean": self.b}


def sample(dist: DelayDistribution, rng: np.random.Generator) -> float:
    # Every kind consumes exactly one draw so streams stay aligned when a
    # distribution is swapped for another.
    if dist.kind == "constant":
        rng.random()
        return dist.a
    if dist.kind == "uniform":
        return dist.a + (dist.b - dist.a) * rng.random()
    return dist.a + dist.b * rng.standard_exponential()


@dataclass(frozen=True)
class LatencyModel:
    """Per-stage delays; defaults give 0.25 s per endorsing peer."""

    uplink: DelayDistribution = field(default_factory=lambda: DelayDistribution.constant(0.09))
    downlink: DelayDistribution = field(default_factory=lambda: DelayDistribution.constant(0.06))
    endorse_proc: DelayDistribution = field(default_factory=lambda: DelayDistribution.constant(0.10))
    order_proc: DelayDistribution = field(default_factory=lambda: DelayDistribution.constant(0.20))
    validate_proc: DelayDistribution = field(default_factory=lambda: DelayDistribution.constant(0.15))
    edge_proc: DelayDistribution = field(default_factory=lambda: DelayDistribution.constant(0.05))

    @classmethod
    def zero(cls, **overrides: DelayDistribution) -> "LatencyModel":
        base = {f.name: DelayDistribution.constant(0.0) for f in fields(cls)}
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name).to_dict() for f in fields(self)}


def per_endorser_cost(model: LatencyModel) -> float:
    return model.uplink.mean + model.endorse_proc.mean + model.downlink.mean


def expected_dlt_e2e(model: LatencyModel, n_endorsers: int) -> float:
    """Mean send-to-confirmation time when endorsers are contacted one by one.

    The device's half-duplex radio runs one proposal/response exchange per
    endorser, then one uplink to the orderer; ordering and validation follow
    and the commit confirmation comes back on the downlink.
    """
    if n_endorsers < 1:
        raise ValueError("need at least one endorser")
    return (
        n_endorsers * per_endorser_cost(model)
        + model.uplink.mean
        + model.order_proc.mean
        + model.validate_proc.mean
        + model.downlink.mean
    )


def expected_conventional_e2e(model: LatencyModel) -> float:
    return model.uplink.mean + model.edge_proc.mean + model.downlink.mean
