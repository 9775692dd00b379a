"""Patient vitals generation, pseudonymization and private regional aggregation."""

from __future__ import annotations

import hashlib
import hmac
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from fedwarn.epidemic import RegionCompartments, prevalence

TEMP_RANGE = (30.0, 45.0)
SPO2_RANGE = (50.0, 100.0)
HR_RANGE = (20.0, 250.0)


@dataclass(frozen=True)
class DeviceReading:
    device_pseudonym: str
    region_id: str
    t: float
    temp_c: float
    spo2_pct: float
    hr_bpm: float


@dataclass(frozen=True)
class SymptomModel:
    healthy_temp_mean: float = 36.8
    healthy_temp_sd: float = 0.4
    infected_temp_mean: float = 39.0
    infected_temp_sd: float = 0.5
    healthy_spo2_mean: float = 97.5
    healthy_spo2_sd: float = 1.0
    infected_spo2_mean: float = 92.0
    infected_spo2_sd: float = 3.0
    healthy_hr_mean: float = 72.0
    healthy_hr_sd: float = 8.0
    infected_hr_mean: float = 95.0
    infected_hr_sd: float = 12.0
    symptomatic_fraction: float = 0.6
    fever_threshold_c: float = 38.0

    def __post_init__(self):
        if not self.infected_temp_mean > self.healthy_temp_mean:
            raise ValueError("infected_temp_mean must exceed healthy_temp_mean")
        for name, value in asdict(self).items():
            if name.endswith("_sd") and not value > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 <= self.symptomatic_fraction <= 1:
            raise ValueError("symptomatic_fraction must be in [0, 1]")

    def healthy_fever_rate(self) -> float:
        """P(healthy temperature >= fever threshold), the detector baseline."""
        z = (self.fever_threshold_c - self.healthy_temp_mean) / self.healthy_temp_sd
        return 0.5 * math.erfc(z / math.sqrt(2))

    def infected_fever_rate(self) -> float:
        z = (self.fever_threshold_c - self.infected_temp_mean) / self.infected_temp_sd
        return 0.5 * math.erfc(z / math.sqrt(2))

    def fever_rate(self, prevalence: float) -> float:
        """Expected fever fraction at a given prevalence (ignores clamping)."""
        sick = prevalence * self.symptomatic_fraction
        return sick * self.infected_fever_rate() + (1 - sick) * self.healthy_fever_rate()


def pseudonymize(device_id: str, epoch: int, secret: bytes) -> str:
    """Keyed, epoch-bound pseudonym (HMAC-SHA256, hex)."""
    if not secret:
        raise ValueError("pseudonymization secret must be nonempty")
    msg = device_id.encode() + b"\x00" + str(int(epoch)).encode()
    return hmac.new(secret, msg, hashlib.sha256).hexdigest()


def generate_readings(
    region: RegionCompartments,
    devices: Sequence[str],
    model: SymptomModel,
    epoch: int,
    secret: bytes,
    rng: np.random.Generator,
    t: float = 0.0,
) -> list[DeviceReading]:
    n = len(devices)
    if n == 0:
        return []
    p = prevalence(region)
    infected = rng.random(n) < p
    symptomatic = infected & (rng.random(n) < model.symptomatic_fraction)
    z = rng.standard_normal((n, 3))

    def vital(healthy_mean, healthy_sd, sick_mean, sick_sd, col, bounds):
        mean = np.where(symptomatic, sick_mean, healthy_mean)
        sd = np.where(symptomatic, sick_sd, healthy_sd)
        return np.clip(mean + sd * z[:, col], *bounds)

    temp = vital(
        model.healthy_temp_mean, model.healthy_temp_sd,
        model.infected_temp_mean, model.infected_temp_sd, 0, TEMP_RANGE,
    )
    spo2 = vital(
        model.healthy_spo2_mean, model.healthy_spo2_sd,
        model.infected_spo2_mean, model.infected_spo2_sd, 1, SPO2_RANGE,
    )
    hr = vital(
        model.healthy_hr_mean, model.healthy_hr_sd,
        model.infected_hr_mean, model.infected_hr_sd, 2, HR_RANGE,
    )
    return [
        DeviceReading(
            pseudonymize(d, epoch, secret),
            region.region_id,
            float(t),
            float(temp[i]),
            float(spo2[i]),
            float(hr[i]),
        )
        for i, d in enumerate(devices)
    ]


def obfuscate_count(true_count: int, scale: float, rng: np.random.Generator) -> int:
    """Laplace-noised count, rounded and clamped at zero. Scale 0 is exact."""
    if scale < 0:
        raise ValueError("noise scale must be >= 0")
    if scale == 0:
        return int(true_count)
    noisy = true_count + rng.laplace(0.0, scale)
    return max(0, int(round(noisy)))


@dataclass(frozen=True)
class RegionAggregate:
    region_id: str
    window_start: float
    window_end: float
    n_reports: int
    n_fever: int
    fever_fraction: float
    empty: bool = False
    # ground truth for simulation exports only; never serialized on-ledger
    n_fever_true: int = 0

    def to_payload(self) -> bytes:
        doc = {
            "region_id": self.region_id,
            "window_start": self.window_start,
            "window_end": self.window_end,
            "n_reports": self.n_reports,
            "n_fever": self.n_fever,
            "fever_fraction": self.fever_fraction,
            "empty": self.empty,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_payload(cls, payload: bytes) -> "RegionAggregate":
        doc = json.loads(payload.decode())
        return cls(
            doc["region_id"],
            float(doc["window_start"]),
            float(doc["window_end"]),
            int(doc["n_reports"]),
            int(doc["n_fever"]),
            float(doc["fever_fraction"]),
            bool(doc["empty"]),
        )

    def public(self) -> "RegionAggregate":
        """Copy with the ground-truth count stripped."""
        return RegionAggregate(
            self.region_id, self.window_start, self.window_end,
            self.n_reports, self.n_fever, self.fever_fraction, self.empty,
        )


def make_aggregate(
    region_id: str,
    window: tuple[float, float],
    n_reports: int,
    n_fever: int,
    n_fever_true: int = 0,
) -> RegionAggregate:
    n_fever = min(max(n_fever, 0), n_reports)
    if n_reports == 0:
        return RegionAggregate(region_id, window[0], window[1], 0, 0, 0.0, True, 0)
    return RegionAggregate(
        region_id, float(window[0]), float(window[1]),
        n_reports, n_fever, n_fever / n_reports, False, n_fever_true,
    )


def aggregate_region(
    readings: Sequence[DeviceReading],
    model: SymptomModel,
    window: tuple[float, float],
    noise_scale: float,
    rng: np.random.Generator,
    region_id: str | None = None,
) -> RegionAggregate:
    """Count reports and fevers in one window, noising the fever count.

    An empty window yields an aggregate with ``empty=True`` and fraction 0.
    """
    regions = {r.region_id for r in readings}
    if len(regions) > 1:
        raise ValueError(f"readings span several regions: {sorted(regions)}")
    if region_id is None:
        if not regions:
            raise ValueError("region_id is required for an empty window")
        region_id = regions.pop()
    start, end = window
    for r in readings:
        if not start <= r.t <= end:
            raise ValueError(f"reading at t={r.t} outside window {window}")
    n_true = sum(1 for r in readings if r.temp_c >= model.fever_threshold_c)
    n_reported = obfuscate_count(n_true, noise_scale, rng) if readings else 0
    return make_aggregate(region_id, window, len(readings), n_reported, n_true)


def merge_aggregates(
    aggs: Sequence[RegionAggregate], region_id: str | None = None
) -> RegionAggregate:
    """Sum several aggregates of one region into one spanning their windows."""
    if not aggs:
        raise ValueError("nothing to merge")
    region_id = region_id or aggs[0].region_id
    if any(a.region_id != region_id for a in aggs):
        raise ValueError("cannot merge aggregates of different regions")
    return make_aggregate(
        region_id,
        (min(a.window_start for a in aggs), max(a.window_end for a in aggs)),
        sum(a.n_reports for a in aggs),
        sum(a.n_fever for a in aggs),
        sum(a.n_fever_true for a in aggs),
    )
