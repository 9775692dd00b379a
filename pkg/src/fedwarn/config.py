"""Scenario configuration: dataclasses plus a strict YAML/dict loader."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Mapping, Optional

import yaml

from fedwarn.epidemic import EpidemicParams, MetapopulationState, RegionCompartments
from fedwarn.federation import DetectorConfig, FederationTree
from fedwarn.ledger import CutPolicy
from fedwarn.netmodel import DelayDistribution, LatencyModel
from fedwarn.telemetry import SymptomModel


class ConfigError(ValueError):
    """Invalid scenario; ``path`` names the offending field (dotted)."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class DetectorSettings:
    watch_mult: float = 5.0
    alert_mult: float = 20.0
    min_reports: int = 10
    regional_k: int = 2
    global_k: int = 1
    # regional node id -> region ids; empty means one regional node for all
    regional_groups: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def detector(self) -> DetectorConfig:
        return DetectorConfig(self.watch_mult, self.alert_mult, self.min_reports)


def _default_regions() -> tuple[RegionCompartments, ...]:
    return (
        RegionCompartments("north", 49_990.0, 0.0, 10.0, 0.0),
        RegionCompartments("central", 80_000.0, 0.0, 0.0, 0.0),
        RegionCompartments("south", 30_000.0, 0.0, 0.0, 0.0),
    )


def _default_mobility() -> tuple[tuple[float, ...], ...]:
    return ((0.0, 0.02, 0.01), (0.02, 0.0, 0.02), (0.01, 0.02, 0.0))


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 1
    mode: Literal["dlt", "conventional"] = "dlt"
    n_endorsers: int = 1
    n_peers: int = 4
    n_devices: int = 1000
    regions: tuple[RegionCompartments, ...] = field(default_factory=_default_regions)
    mobility: tuple[tuple[float, ...], ...] = field(default_factory=_default_mobility)
    epidemic: EpidemicParams = field(default_factory=EpidemicParams)
    symptoms: SymptomModel = field(default_factory=SymptomModel)
    latency: LatencyModel = field(default_factory=LatencyModel)
    message_period_s: float = 60.0
    n_messages: int = 1000
    aggregation_window_s: float = 600.0
    noise_scale: float = 0.0
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    cut_policy: CutPolicy = field(default_factory=CutPolicy)
    # optional (t_s, prevalence) steps overriding epidemic prevalence
    prevalence_schedule: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        validate(self)

    @property
    def region_ids(self) -> list[str]:
        return [r.region_id for r in self.regions]

    @property
    def ticks_per_window(self) -> int:
        return int(round(self.aggregation_window_s / self.message_period_s))

    def initial_state(self) -> MetapopulationState:
        return MetapopulationState.create(self.regions, self.mobility)

    def federation_tree(self) -> FederationTree:
        groups = self.detector.regional_groups
        if not groups:
            return FederationTree.single_regional(self.region_ids)
        return FederationTree.build({k: list(v) for k, v in groups.items()})

    def with_(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def validate(cfg: ScenarioConfig) -> None:
    if cfg.mode not in ("dlt", "conventional"):
        raise ConfigError("mode", f"must be 'dlt' or 'conventional', got {cfg.mode!r}")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed", "must be a 64-bit unsigned integer")
    if cfg.n_endorsers < 1:
        raise ConfigError("n_endorsers", "must be >= 1")
    if cfg.n_peers < cfg.n_endorsers:
        raise ConfigError("n_peers", "must be >= n_endorsers")
    if cfg.n_devices < 0:
        raise ConfigError("n_devices", "must be >= 0")
    if not cfg.regions:
        raise ConfigError("regions", "at least one region is required")
    ids = cfg.region_ids
    if len(set(ids)) != len(ids):
        raise ConfigError("regions", "region ids must be unique")
    for i, r in enumerate(cfg.regions):
        if r.N <= 0:
            raise ConfigError(f"regions.{i}", "population must be > 0")
    try:
        state = cfg.initial_state()
    except ValueError as exc:
        raise ConfigError("mobility", str(exc)) from None
    for i, row in enumerate(state.mobility):
        if cfg.epidemic.dt * sum(row) > 1:
            raise ConfigError(f"mobility.{i}", "row sum must be <= 1/dt")
    if cfg.message_period_s <= 0:
        raise ConfigError("message_period_s", "must be > 0")
    if cfg.n_messages < 1:
        raise ConfigError("n_messages", "must be >= 1")
    ratio = cfg.aggregation_window_s / cfg.message_period_s
    if cfg.aggregation_window_s <= 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ConfigError(
            "aggregation_window_s", "must be a positive multiple of message_period_s"
        )
    if cfg.noise_scale < 0:
        raise ConfigError("noise_scale", "must be >= 0")
    d = cfg.detector
    try:
        d.detector()
    except ValueError as exc:
        raise ConfigError("detector", str(exc)) from None
    if d.regional_k < 1 or d.global_k < 1:
        raise ConfigError("detector", "regional_k and global_k must be >= 1")
    if d.regional_groups:
        grouped = [r for rs in d.regional_groups.values() for r in rs]
        if sorted(grouped) != sorted(ids):
            raise ConfigError(
                "detector.regional_groups", "must cover every region exactly once"
            )
    try:
        cfg.federation_tree()
    except ValueError as exc:
        raise ConfigError("detector.regional_groups", str(exc)) from None
    prev_t = -float("inf")
    for i, step in enumerate(cfg.prevalence_schedule):
        if len(step) != 2:
            raise ConfigError(f"prevalence_schedule.{i}", "expected [t_s, prevalence]")
        t, p = step
        if t < prev_t or not 0 <= p <= 1:
            raise ConfigError(
                f"prevalence_schedule.{i}", "times must be sorted and prevalence in [0, 1]"
            )
        prev_t = t


# ------------------------------------------------------------------ loading


def _expect_mapping(data: Any, path: str) -> Mapping[str, Any]:
    if not isinstance(data, Mapping):
        raise ConfigError(path, "expected a mapping")
    return data


def _check_keys(data: Mapping[str, Any], allowed: set[str], path: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(_join(path, str(key)), "unknown key")


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _number(value: Any, path: str, kind: type = float) -> Any:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(value)
    return float(value)


def _flat(cls: type, data: Any, path: str, ctor=None):
    """Build a dataclass whose fields are all plain numbers/bools."""
    data = _expect_mapping(data, path)
    flds = {f.name: f for f in dataclasses.fields(cls)}
    _check_keys(data, set(flds), path)
    kwargs = {}
    for key, value in data.items():
        ftype = str(flds[key].type)
        sub = _join(path, key)
        if ftype == "bool":
            if not isinstance(value, bool):
                raise ConfigError(sub, "expected true/false")
            kwargs[key] = value
        elif ftype == "int":
            kwargs[key] = _number(value, sub, int)
        else:
            kwargs[key] = _number(value, sub)
    try:
        return (ctor or cls)(**kwargs)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


_DIST_KEYS = {
    "constant": ("value",),
    "uniform": ("low", "high"),
    "shifted-exponential": ("offset", "mean"),
}


def _distribution(data: Any, path: str) -> DelayDistribution:
    if isinstance(data, (int, float)) and not isinstance(data, bool):
        return DelayDistribution.constant(_nonneg(data, path))
    data = _expect_mapping(data, path)
    kind = data.get("kind")
    if kind not in _DIST_KEYS:
        raise ConfigError(_join(path, "kind"), f"unknown delay kind {kind!r}")
    keys = _DIST_KEYS[kind]
    _check_keys(data, {"kind", *keys}, path)
    for k in keys:
        if k not in data:
            raise ConfigError(_join(path, k), "missing")
    values = [_number(data[k], _join(path, k)) for k in keys]
    try:
        return DelayDistribution(kind, *values)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _nonneg(value: Any, path: str) -> float:
    x = _number(value, path)
    if x < 0:
        raise ConfigError(path, "must be >= 0")
    return x


def _latency(data: Any, path: str) -> LatencyModel:
    data = _expect_mapping(data, path)
    names = {f.name for f in dataclasses.fields(LatencyModel)}
    _check_keys(data, names, path)
    return LatencyModel(**{k: _distribution(v, _join(path, k)) for k, v in data.items()})


def _regions(data: Any, path: str) -> tuple[RegionCompartments, ...]:
    if not isinstance(data, list):
        raise ConfigError(path, "expected a list of regions")
    out = []
    for i, item in enumerate(data):
        sub = _join(path, str(i))
        item = _expect_mapping(item, sub)
        _check_keys(item, {"region_id", "S", "E", "I", "R"}, sub)
        if "region_id" not in item:
            raise ConfigError(_join(sub, "region_id"), "missing")
        values = {c: _nonneg(item.get(c, 0.0), _join(sub, c)) for c in "SEIR"}
        out.append(RegionCompartments(str(item["region_id"]), **values))
    return tuple(out)


def _matrix(data: Any, path: str) -> tuple[tuple[float, ...], ...]:
    if not isinstance(data, list) or not all(isinstance(r, list) for r in data):
        raise ConfigError(path, "expected a list of rows")
    return tuple(
        tuple(_nonneg(x, f"{path}.{i}.{j}") for j, x in enumerate(row))
        for i, row in enumerate(data)
    )


def _detector(data: Any, path: str) -> DetectorSettings:
    data = _expect_mapping(data, path)
    groups_raw = data.get("regional_groups", {})
    rest = {k: v for k, v in data.items() if k != "regional_groups"}
    base = _flat(
        DetectorSettings, rest, path, ctor=lambda **kw: DetectorSettings(**kw)
    )
    groups_raw = _expect_mapping(groups_raw, _join(path, "regional_groups"))
    groups = {}
    for node_id, regions in groups_raw.items():
        if not isinstance(regions, list):
            raise ConfigError(_join(path, f"regional_groups.{node_id}"), "expected a list")
        groups[str(node_id)] = tuple(str(r) for r in regions)
    return dataclasses.replace(base, regional_groups=groups)


def _schedule(data: Any, path: str) -> tuple[tuple[float, float], ...]:
    if not isinstance(data, list):
        raise ConfigError(path, "expected a list of [t_s, prevalence]")
    out = []
    for i, step in enumerate(data):
        sub = _join(path, str(i))
        if not isinstance(step, list) or len(step) != 2:
            raise ConfigError(sub, "expected [t_s, prevalence]")
        out.append((_number(step[0], sub), _number(step[1], sub)))
    return tuple(out)


_SCALARS: dict[str, type] = {
    "seed": int,
    "n_endorsers": int,
    "n_peers": int,
    "n_devices": int,
    "message_period_s": float,
    "n_messages": int,
    "aggregation_window_s": float,
    "noise_scale": float,
}


def config_from_dict(data: Any, overrides: Optional[Mapping[str, Any]] = None) -> ScenarioConfig:
    data = dict(_expect_mapping(data or {}, ""))
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    allowed = {f.name for f in dataclasses.fields(ScenarioConfig)}
    _check_keys(data, allowed, "")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SCALARS:
            kwargs[key] = _number(value, key, _SCALARS[key])
        elif key == "mode":
            kwargs[key] = value
        elif key == "regions":
            kwargs[key] = _regions(value, key)
        elif key == "mobility":
            kwargs[key] = _matrix(value, key)
        elif key == "epidemic":
            kwargs[key] = _flat(EpidemicParams, value, key)
        elif key == "symptoms":
            kwargs[key] = _flat(SymptomModel, value, key)
        elif key == "latency":
            kwargs[key] = _latency(value, key)
        elif key == "detector":
            kwargs[key] = _detector(value, key)
        elif key == "cut_policy":
            kwargs[key] = _flat(CutPolicy, value, key)
        elif key == "prevalence_schedule":
            kwargs[key] = _schedule(value, key)
    if "regions" in kwargs and "mobility" not in kwargs:
        n = len(kwargs["regions"])
        kwargs["mobility"] = tuple(tuple(0.0 for _ in range(n)) for _ in range(n))
    try:
        return ScenarioConfig(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("", str(exc)) from None


def load_config(path: str | Path, overrides: Optional[Mapping[str, Any]] = None) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read scenario file: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML: {exc}") from None
    return config_from_dict(data, overrides)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    """Inverse of :func:`config_from_dict` (round-trips)."""
    d = cfg.detector
    return {
        "seed": cfg.seed,
        "mode": cfg.mode,
        "n_endorsers": cfg.n_endorsers,
        "n_peers": cfg.n_peers,
        "n_devices": cfg.n_devices,
        "regions": [dataclasses.asdict(r) for r in cfg.regions],
        "mobility": [list(row) for row in cfg.mobility],
        "epidemic": dataclasses.asdict(cfg.epidemic),
        "symptoms": dataclasses.asdict(cfg.symptoms),
        "latency": cfg.latency.to_dict(),
        "message_period_s": cfg.message_period_s,
        "n_messages": cfg.n_messages,
        "aggregation_window_s": cfg.aggregation_window_s,
        "noise_scale": cfg.noise_scale,
        "detector": {
            "watch_mult": d.watch_mult,
            "alert_mult": d.alert_mult,
            "min_reports": d.min_reports,
            "regional_k": d.regional_k,
            "global_k": d.global_k,
            "regional_groups": {k: list(v) for k, v in d.regional_groups.items()},
        },
        "cut_policy": dataclasses.asdict(cfg.cut_policy),
        "prevalence_schedule": [list(s) for s in cfg.prevalence_schedule],
    }
