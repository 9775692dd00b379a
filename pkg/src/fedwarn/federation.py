"""Edge -> regional -> global warning hierarchy and incentive credits."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Literal, Mapping, Optional, Sequence

from fedwarn.ledger import Block, CommitResult
from fedwarn.telemetry import RegionAggregate

Level = Literal["edge", "regional", "global"]
Severity = Literal["watch", "alert"]


class UnknownRegion(KeyError):
    pass


class Status(IntEnum):
    NORMAL = 0
    ELEVATED = 1
    EMERGENCY = 2

    def __str__(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class DetectorConfig:
    watch_mult: float = 5.0
    alert_mult: float = 20.0
    min_reports: int = 10

    def __post_init__(self):
        if not self.watch_mult < self.alert_mult:
            raise ValueError("watch_mult must be < alert_mult")
        if self.min_reports < 1:
            raise ValueError("min_reports must be >= 1")


@dataclass(frozen=True)
class WarningEvent:
    region_id: str
    t_raised: float
    metric: float
    baseline: float
    severity: Severity
    source_tx_ids: tuple[str, ...] = ()


def detect_anomaly(
    agg: RegionAggregate,
    baseline: float,
    cfg: DetectorConfig = DetectorConfig(),
    t_raised: float = 0.0,
    source_tx_ids: Sequence[str] = (),
) -> Optional[WarningEvent]:
    """Multiplicative threshold rule on the fever fraction."""
    if agg.n_reports < cfg.min_reports:
        return None
    metric = agg.fever_fraction
    if metric >= baseline * cfg.alert_mult:
        severity: Severity = "alert"
    elif metric >= baseline * cfg.watch_mult:
        severity = "watch"
    else:
        return None
    return WarningEvent(
        agg.region_id, float(t_raised), metric, baseline, severity, tuple(source_tx_ids)
    )


@dataclass(frozen=True)
class FederationNode:
    node_id: str
    level: Level
    children: tuple[str, ...] = ()
    region_ids: tuple[str, ...] = ()


@dataclass
class FederationTree:
    nodes: dict[str, FederationNode]
    root: str
    edge_of_region: dict[str, str] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        regional_groups: Mapping[str, Sequence[str]],
        global_id: str = "global",
    ) -> "FederationTree":
        """One edge node per region, grouped under regional nodes.

        ``regional_groups`` maps regional node id -> region ids.
        """
        nodes: dict[str, FederationNode] = {}
        edge_of: dict[str, str] = {}
        for regional_id, regions in regional_groups.items():
            edges = []
            for region in regions:
                if region in edge_of:
                    raise ValueError(f"region {region} belongs to two regional nodes")
                edge_id = f"edge-{region}"
                nodes[edge_id] = FederationNode(edge_id, "edge", (), (region,))
                edge_of[region] = edge_id
                edges.append(edge_id)
            nodes[regional_id] = FederationNode(
                regional_id, "regional", tuple(edges), tuple(regions)
            )
        nodes[global_id] = FederationNode(
            global_id, "global", tuple(regional_groups), tuple(edge_of)
        )
        if len(nodes) != 1 + len(regional_groups) + len(edge_of):
            raise ValueError("federation node ids collide")
        return cls(nodes, global_id, edge_of)

    @classmethod
    def single_regional(cls, region_ids: Sequence[str]) -> "FederationTree":
        return cls.build({"regional-0": list(region_ids)})

    def parent_of(self, node_id: str) -> Optional[str]:
        for node in self.nodes.values():
            if node_id in node.children:
                return node.node_id
        return None

    def by_level(self, level: Level) -> list[FederationNode]:
        return [n for n in self.nodes.values() if n.level == level]


def _quorum_status(children: Iterable[Status], k: int) -> Status:
    children = list(children)
    if sum(s >= Status.EMERGENCY for s in children) >= k:
        return Status.EMERGENCY
    if sum(s >= Status.ELEVATED for s in children) >= k:
        return Status.ELEVATED
    return Status.NORMAL


def escalate(
    warnings: Iterable[WarningEvent],
    tree: FederationTree,
    regional_k: int = 2,
    global_k: int = 1,
) -> dict[str, Status]:
    status = {node_id: Status.NORMAL for node_id in tree.nodes}
    for w in warnings:
        edge = tree.edge_of_region.get(w.region_id)
        if edge is None:
            raise UnknownRegion(w.region_id)
        level = Status.EMERGENCY if w.severity == "alert" else Status.ELEVATED
        status[edge] = max(status[edge], level)
    for node in tree.by_level("regional"):
        status[node.node_id] = _quorum_status((status[c] for c in node.children), regional_k)
    root = tree.nodes[tree.root]
    status[root.node_id] = _quorum_status((status[c] for c in root.children), global_k)
    return status


def credit_incentive(
    accounts: Mapping[str, int], commit_result: CommitResult, block: Block
) -> dict[str, int]:
    """Return a new credit map with +1 per accepted transaction's device."""
    owner = {p.tx_id: p.device_pseudonym for p, _ in block.txs}
    out = dict(accounts)
    for tx_id in commit_result.accepted_tx_ids:
        pseudonym = owner[tx_id]
        out[pseudonym] = out.get(pseudonym, 0) + 1
    return out
