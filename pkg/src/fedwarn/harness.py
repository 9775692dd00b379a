"""Discrete-event simulation of the monitoring pipeline.

Each region has one NB-IoT reporting device.  Every ``message_period_s`` it
sends the privacy-noised aggregate of the patient readings collected since
its previous transmission.  Patient devices are staggered so that each one
reports exactly once per aggregation window.

In ``dlt`` mode a message is endorsed by ``n_endorsers`` peers one after
another over the device's half-duplex radio, sent to the orderer, cut into
a block, validated and committed; the device then gets a confirmation.  In
``conventional`` mode the message goes to the edge data centre which stores
it and acknowledges.

When every message of a window has been committed (or stored), the window's
aggregates are merged and passed to the anomaly detector; warnings feed the
federation hierarchy.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fedwarn import epidemic, ledger, netmodel, telemetry
from fedwarn.config import ConfigError, ScenarioConfig
from fedwarn.des import EventKind, EventQueue, derive_int, derive_stream
from fedwarn.epidemic import RegionCompartments
from fedwarn.federation import (
    FederationTree,
    Status,
    WarningEvent,
    credit_incentive,
    detect_anomaly,
    escalate,
)
from fedwarn.ledger import CutPolicy, EndorsedTx, Ledger, TransactionProposal
from fedwarn.telemetry import RegionAggregate

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400.0


class InvariantViolation(RuntimeError):
    """End-of-run audit failed."""


def fmt(x: float) -> str:
    return f"{x:.9g}"


@dataclass(frozen=True)
class TransactionTrace:
    tx_id: str
    device_pseudonym: str
    n_endorsers: int
    t_send: float
    t_commit_confirm: float

    @property
    def e2e_s(self) -> float:
        return self.t_commit_confirm - self.t_send


@dataclass
class _InFlight:
    proposal: TransactionProposal
    region_id: str
    window: int
    t_send: float
    endorsers: list[str] = field(default_factory=list)
    endorsements: list[ledger.Endorsement] = field(default_factory=list)


@dataclass
class _Window:
    expected: int
    sent: list[str] = field(default_factory=list)
    settled: int = 0
    closed: bool = False
    done: bool = False
    accepted: dict[str, RegionAggregate] = field(default_factory=dict)


@dataclass
class RunOutputs:
    config: ScenarioConfig
    traces: list[TransactionTrace]
    ledger: Optional[Ledger]
    epidemic_rows: list[tuple[float, RegionCompartments]]
    aggregates: list[RegionAggregate]
    warnings: list[WarningEvent]
    credits: dict[str, int]
    status_rows: list[tuple[float, str, str, Status]]
    files: dict[str, str] = field(default_factory=dict)

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, text in self.files.items():
            path = out / name
            path.write_text(text)
            paths.append(path)
        return paths


def _csv(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


class Simulation:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.q = EventQueue()
        seed = cfg.seed
        self.rng_delay = derive_stream(seed, "delays")
        self.rng_endorsers = derive_stream(seed, "endorsers")
        self.rng_symptoms = derive_stream(seed, "symptoms")
        self.rng_privacy = derive_stream(seed, "privacy")
        self.secret = derive_int(seed, "pseudonym-secret").to_bytes(8, "big")

        self.dlt = cfg.mode == "dlt"
        self.peers = [
            ledger.generate_keypair(derive_int(seed, f"peer/{i}"), peer_id=f"peer{i}")
            for i in range(cfg.n_peers)
        ]
        self.peer_by_id = {p.peer_id: p for p in self.peers}
        self.ledger: Optional[Ledger] = None
        if self.dlt:
            registry = {p.peer_id: p.public_key for p in self.peers}
            self.ledger = Ledger.create(registry, cfg.n_endorsers)
        self.cut_policy: CutPolicy = cfg.cut_policy
        self.pending: list[EndorsedTx] = []
        self.orderer_tip = self.ledger.tip if self.ledger else None
        self.last_commit_at = 0.0
        self.cut_timer_at: Optional[float] = None

        self.epi = cfg.initial_state()
        self.epi_steps = 0
        self.epi_rows: list[tuple[float, RegionCompartments]] = [
            (0.0, r) for r in self.epi.regions
        ]
        self.tpw = cfg.ticks_per_window
        self.horizon = cfg.n_messages * cfg.message_period_s
        self.n_windows = math.ceil(cfg.n_messages / self.tpw)
        self.devices = {
            r: [f"{r}-dev{j:05d}" for j in range(cfg.n_devices)] for r in cfg.region_ids
        }

        self.inflight: dict[str, _InFlight] = {}
        self._truth: dict[str, RegionAggregate] = {}
        self.windows: dict[tuple[str, int], _Window] = {}
        self.traces: list[TransactionTrace] = []
        self.aggregates: list[RegionAggregate] = []
        self.warnings: list[WarningEvent] = []
        self.credits: dict[str, int] = {}
        self.transmitted = 0

        self.tree: FederationTree = cfg.federation_tree()
        self.baseline = cfg.symptoms.healthy_fever_rate()
        self.latest_warning: dict[str, Optional[WarningEvent]] = {}
        self.status = {n: Status.NORMAL for n in self.tree.nodes}
        self.status_rows = [
            (0.0, n.node_id, n.level, Status.NORMAL) for n in self.tree.nodes.values()
        ]

    # ------------------------------------------------------------ helpers

    def _delay(self, dist: netmodel.DelayDistribution) -> float:
        return netmodel.sample(dist, self.rng_delay)

    def _window(self, region_id: str, w: int) -> _Window:
        key = (region_id, w)
        if key not in self.windows:
            expected = min(self.tpw, self.cfg.n_messages - w * self.tpw)
            self.windows[key] = _Window(expected)
        return self.windows[key]

    def _region_state(self, region_id: str, t: float) -> RegionCompartments:
        schedule = self.cfg.prevalence_schedule
        current = None
        for t_step, p in schedule:
            if t_step <= t:
                current = p
        if current is None:
            return self.epi.region(region_id)
        return RegionCompartments(region_id, 1.0 - current, 0.0, current, 0.0)

    # ------------------------------------------------------------ handlers

    def _on_transmit(self, now: float, payload) -> None:
        cfg = self.cfg
        region_id, k = payload
        if k < cfg.n_messages:
            self.q.schedule(
                (k + 1) * cfg.message_period_s, EventKind.DEVICE_TRANSMIT, (region_id, k + 1)
            )
        w, slot = divmod(k - 1, self.tpw)
        devices = [
            d for j, d in enumerate(self.devices[region_id]) if j % self.tpw == slot
        ]
        readings = telemetry.generate_readings(
            self._region_state(region_id, now),
            devices,
            cfg.symptoms,
            epoch=w,
            secret=self.secret,
            rng=self.rng_symptoms,
            t=now,
        )
        agg = telemetry.aggregate_region(
            readings,
            cfg.symptoms,
            (now - cfg.message_period_s, now),
            cfg.noise_scale,
            self.rng_privacy,
            region_id=region_id,
        )
        pseudonym = telemetry.pseudonymize(f"ue-{region_id}", w, self.secret)
        proposal = TransactionProposal.create(pseudonym, agg.to_payload(), now)
        self._window(region_id, w).sent.append(proposal.tx_id)
        self._truth[proposal.tx_id] = agg
        fl = _InFlight(proposal, region_id, w, now)
        self.inflight[proposal.tx_id] = fl
        self.transmitted += 1
        if self.dlt:
            chosen = ledger.select_endorsers(
                [p.peer_id for p in self.peers], cfg.n_endorsers, self.rng_endorsers
            )
            fl.endorsers = sorted(chosen)
            self.q.schedule(
                now + self._delay(cfg.latency.uplink), EventKind.ENDORSE_ARRIVE, proposal.tx_id
            )
        else:
            self.q.schedule(
                now + self._delay(cfg.latency.uplink), EventKind.EDGE_ARRIVE, proposal.tx_id
            )

    def _on_endorse_arrive(self, now: float, tx_id: str) -> None:
        fl = self.inflight[tx_id]
        peer = self.peer_by_id[fl.endorsers[len(fl.endorsements)]]
        endorsement = ledger.endorse(fl.proposal, peer, self.ledger)
        lat = self.cfg.latency
        done = now + self._delay(lat.endorse_proc) + self._delay(lat.downlink)
        self.q.schedule(done, EventKind.ENDORSE_RETURN, (tx_id, endorsement))

    def _on_endorse_return(self, now: float, payload) -> None:
        tx_id, endorsement = payload
        fl = self.inflight[tx_id]
        fl.endorsements.append(endorsement)
        up = now + self._delay(self.cfg.latency.uplink)
        if len(fl.endorsements) < len(fl.endorsers):
            self.q.schedule(up, EventKind.ENDORSE_ARRIVE, tx_id)
        else:
            self.q.schedule(up, EventKind.ORDERER_ARRIVE, tx_id)

    def _on_orderer_arrive(self, now: float, tx_id: str) -> None:
        ready = now + self._delay(self.cfg.latency.order_proc)
        self.q.schedule(ready, EventKind.BLOCK_CUT, tx_id)

    def _on_block_cut(self, now: float, tx_id: Optional[str]) -> None:
        if tx_id is None:
            self.cut_timer_at = None
        else:
            fl = self.inflight[tx_id]
            self.pending.append((fl.proposal, tuple(fl.endorsements)))
        while True:
            block = ledger.cut_block(self.pending, self.orderer_tip, now, self.cut_policy)
            if block is None:
                break
            included = set(block.tx_ids)
            self.pending = [e for e in self.pending if e[0].tx_id not in included]
            self.orderer_tip = block
            # peers validate in parallel but commit strictly in chain order
            done = max(now + self._delay(self.cfg.latency.validate_proc), self.last_commit_at)
            self.last_commit_at = done
            self.q.schedule(done, EventKind.VALIDATE_DONE, block)
        if self.pending and self.cut_timer_at is None:
            oldest = min(p.created_at for p, _ in self.pending)
            self.cut_timer_at = max(now, oldest + self.cut_policy.max_wait_s)
            self.q.schedule(self.cut_timer_at, EventKind.BLOCK_CUT, None)

    def _on_validate_done(self, now: float, block: ledger.Block) -> None:
        result = ledger.validate_and_commit(block, self.ledger)
        self.credits = credit_incentive(self.credits, result, block)
        accepted = set(result.accepted_tx_ids)
        for proposal, _ in block.txs:
            fl = self.inflight[proposal.tx_id]
            if proposal.tx_id in accepted:
                agg = RegionAggregate.from_payload(proposal.payload)
                self._settle(now, fl, agg)
            else:
                self._settle(now, fl, None)
            down = now + self._delay(self.cfg.latency.downlink)
            self.q.schedule(down, EventKind.CONFIRM_ARRIVE, proposal.tx_id)

    def _on_edge_arrive(self, now: float, tx_id: str) -> None:
        fl = self.inflight[tx_id]
        lat = self.cfg.latency
        stored = now + self._delay(lat.edge_proc)
        self._settle(now, fl, RegionAggregate.from_payload(fl.proposal.payload))
        self.q.schedule(stored + self._delay(lat.downlink), EventKind.CONFIRM_ARRIVE, tx_id)

    def _on_confirm(self, now: float, tx_id: str) -> None:
        fl = self.inflight.pop(tx_id)
        n = self.cfg.n_endorsers if self.dlt else 0
        self.traces.append(
            TransactionTrace(tx_id, fl.proposal.device_pseudonym, n, fl.t_send, now)
        )

    def _on_window_close(self, now: float, w: int) -> None:
        if w + 1 < self.n_windows:
            t_next = min((w + 2) * self.cfg.aggregation_window_s, self.horizon)
            self.q.schedule(t_next, EventKind.AGGREGATION_WINDOW_CLOSE, w + 1)
        for region_id in self.cfg.region_ids:
            win = self._window(region_id, w)
            win.closed = True
            self._maybe_detect(now, region_id, w)

    def _on_epidemic_step(self, now: float, _payload) -> None:
        self.epi = epidemic.step(self.epi, self.cfg.epidemic)
        self.epi_steps += 1
        t_days = self.epi_steps * self.cfg.epidemic.dt
        self.epi_rows.extend((t_days, r) for r in self.epi.regions)
        t_next = (self.epi_steps + 1) * self.cfg.epidemic.dt * SECONDS_PER_DAY
        if t_next <= self.horizon:
            self.q.schedule(t_next, EventKind.EPIDEMIC_STEP)

    # ------------------------------------------------------------ detection

    def _settle(self, now: float, fl: _InFlight, agg: Optional[RegionAggregate]) -> None:
        win = self._window(fl.region_id, fl.window)
        win.settled += 1
        if agg is not None:
            win.accepted[fl.proposal.tx_id] = agg
        self._maybe_detect(now, fl.region_id, fl.window)

    def _maybe_detect(self, now: float, region_id: str, w: int) -> None:
        win = self._window(region_id, w)
        if win.done or not win.closed or win.settled < win.expected:
            return
        win.done = True
        source = [tx for tx in win.sent if tx in win.accepted]
        if not source:
            return
        merged = telemetry.merge_aggregates([win.accepted[tx] for tx in source], region_id)
        truth = sum(self._truth[tx].n_fever_true for tx in source)
        self.aggregates.append(
            RegionAggregate(
                merged.region_id, merged.window_start, merged.window_end,
                merged.n_reports, merged.n_fever, merged.fever_fraction,
                merged.empty, truth,
            )
        )
        warning = detect_anomaly(
            merged, self.baseline, self.cfg.detector.detector(), now, source
        )
        if warning is not None:
            self.warnings.append(warning)
        self.latest_warning[region_id] = warning
        self._update_status(now)

    def _update_status(self, now: float) -> None:
        d = self.cfg.detector
        active = [w for w in self.latest_warning.values() if w is not None]
        new = escalate(active, self.tree, d.regional_k, d.global_k)
        for node_id, node in self.tree.nodes.items():
            if new[node_id] != self.status[node_id]:
                self.status_rows.append((now, node_id, node.level, new[node_id]))
        self.status = new

    # ------------------------------------------------------------ run

    _handlers = {
        EventKind.DEVICE_TRANSMIT: _on_transmit,
        EventKind.ENDORSE_ARRIVE: _on_endorse_arrive,
        EventKind.ENDORSE_RETURN: _on_endorse_return,
        EventKind.ORDERER_ARRIVE: _on_orderer_arrive,
        EventKind.BLOCK_CUT: _on_block_cut,
        EventKind.VALIDATE_DONE: _on_validate_done,
        EventKind.CONFIRM_ARRIVE: _on_confirm,
        EventKind.EDGE_ARRIVE: _on_edge_arrive,
        EventKind.AGGREGATION_WINDOW_CLOSE: _on_window_close,
        EventKind.EPIDEMIC_STEP: _on_epidemic_step,
    }

    def run(self) -> RunOutputs:
        cfg = self.cfg
        step_s = cfg.epidemic.dt * SECONDS_PER_DAY
        if step_s <= self.horizon:
            self.q.schedule(step_s, EventKind.EPIDEMIC_STEP)
        self.q.schedule(
            min(cfg.aggregation_window_s, self.horizon), EventKind.AGGREGATION_WINDOW_CLOSE, 0
        )
        for region_id in cfg.region_ids:
            self.q.schedule(cfg.message_period_s, EventKind.DEVICE_TRANSMIT, (region_id, 1))

        last_t = 0.0
        while self.q:
            event = self.q.next()
            if event.t < last_t:
                raise InvariantViolation("clock went backwards")
            last_t = event.t
            self._handlers[event.kind](self, event.t, event.payload)

        self._audit()
        outputs = RunOutputs(
            cfg,
            self.traces,
            self.ledger,
            self.epi_rows,
            self.aggregates,
            self.warnings,
            self.credits,
            self.status_rows,
        )
        outputs.files = render_files(outputs)
        return outputs

    def _audit(self) -> None:
        if len(self.traces) != self.transmitted or self.inflight or self.pending:
            raise InvariantViolation("not every transmitted message completed")
        if any(not w.done for w in self.windows.values()):
            raise InvariantViolation("aggregation window left open")
        if not self.dlt:
            return
        lg = self.ledger
        if not ledger.verify_chain(lg):
            raise InvariantViolation("verify_chain failed at end of run")
        entries = [tx for b in lg.chain for tx in b.tx_ids]
        if len(entries) != self.transmitted or len(set(entries)) != len(entries):
            raise InvariantViolation("chain entries do not match transmitted messages")
        owners: dict[str, int] = {}
        for block, flags in zip(lg.chain, lg.validity):
            for (p, _), ok in zip(block.txs, flags):
                if ok:
                    owners[p.device_pseudonym] = owners.get(p.device_pseudonym, 0) + 1
        if owners != self.credits:
            raise InvariantViolation("incentive credits do not reconcile with commits")
        for w in self.warnings:
            if not set(w.source_tx_ids) <= lg.committed_ids:
                raise InvariantViolation("warning cites a transaction that is not on chain")


def run_scenario(cfg: ScenarioConfig) -> RunOutputs:
    """Run one scenario to completion and render every artifact in memory."""
    return Simulation(cfg).run()


def render_files(out: RunOutputs) -> dict[str, str]:
    files = {
        "traces.csv": _csv(
            ["tx_id", "device_pseudonym", "n_endorsers", "t_send", "t_commit_confirm", "e2e_s"],
            [
                (t.tx_id, t.device_pseudonym, t.n_endorsers, t.t_send, t.t_commit_confirm, t.e2e_s)
                for t in out.traces
            ],
        ),
        "epidemic.csv": _csv(
            ["t_days", "region_id", "S", "E", "I", "R"],
            [(float(t), r.region_id, r.S, r.E, r.I, r.R) for t, r in out.epidemic_rows],
        ),
        "aggregates.csv": _csv(
            [
                "region_id", "window_start_s", "window_end_s", "n_reports",
                "n_fever_reported", "n_fever_true", "fever_fraction",
            ],
            [
                (a.region_id, a.window_start, a.window_end, a.n_reports,
                 a.n_fever, a.n_fever_true, a.fever_fraction)
                for a in out.aggregates
            ],
        ),
        "warnings.csv": _csv(
            ["t_raised_s", "region_id", "severity", "metric", "baseline", "source_tx_ids"],
            [
                (w.t_raised, w.region_id, w.severity, w.metric, w.baseline,
                 ";".join(w.source_tx_ids))
                for w in out.warnings
            ],
        ),
        "credits.csv": _csv(
            ["device_pseudonym", "credits"], sorted(out.credits.items())
        ),
        "status.csv": _csv(
            ["t_s", "node_id", "level", "status"],
            [(float(t), n, lvl, str(s)) for t, n, lvl, s in out.status_rows],
        ),
    }
    if out.ledger is not None:
        files["chain.ndjson"] = ledger.export_chain(out.ledger)
    return files


# ------------------------------------------------------------------ sweep


@dataclass(frozen=True)
class SweepRow:
    mode: str
    n_endorsers: int
    n_tx: int
    mean_e2e_s: float
    sd_e2e_s: float
    expected_e2e_s: float

    @property
    def se_e2e_s(self) -> float:
        return self.sd_e2e_s / math.sqrt(self.n_tx) if self.n_tx else float("nan")


@dataclass
class SweepTable:
    rows: list[SweepRow]
    conventional: SweepRow
    slope: float
    intercept: float

    def to_csv(self) -> str:
        header = [
            "mode", "n_endorsers", "n_tx", "mean_e2e_s", "sd_e2e_s", "se_e2e_s",
            "expected_e2e_s", "fit_slope_s", "fit_intercept_s",
        ]
        body = [
            (r.mode, r.n_endorsers, r.n_tx, r.mean_e2e_s, r.sd_e2e_s, r.se_e2e_s,
             r.expected_e2e_s, self.slope, self.intercept)
            for r in [self.conventional, *self.rows]
        ]
        return _csv(header, body)


def _summarize(cfg: ScenarioConfig, traces: Sequence[TransactionTrace]) -> SweepRow:
    e2e = np.array([t.e2e_s for t in traces])
    if cfg.mode == "dlt":
        expected = netmodel.expected_dlt_e2e(cfg.latency, cfg.n_endorsers)
        n = cfg.n_endorsers
    else:
        expected = netmodel.expected_conventional_e2e(cfg.latency)
        n = 0
    sd = float(e2e.std(ddof=1)) if len(e2e) > 1 else 0.0
    return SweepRow(cfg.mode, n, len(e2e), float(e2e.mean()), sd, expected)


def fit_line(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Ordinary least squares; returns (slope, intercept)."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if len(x) == 1:
        return 0.0, float(y[0])
    xm, ym = x.mean(), y.mean()
    slope = float(((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum())
    return slope, float(ym - slope * xm)


def latency_sweep(cfg: ScenarioConfig, endorser_range: Sequence[int]) -> SweepTable:
    """Run the DLT pipeline once per endorser count plus a conventional baseline.

    All runs share the base seed, so device readings and the epidemic are
    identical across points and only the endorsement path differs.
    """
    if not endorser_range:
        raise ConfigError("endorsers", "endorser range must be nonempty")
    if any(n < 1 for n in endorser_range):
        raise ConfigError("endorsers", "every endorser count must be >= 1")
    rows = []
    for n in endorser_range:
        point = cfg.with_(mode="dlt", n_endorsers=n, n_peers=max(cfg.n_peers, n))
        log.info("sweep point n_endorsers=%d", n)
        rows.append(_summarize(point, run_scenario(point).traces))
    base = cfg.with_(mode="conventional")
    conventional = _summarize(base, run_scenario(base).traces)
    slope, intercept = fit_line([r.n_endorsers for r in rows], [r.mean_e2e_s for r in rows])
    return SweepTable(rows, conventional, slope, intercept)
