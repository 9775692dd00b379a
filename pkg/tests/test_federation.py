import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedwarn.federation import (
    DetectorConfig,
    FederationTree,
    Status,
    UnknownRegion,
    WarningEvent,
    credit_incentive,
    detect_anomaly,
    escalate,
)
from fedwarn.ledger import Block, CommitResult, TransactionProposal, ZERO_HASH
from fedwarn.telemetry import make_aggregate

CFG = DetectorConfig(watch_mult=5, alert_mult=20, min_reports=10)
BASE = 0.0013


def agg(fraction, n=1000, region="r1"):
    return make_aggregate(region, (0, 600), n, round(fraction * n))


def test_below_watch():
    assert detect_anomaly(agg(0.001), BASE, CFG) is None


def test_alert_threshold():
    # 0.0013 * 20 = 0.026
    w = detect_anomaly(agg(0.03), BASE, CFG, t_raised=5.0, source_tx_ids=["a", "b"])
    assert w.severity == "alert" and w.metric == 0.03 and w.baseline == BASE
    assert w.source_tx_ids == ("a", "b") and w.t_raised == 5.0
    assert w.metric > BASE * CFG.alert_mult


def test_watch_band():
    # 0.0013 * 5 = 0.0065 <= 0.01 < 0.026
    assert detect_anomaly(agg(0.01), BASE, CFG).severity == "watch"


def test_min_reports_suppresses():
    assert detect_anomaly(make_aggregate("r1", (0, 1), 3, 3), BASE, CFG) is None


def test_detector_config_guards():
    with pytest.raises(ValueError):
        DetectorConfig(watch_mult=5, alert_mult=5)
    with pytest.raises(ValueError):
        DetectorConfig(min_reports=0)


def binomial_tail(n, p, k_min):
    return sum(math.comb(n, k) * p**k * (1 - p) ** (n - k) for k in range(k_min, n + 1))


@pytest.mark.parametrize("n", [10, 20, 50])
def test_false_alert_rate_matches_binomial_tail(n):
    # healthy population only; each report is a fever with probability p
    p = 0.02
    cfg = DetectorConfig(watch_mult=2, alert_mult=5, min_reports=1)
    baseline = p
    k_min = math.ceil(baseline * cfg.alert_mult * n - 1e-12)
    oracle = binomial_tail(n, p, k_min)
    rng = np.random.default_rng(n)
    trials = 20_000
    fevers = rng.binomial(n, p, size=trials)
    alerts = sum(
        1
        for f in fevers
        if (w := detect_anomaly(make_aggregate("r", (0, 1), n, int(f)), baseline, cfg))
        and w.severity == "alert"
    )
    rate = alerts / trials
    assert abs(rate - oracle) <= 3 * math.sqrt(oracle * (1 - oracle) / trials) + 1e-12


# ----------------------------------------------------------------- hierarchy


@pytest.fixture
def tree():
    return FederationTree.build({"north": ["a", "b", "c"], "south": ["d", "e"]})


def warn(region, severity="alert"):
    return WarningEvent(region, 0.0, 0.5, BASE, severity)


def test_tree_structure(tree):
    assert tree.nodes["global"].children == ("north", "south")
    assert tree.nodes["north"].children == ("edge-a", "edge-b", "edge-c")
    assert tree.parent_of("edge-d") == "south"
    assert tree.parent_of("north") == "global"
    assert tree.parent_of("global") is None
    assert tree.edge_of_region["e"] == "edge-e"


def test_tree_rejects_region_in_two_groups():
    with pytest.raises(ValueError):
        FederationTree.build({"x": ["a"], "y": ["a"]})


def test_no_warnings_all_normal(tree):
    assert set(escalate([], tree).values()) == {Status.NORMAL}


def test_single_alert_stays_local(tree):
    s = escalate([warn("a")], tree, regional_k=2, global_k=1)
    assert s["edge-a"] == Status.EMERGENCY
    assert s["north"] == Status.NORMAL and s["global"] == Status.NORMAL


def test_quorum_propagates(tree):
    s = escalate([warn("a"), warn("b")], tree, regional_k=2, global_k=1)
    assert s["north"] == Status.EMERGENCY and s["global"] == Status.EMERGENCY
    assert s["south"] == Status.NORMAL


def test_mixed_severities_elevate(tree):
    s = escalate([warn("a"), warn("b", "watch")], tree, regional_k=2, global_k=1)
    assert s["edge-b"] == Status.ELEVATED
    assert s["north"] == Status.ELEVATED and s["global"] == Status.ELEVATED


def test_unknown_region(tree):
    with pytest.raises(UnknownRegion):
        escalate([warn("zz")], tree)


warnings_st = st.lists(
    st.tuples(st.sampled_from("abcde"), st.sampled_from(["watch", "alert"])), max_size=8
)


@given(ws=warnings_st, extra=st.tuples(st.sampled_from("abcde"), st.sampled_from(["watch", "alert"])),
       rk=st.integers(1, 3), gk=st.integers(1, 2))
def test_monotone_escalation(ws, extra, rk, gk):
    tree = FederationTree.build({"north": ["a", "b", "c"], "south": ["d", "e"]})
    before = escalate([warn(r, s) for r, s in ws], tree, rk, gk)
    after = escalate([warn(r, s) for r, s in [*ws, extra]], tree, rk, gk)
    assert all(after[n] >= before[n] for n in tree.nodes)


@given(ws=warnings_st)
def test_escalate_deterministic_under_permutation(ws):
    tree = FederationTree.build({"north": ["a", "b", "c"], "south": ["d", "e"]})
    events = [warn(r, s) for r, s in ws]
    assert escalate(events, tree) == escalate(list(reversed(events)), tree)


# ------------------------------------------------------------------ credits


def block_of(*pseudonyms):
    txs = [(TransactionProposal.create(p, b"x", float(i)), ()) for i, p in enumerate(pseudonyms)]
    return Block.build(1, ZERO_HASH, txs, 1.0)


def test_credit_accepted():
    block = block_of("P")
    out = credit_incentive({}, CommitResult((block.tx_ids[0],), ()), block)
    assert out == {"P": 1}


def test_no_credit_for_rejected():
    block = block_of("P")
    accounts = {"P": 3}
    out = credit_incentive(accounts, CommitResult((), (block.tx_ids[0],)), block)
    assert out == {"P": 3} and accounts == {"P": 3}


def test_credit_mixed_block():
    block = block_of("P", "Q", "P")
    ids = block.tx_ids
    out = credit_incentive({"Q": 1}, CommitResult((ids[0], ids[2]), (ids[1],)), block)
    assert out == {"P": 2, "Q": 1}
