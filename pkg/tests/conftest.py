import numpy as np
import pytest

from fedwarn import ledger
from fedwarn.ledger import Ledger, TransactionProposal


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def peers():
    return [ledger.generate_keypair(100 + i, peer_id=f"p{i + 1}") for i in range(4)]


def make_ledger(peers, k=1):
    return Ledger.create({p.peer_id: p.public_key for p in peers}, k)


def endorsed(proposal, signers, lg):
    return (proposal, tuple(ledger.endorse(proposal, p, lg) for p in signers))


def build_chain(peers, n_blocks, k=1):
    """Ledger with ``n_blocks`` committed single-transaction blocks."""
    lg = make_ledger(peers, k)
    for i in range(n_blocks):
        prop = TransactionProposal.create(f"dev{i % 7}", f"payload-{i}".encode(), float(i))
        entry = endorsed(prop, peers[:k], lg)
        block = ledger.cut_block([entry], lg.tip, float(i) + 0.5)
        ledger.validate_and_commit(block, lg)
    return lg
