"""Permissioned ledger with execute-order-validate transaction flow.

Transactions are endorsed (signed) by a group of peers without touching
state, ordered chronologically into hash-chained blocks, then re-validated
at commit time.  Transactions that fail validation stay in their block with
a rejected flag so the chain remains append-only.

Canonical serialization (all hashes and signatures are computed over it):

* every variable-length field is prefixed with its length as a 4-byte
  big-endian unsigned integer;
* integers are 8-byte big-endian unsigned;
* times are IEEE-754 64-bit floats, big-endian;
* text is UTF-8.

tx_id   = SHA-256(len‖pseudonym ‖ len‖payload ‖ created_at), hex encoded.
proposal bytes = len‖tx_id ‖ len‖pseudonym ‖ len‖payload ‖ created_at.
block_hash = SHA-256(height ‖ len‖prev_hash ‖ cut_at ‖ len‖meta ‖ n_txs ‖
             for each tx: proposal bytes ‖ n_endorsements ‖
             for each endorsement: len‖tx_id ‖ len‖peer_id ‖ len‖signature).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec

CURVE_NAME = "secp256r1"
HASH_NAME = "sha256"
ZERO_HASH = b"\x00" * 32

_CURVE = ec.SECP256R1()
_ECDSA = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)
# group order of secp256r1
_CURVE_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551


class LedgerError(Exception):
    pass


class PolicyError(LedgerError):
    pass


class DuplicateTransaction(LedgerError):
    pass


class MalformedProposal(LedgerError):
    pass


class ChainMismatch(LedgerError):
    pass


def _u32(n: int) -> bytes:
    return struct.pack(">I", n)


def _u64(n: int) -> bytes:
    return struct.pack(">Q", n)


def _f64(x: float) -> bytes:
    return struct.pack(">d", x)


def _field(data: bytes) -> bytes:
    return _u32(len(data)) + data


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# --------------------------------------------------------------------- keys


@dataclass(frozen=True)
class KeyPair:
    secret_key: bytes
    public_key: bytes
    peer_id: str

    def sign(self, message: bytes) -> bytes:
        return sign(message, self.secret_key)


@lru_cache(maxsize=256)
def _private_key(secret_key: bytes) -> ec.EllipticCurvePrivateKey:
    return ec.derive_private_key(int.from_bytes(secret_key, "big"), _CURVE)


@lru_cache(maxsize=256)
def _public_key(public_key: bytes) -> ec.EllipticCurvePublicKey:
    return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, public_key)


def generate_keypair(seed: int, peer_id: Optional[str] = None) -> KeyPair:
    """Derive a signing key pair deterministically from a 64-bit seed.

    The private scalar is SHA-256 of the seed mapped into [1, n-1].  When
    ``peer_id`` is omitted it is derived from the public key.
    """
    seed_bytes = _u64(seed & 0xFFFFFFFFFFFFFFFF)
    digest = sha256(b"fedwarn/keypair/" + seed_bytes)
    scalar = int.from_bytes(digest, "big") % (_CURVE_ORDER - 1) + 1
    secret = scalar.to_bytes(32, "big")
    public = (
        _private_key(secret)
        .public_key()
        .public_bytes(
            encoding=serialization.Encoding.X962,
            format=serialization.PublicFormat.CompressedPoint,
        )
    )
    if peer_id is None:
        peer_id = "peer-" + sha256(public).hex()[:12]
    return KeyPair(secret_key=secret, public_key=public, peer_id=peer_id)


def sign(message: bytes, secret_key: bytes) -> bytes:
    return _private_key(secret_key).sign(message, _ECDSA)


def verify(signature: bytes, message: bytes, public_key: bytes) -> bool:
    try:
        _public_key(public_key).verify(signature, message, _ECDSA)
    except (InvalidSignature, ValueError):
        return False
    return True


# ------------------------------------------------------------- transactions


def compute_tx_id(device_pseudonym: str, payload: bytes, created_at: float) -> str:
    data = _field(device_pseudonym.encode()) + _field(payload) + _f64(created_at)
    return sha256(data).hex()


@dataclass(frozen=True)
class TransactionProposal:
    tx_id: str
    device_pseudonym: str
    payload: bytes
    created_at: float

    @classmethod
    def create(
        cls, device_pseudonym: str, payload: bytes, created_at: float
    ) -> "TransactionProposal":
        created_at = float(created_at)
        tx_id = compute_tx_id(device_pseudonym, payload, created_at)
        return cls(tx_id, device_pseudonym, payload, created_at)

    def is_well_formed(self) -> bool:
        return self.tx_id == compute_tx_id(
            self.device_pseudonym, self.payload, self.created_at
        )

    def to_bytes(self) -> bytes:
        return (
            _field(self.tx_id.encode())
            + _field(self.device_pseudonym.encode())
            + _field(self.payload)
            + _f64(self.created_at)
        )


@dataclass(frozen=True)
class Endorsement:
    tx_id: str
    peer_id: str
    signature: bytes

    def to_bytes(self) -> bytes:
        return (
            _field(self.tx_id.encode())
            + _field(self.peer_id.encode())
            + _field(self.signature)
        )


EndorsedTx = tuple[TransactionProposal, tuple[Endorsement, ...]]


def _serialize_txs(txs: Sequence[EndorsedTx]) -> bytes:
    parts = [_u64(len(txs))]
    for proposal, endorsements in txs:
        parts.append(proposal.to_bytes())
        parts.append(_u64(len(endorsements)))
        parts.extend(e.to_bytes() for e in endorsements)
    return b"".join(parts)


def compute_block_hash(
    height: int,
    prev_hash: bytes,
    txs: Sequence[EndorsedTx],
    cut_at: float,
    meta: bytes = b"",
) -> bytes:
    data = (
        _u64(height)
        + _field(prev_hash)
        + _f64(cut_at)
        + _field(meta)
        + _serialize_txs(txs)
    )
    return sha256(data)


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    txs: tuple[EndorsedTx, ...]
    block_hash: bytes
    cut_at: float
    meta: bytes = b""

    @classmethod
    def build(
        cls,
        height: int,
        prev_hash: bytes,
        txs: Iterable[EndorsedTx],
        cut_at: float,
        meta: bytes = b"",
    ) -> "Block":
        txs = tuple((p, tuple(es)) for p, es in txs)
        cut_at = float(cut_at)
        return cls(
            height,
            prev_hash,
            txs,
            compute_block_hash(height, prev_hash, txs, cut_at, meta),
            cut_at,
            meta,
        )

    @property
    def tx_ids(self) -> list[str]:
        return [p.tx_id for p, _ in self.txs]

    def hash_ok(self) -> bool:
        return self.block_hash == compute_block_hash(
            self.height, self.prev_hash, self.txs, self.cut_at, self.meta
        )

    def chronological(self) -> bool:
        times = [p.created_at for p, _ in self.txs]
        return all(a <= b for a, b in zip(times, times[1:]))


def genesis_meta(peer_registry: Mapping[str, bytes], k: int) -> bytes:
    doc = {
        "curve": CURVE_NAME,
        "hash": HASH_NAME,
        "endorsement_k": k,
        "peers": {pid: pk.hex() for pid, pk in sorted(peer_registry.items())},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def parse_genesis_meta(meta: bytes) -> tuple[dict[str, bytes], int]:
    doc = json.loads(meta.decode())
    if doc.get("curve") != CURVE_NAME or doc.get("hash") != HASH_NAME:
        raise ValueError("unsupported curve or hash in genesis block")
    peers = {pid: bytes.fromhex(pk) for pid, pk in doc["peers"].items()}
    return peers, int(doc["endorsement_k"])


# ------------------------------------------------------------------- ledger


@dataclass
class CommitResult:
    accepted_tx_ids: tuple[str, ...]
    rejected_tx_ids: tuple[str, ...]


@dataclass
class Ledger:
    """Single-writer ledger state.

    ``validity`` holds one flag tuple per block (genesis included, empty),
    mirroring Fabric's transaction validation flags.
    """

    endorsement_policy: int
    peer_registry: dict[str, bytes]
    chain: list[Block] = field(default_factory=list)
    committed_ids: set[str] = field(default_factory=set)
    world_state: dict[str, bytes] = field(default_factory=dict)
    validity: list[tuple[bool, ...]] = field(default_factory=list)

    @classmethod
    def create(cls, peer_registry: Mapping[str, bytes], k: int) -> "Ledger":
        if k < 1:
            raise PolicyError("endorsement policy must require at least one endorsement")
        registry = dict(peer_registry)
        genesis = Block.build(0, ZERO_HASH, (), 0.0, genesis_meta(registry, k))
        return cls(k, registry, [genesis], set(), {}, [()])

    @property
    def tip(self) -> Block:
        return self.chain[-1]

    def __len__(self) -> int:
        return len(self.chain)


def select_endorsers(
    peers: Sequence[str], k: int, rng: np.random.Generator
) -> frozenset[str]:
    """Draw ``k`` distinct peers uniformly without replacement."""
    if k < 1 or k > len(peers):
        raise PolicyError(f"cannot select {k} endorsers from {len(peers)} peers")
    idx = rng.choice(len(peers), size=k, replace=False)
    return frozenset(peers[i] for i in idx)


def endorse(
    proposal: TransactionProposal, peer: KeyPair, ledger: Ledger
) -> Endorsement:
    if ledger.peer_registry.get(peer.peer_id) != peer.public_key:
        raise PolicyError(f"peer {peer.peer_id} is not registered")
    if not proposal.is_well_formed():
        raise MalformedProposal(proposal.tx_id)
    if proposal.tx_id in ledger.committed_ids:
        raise DuplicateTransaction(proposal.tx_id)
    return Endorsement(proposal.tx_id, peer.peer_id, peer.sign(proposal.to_bytes()))


def _count_valid(
    proposal: TransactionProposal,
    endorsements: Iterable[Endorsement],
    registry: Mapping[str, bytes],
) -> int:
    if not proposal.is_well_formed():
        return 0
    message = proposal.to_bytes()
    good: set[str] = set()
    for e in endorsements:
        if e.peer_id in good or e.tx_id != proposal.tx_id:
            continue
        public = registry.get(e.peer_id)
        if public is not None and verify(e.signature, message, public):
            good.add(e.peer_id)
    return len(good)


def verify_endorsements(
    proposal: TransactionProposal,
    endorsements: Iterable[Endorsement],
    ledger: Ledger,
) -> bool:
    return (
        _count_valid(proposal, endorsements, ledger.peer_registry)
        >= ledger.endorsement_policy
    )


@dataclass(frozen=True)
class CutPolicy:
    max_txs: int = 1
    max_wait_s: float = 0.0

    def __post_init__(self):
        if self.max_txs < 1:
            raise ValueError("max_txs must be >= 1")
        if self.max_wait_s < 0:
            raise ValueError("max_wait_s must be >= 0")


def _order_key(entry: EndorsedTx) -> tuple[float, str]:
    return (entry[0].created_at, entry[0].tx_id)


def cut_block(
    pending: Sequence[EndorsedTx],
    prev: Block,
    now: float,
    policy: CutPolicy = CutPolicy(),
) -> Optional[Block]:
    """Order pending transactions into a block if the cut policy fires.

    At most ``policy.max_txs`` of the oldest transactions go into the block;
    the caller removes them from its pending pool.
    """
    if not pending:
        return None
    oldest = min(p.created_at for p, _ in pending)
    if len(pending) < policy.max_txs and now - oldest < policy.max_wait_s:
        return None
    chosen = sorted(pending, key=_order_key)[: policy.max_txs]
    return Block.build(prev.height + 1, prev.block_hash, chosen, now)


def _block_structure_ok(block: Block, height: int, prev_hash: bytes) -> bool:
    return (
        block.height == height
        and block.prev_hash == prev_hash
        and block.hash_ok()
        and len(block.txs) > 0
        and block.chronological()
        and block.meta == b""
    )


def validate_and_commit(block: Block, ledger: Ledger) -> CommitResult:
    if not _block_structure_ok(block, len(ledger.chain), ledger.tip.block_hash):
        raise ChainMismatch(
            f"block {block.height} does not extend tip {ledger.tip.height}"
        )
    accepted: list[str] = []
    rejected: list[str] = []
    flags: list[bool] = []
    for proposal, endorsements in block.txs:
        ok = (
            proposal.tx_id not in ledger.committed_ids
            and verify_endorsements(proposal, endorsements, ledger)
        )
        flags.append(ok)
        if ok:
            ledger.committed_ids.add(proposal.tx_id)
            ledger.world_state[proposal.device_pseudonym] = proposal.payload
            accepted.append(proposal.tx_id)
        else:
            rejected.append(proposal.tx_id)
    ledger.chain.append(block)
    ledger.validity.append(tuple(flags))
    return CommitResult(tuple(accepted), tuple(rejected))


def verify_chain(ledger: Ledger) -> bool:
    """Replay the whole chain and check every structural and policy rule.

    Also checks that the stored validity flags, committed ids and world
    state are exactly what the replay produces.
    """
    chain = ledger.chain
    if not chain or len(ledger.validity) != len(chain):
        return False
    genesis = chain[0]
    if (
        genesis.height != 0
        or genesis.prev_hash != ZERO_HASH
        or genesis.txs
        or not genesis.hash_ok()
        or ledger.validity[0] != ()
    ):
        return False
    try:
        registry, k = parse_genesis_meta(genesis.meta)
    except (ValueError, KeyError, TypeError, UnicodeDecodeError):
        return False
    if registry != ledger.peer_registry or k != ledger.endorsement_policy:
        return False

    # cheap structural pass first so tampering is usually caught before
    # any signature is checked
    for i in range(1, len(chain)):
        if not _block_structure_ok(chain[i], i, chain[i - 1].block_hash):
            return False
        if len(ledger.validity[i]) != len(chain[i].txs):
            return False

    committed: set[str] = set()
    state: dict[str, bytes] = {}
    for block, flags in zip(chain[1:], ledger.validity[1:]):
        for (proposal, endorsements), flag in zip(block.txs, flags):
            ok = (
                proposal.tx_id not in committed
                and _count_valid(proposal, endorsements, registry) >= k
            )
            if ok != flag:
                return False
            if ok:
                committed.add(proposal.tx_id)
                state[proposal.device_pseudonym] = proposal.payload
    return committed == ledger.committed_ids and state == ledger.world_state


def rebuild_ledger(blocks: Sequence[Block], validity: Sequence[Sequence[bool]]) -> Ledger:
    """Reconstruct ledger state from exported blocks.

    World state and committed ids are recomputed from the stored validity
    flags; :func:`verify_chain` then checks them against a full replay.
    """
    if not blocks:
        raise ChainMismatch("empty chain")
    registry, k = parse_genesis_meta(blocks[0].meta)
    ledger = Ledger(k, registry, list(blocks), set(), {}, [tuple(v) for v in validity])
    for block, flags in zip(blocks[1:], ledger.validity[1:]):
        for (proposal, _), flag in zip(block.txs, flags):
            if flag:
                ledger.committed_ids.add(proposal.tx_id)
                ledger.world_state[proposal.device_pseudonym] = proposal.payload
    return ledger


# ------------------------------------------------------------------- export


def block_record(block: Block, flags: Sequence[bool]) -> dict:
    return {
        "height": block.height,
        "prev_hash": block.prev_hash.hex(),
        "block_hash": block.block_hash.hex(),
        "tx_ids": block.tx_ids,
        "cut_at": block.cut_at,
        "meta": block.meta.decode(),
        "valid": list(flags),
        "txs": [
            {
                "tx_id": p.tx_id,
                "device_pseudonym": p.device_pseudonym,
                "payload": p.payload.hex(),
                "created_at": p.created_at,
                "endorsements": [
                    {"peer_id": e.peer_id, "signature": e.signature.hex()}
                    for e in es
                ],
            }
            for p, es in block.txs
        ],
    }


def export_chain(ledger: Ledger) -> str:
    """One JSON object per line, one line per block.

    Floats keep full precision (shortest round-trip repr) so an exported
    chain can be re-verified bit for bit.
    """
    lines = [
        json.dumps(block_record(b, f), separators=(",", ":"))
        for b, f in zip(ledger.chain, ledger.validity)
    ]
    return "\n".join(lines) + "\n"


def _block_from_record(rec: dict) -> Block:
    txs = tuple(
        (
            TransactionProposal(
                t["tx_id"],
                t["device_pseudonym"],
                bytes.fromhex(t["payload"]),
                float(t["created_at"]),
            ),
            tuple(
                Endorsement(t["tx_id"], e["peer_id"], bytes.fromhex(e["signature"]))
                for e in t["endorsements"]
            ),
        )
        for t in rec["txs"]
    )
    return Block(
        int(rec["height"]),
        bytes.fromhex(rec["prev_hash"]),
        txs,
        bytes.fromhex(rec["block_hash"]),
        float(rec["cut_at"]),
        rec.get("meta", "").encode(),
    )


def load_chain(text: str) -> Ledger:
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    blocks = [_block_from_record(r) for r in records]
    return rebuild_ledger(blocks, [r["valid"] for r in records])
