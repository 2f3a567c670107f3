"""In-process simulation of a permissioned, round-robin blockchain.

Blocks are kept in their canonical byte encoding; every read decodes them
afresh, so tampering with the stored bytes is visible to :func:`verify_encoded_chain`.
Time advances in discrete ticks and at most one block is produced per tick.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

logger = logging.getLogger(__name__)

ZERO_DIGEST = bytes(32)
TX_TYPES = ("rec", "hscan")
ID_BYTES = 32
_BLOCK_MAGIC = b"VXB1"


class LedgerError(Exception):
    pass


class TransactionRejected(LedgerError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class LedgerUnavailable(LedgerError):
    """The ledger cannot be reached; distinct from a negative lookup."""


class DecodeError(LedgerError):
    pass


# --------------------------------------------------------------------------
# Canonical encoding


def _lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def _opt(data: Optional[bytes]) -> bytes:
    return b"\x00" if data is None else b"\x01" + _lp(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, k: int) -> bytes:
        if self.pos + k > len(self.data):
            raise DecodeError("truncated encoding")
        out = self.data[self.pos : self.pos + k]
        self.pos += k
        return out

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def field(self) -> bytes:
        return self.take(self.u32())

    def opt(self) -> Optional[bytes]:
        flag = self.take(1)
        if flag == b"\x00":
            return None
        if flag == b"\x01":
            return self.field()
        raise DecodeError("bad presence flag")

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError("trailing bytes after encoding")


def _text(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError("invalid UTF-8 in text field") from exc


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def encode_rec_payload(user_id: bytes, record: bytes) -> bytes:
    if len(user_id) != ID_BYTES:
        raise ValueError("user id must be 32 bytes")
    return _lp(user_id) + _lp(record)


def decode_rec_payload(payload: bytes) -> tuple[bytes, bytes]:
    r = _Reader(payload)
    user_id, record = r.field(), r.field()
    r.done()
    if len(user_id) != ID_BYTES:
        raise DecodeError("user id must be 32 bytes")
    return user_id, record


def encode_hscan_payload(bits: Sequence[int]) -> bytes:
    bits = [int(b) for b in bits]
    if not bits or any(b not in (0, 1) for b in bits):
        raise ValueError("hash payload must be a non-empty bit sequence")
    packed = bytearray((len(bits) + 7) // 8)
    for i, b in enumerate(bits):
        if b:
            packed[i // 8] |= 0x80 >> (i % 8)
    return struct.pack(">I", len(bits)) + bytes(packed)


def decode_hscan_payload(payload: bytes) -> tuple[int, ...]:
    r = _Reader(payload)
    m = r.u32()
    if m == 0:
        raise DecodeError("empty hash payload")
    packed = r.take((m + 7) // 8)
    r.done()
    bits = tuple((packed[i // 8] >> (7 - i % 8)) & 1 for i in range(m))
    # padding bits must be zero so the encoding stays canonical
    if m % 8 and packed[-1] & (0xFF >> (m % 8)):
        raise DecodeError("non-zero padding bits in hash payload")
    return bits


def validate_payload(tx_type: str, payload: bytes) -> None:
    if tx_type == "rec":
        _, record = decode_rec_payload(payload)
        try:
            obj = json.loads(record.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DecodeError("record is not UTF-8 JSON") from exc
        if not isinstance(obj, dict):
            raise DecodeError("record must be a JSON object")
    elif tx_type == "hscan":
        decode_hscan_payload(payload)
    else:
        raise DecodeError(f"unknown transaction type {tx_type!r}")


# --------------------------------------------------------------------------
# Keys and signatures


@dataclass(frozen=True)
class Party:
    party_id: str
    public_key: bytes
    authorized: bool = True


def public_bytes(sk: Ed25519PrivateKey) -> bytes:
    return sk.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def keygen(party_id: str, authorized: bool = True) -> tuple[Ed25519PrivateKey, Party]:
    if not party_id:
        raise ValueError("party id must be non-empty")
    sk = Ed25519PrivateKey.generate()
    return sk, Party(party_id, public_bytes(sk), authorized)


def secret_from_bytes(raw: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(raw)


def secret_to_bytes(sk: Ed25519PrivateKey) -> bytes:
    return sk.private_bytes(
        serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
    )


def keygen_from_seed(party_id: str, seed: bytes, authorized: bool = True) -> tuple[Ed25519PrivateKey, Party]:
    """Deterministic key pair, for reproducible simulations only."""
    sk = secret_from_bytes(digest(b"vaxpass-party-key\x00" + seed + b"\x00" + party_id.encode()))
    return sk, Party(party_id, public_bytes(sk), authorized)


def sign(sk: Ed25519PrivateKey, payload: bytes) -> bytes:
    return sk.sign(payload)


def verify(pk: bytes, payload: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(pk).verify(signature, payload)
    except (InvalidSignature, ValueError):
        return False
    return True


# --------------------------------------------------------------------------
# Transactions and blocks


@dataclass(frozen=True)
class Transaction:
    tx_type: str
    payload: bytes
    party: Optional[str] = None
    signature: Optional[bytes] = None

    @property
    def anonymous(self) -> bool:
        return self.party is None and self.signature is None

    def signing_bytes(self) -> bytes:
        return signing_message(self.tx_type, self.payload, self.party or "")

    def encode(self) -> bytes:
        party = None if self.party is None else self.party.encode("utf-8")
        return _lp(self.tx_type.encode("utf-8")) + _lp(self.payload) + _opt(party) + _opt(self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        r = _Reader(data)
        tx_type = _text(r.field())
        payload = r.field()
        party = r.opt()
        sig = r.opt()
        r.done()
        return cls(tx_type, payload, None if party is None else _text(party), sig)

    @property
    def txid(self) -> str:
        return digest(self.encode()).hex()


def signing_message(tx_type: str, payload: bytes, party: str) -> bytes:
    return b"vaxpass-tx\x00" + _lp(tx_type.encode()) + _lp(payload) + _lp(party.encode())


def signed_transaction(tx_type: str, payload: bytes, party: str, sk: Ed25519PrivateKey) -> Transaction:
    return Transaction(tx_type, payload, party, sign(sk, signing_message(tx_type, payload, party)))


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    producer: str
    transactions: tuple[Transaction, ...]
    members: tuple[tuple[str, bytes], ...] = ()
    hash: bytes = ZERO_DIGEST

    def body(self) -> bytes:
        parts = [
            _BLOCK_MAGIC,
            struct.pack(">Q", self.height),
            _lp(self.prev_hash),
            _lp(self.producer.encode("utf-8")),
            struct.pack(">I", len(self.members)),
        ]
        for pid, pk in self.members:
            parts += [_lp(pid.encode("utf-8")), _lp(pk)]
        parts.append(struct.pack(">I", len(self.transactions)))
        parts += [_lp(tx.encode()) for tx in self.transactions]
        return b"".join(parts)

    def compute_hash(self) -> bytes:
        return digest(self.body())

    def sealed(self) -> "Block":
        return Block(self.height, self.prev_hash, self.producer, self.transactions, self.members, self.compute_hash())

    def encode(self) -> bytes:
        return _lp(self.hash) + self.body()

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        r = _Reader(data)
        block_hash = r.field()
        if r.take(4) != _BLOCK_MAGIC:
            raise DecodeError("bad block magic")
        height = r.u64()
        prev = r.field()
        producer = _text(r.field())
        members = tuple((_text(r.field()), r.field()) for _ in range(r.u32()))
        txs = tuple(Transaction.decode(r.field()) for _ in range(r.u32()))
        r.done()
        if len(block_hash) != 32 or len(prev) != 32:
            raise DecodeError("digests must be 32 bytes")
        return cls(height, prev, producer, txs, members, block_hash)

    def to_json(self) -> dict:
        return {
            "height": self.height,
            "hash": self.hash.hex(),
            "prev_hash": self.prev_hash.hex(),
            "producer": self.producer,
            "members": [{"party": pid, "public_key": pk.hex()} for pid, pk in self.members],
            "transactions": [
                {
                    "type": tx.tx_type,
                    "payload": tx.payload.hex(),
                    "party": tx.party,
                    "signature": None if tx.signature is None else tx.signature.hex(),
                }
                for tx in self.transactions
            ],
        }


@dataclass(frozen=True)
class Receipt:
    txid: str
    not_before_tick: int


@dataclass(frozen=True)
class MempoolEntry:
    tx: Transaction
    not_before_tick: int
    submitted_tick: int


@dataclass(frozen=True)
class ChainCheck:
    ok: bool
    height: Optional[int] = None
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.ok


def _genesis_roster(blob: bytes) -> tuple[dict[str, bytes], list[str]]:
    block = Block.decode(blob)
    return dict(block.members), sorted(dict(block.members))


def _block_problem(
    blob: bytes, height: int, prev: bytes, members: dict[str, bytes], order: list[str]
) -> tuple[Optional[Block], Optional[str]]:
    """Check one stored block against its predecessor's hash and the roster."""
    try:
        block = Block.decode(blob)
    except DecodeError as exc:
        return None, f"undecodable block: {exc}"
    if block.encode() != blob:
        return None, "non-canonical block encoding"
    if block.height != height:
        return None, f"height field says {block.height}"
    if block.prev_hash != prev:
        return None, "prev_hash does not match predecessor"
    if block.compute_hash() != block.hash:
        return None, "block hash recomputation failed"
    if height == 0:
        if not block.members or block.producer or block.transactions:
            return None, "malformed genesis block"
        if len(dict(block.members)) != len(block.members) or [p for p, _ in block.members] != sorted(dict(block.members)):
            return None, "genesis membership not canonical"
        return block, None
    if block.members:
        return None, "membership records outside genesis"
    expected = order[height % len(order)]
    if block.producer != expected:
        return None, f"round-robin violation: {block.producer!r} instead of {expected!r}"
    for tx in block.transactions:
        problem = _tx_problem(tx, members)
        if problem:
            return None, problem
    return block, None


def verify_encoded_chain(blobs: Sequence[bytes]) -> ChainCheck:
    """Check linkage, digests, signatures and producer rotation of a stored chain."""
    if not blobs:
        return ChainCheck(False, 0, "missing genesis block")
    members: dict[str, bytes] = {}
    order: list[str] = []
    prev = ZERO_DIGEST
    for height, blob in enumerate(blobs):
        block, problem = _block_problem(blob, height, prev, members, order)
        if problem:
            return ChainCheck(False, height, problem)
        if height == 0:
            members, order = _genesis_roster(blob)
        prev = block.hash
    return ChainCheck(True)


def verify_blocks(blobs: Sequence[bytes], heights: Iterable[int]) -> ChainCheck:
    """Check only the given heights, each against the stored hash of its predecessor.

    Equivalent to :func:`verify_encoded_chain` when every other block is
    already known to be valid, e.g. after changing a single stored block
    ``h`` it suffices to check ``{h, h + 1}``.
    """
    if not blobs:
        return ChainCheck(False, 0, "missing genesis block")
    try:
        members, order = _genesis_roster(blobs[0])
    except DecodeError as exc:
        return ChainCheck(False, 0, f"undecodable block: {exc}")
    for height in sorted(set(heights)):
        if not 0 <= height < len(blobs):
            continue
        prev = ZERO_DIGEST
        if height > 0:
            try:
                prev = Block.decode(blobs[height - 1]).hash
            except DecodeError as exc:
                return ChainCheck(False, height - 1, f"undecodable block: {exc}")
        _, problem = _block_problem(blobs[height], height, prev, members, order)
        if problem:
            return ChainCheck(False, height, problem)
    return ChainCheck(True)


def _tx_problem(tx: Transaction, members: dict[str, bytes]) -> Optional[str]:
    try:
        validate_payload(tx.tx_type, tx.payload)
    except DecodeError as exc:
        return f"malformed payload: {exc}"
    if tx.anonymous:
        if tx.tx_type == "rec":
            return "record transaction without a signer"
        return None
    if tx.party is None or tx.signature is None:
        return "half-anonymous transaction"
    pk = members.get(tx.party)
    if pk is None:
        return f"transaction from non-member {tx.party!r}"
    if not verify(pk, tx.signing_bytes(), tx.signature):
        return f"bad signature from {tx.party!r}"
    return None


# --------------------------------------------------------------------------
# The ledger


class Ledger:
    """Single-writer permissioned chain with round-robin producers.

    The clock starts at tick 0.  :meth:`step` produces the block for the
    current tick and then advances the clock, so a transaction submitted
    with delay ``d`` is included no earlier than ``d`` blocks after one
    submitted with delay 0 at the same moment.
    """

    def __init__(self, members: Iterable[Party], empty_blocks: bool = True):
        roster = sorted((p for p in members if p.authorized), key=lambda p: p.party_id)
        if not roster:
            raise LedgerError("a ledger needs at least one authorised party")
        ids = [p.party_id for p in roster]
        if len(set(ids)) != len(ids):
            raise LedgerError("duplicate party ids in membership")
        self._members = {p.party_id: p.public_key for p in roster}
        self._order = ids
        self._by_key = {p.public_key: p.party_id for p in roster}
        self.empty_blocks = empty_blocks
        self.now = 0
        self.online = True
        self._last_tick: Optional[int] = None
        self._mempool: list[MempoolEntry] = []
        self._store: list[bytes] = []
        self._lock = threading.RLock()
        genesis = Block(0, ZERO_DIGEST, "", (), tuple((pid, self._members[pid]) for pid in ids)).sealed()
        self._store.append(genesis.encode())
        self._tip = genesis.hash

    @classmethod
    def from_encoded(
        cls, blobs: Sequence[bytes], empty_blocks: bool = True, now: Optional[int] = None
    ) -> "Ledger":
        check = verify_encoded_chain(blobs)
        if not check:
            raise LedgerError(f"refusing to load invalid chain: height {check.height}: {check.reason}")
        genesis = Block.decode(blobs[0])
        ledger = cls([Party(pid, pk) for pid, pk in genesis.members], empty_blocks=empty_blocks)
        ledger._store = list(blobs)
        ledger._tip = Block.decode(blobs[-1]).hash
        ledger.now = now if now is not None else len(blobs) - 1
        ledger._last_tick = ledger.now - 1 if ledger.now > 0 else None
        return ledger

    # -- membership ----------------------------------------------------------

    @property
    def members(self) -> list[str]:
        return list(self._order)

    def public_key(self, party_id: str) -> Optional[bytes]:
        return self._members.get(party_id)

    def is_member(self, party_id: str) -> bool:
        return party_id in self._members

    # -- writes --------------------------------------------------------------

    def broadcast(self, party: str, sk: Ed25519PrivateKey, tx: Transaction) -> Receipt:
        """Queue a signed transaction; accepted iff ``party`` is an authorised member."""
        with self._lock:
            pk = self._members.get(party)
            if pk is None:
                raise TransactionRejected(f"party {party!r} is not authorised")
            if public_bytes(sk) != pk:
                raise TransactionRejected("secret key does not belong to the sending party")
            if tx.party != party or tx.signature is None:
                raise TransactionRejected("transaction must carry the sender and a signature")
            self._check_payload(tx)
            if not verify(pk, tx.signing_bytes(), tx.signature):
                raise TransactionRejected("signature does not verify")
            return self._enqueue(tx, 0)

    def anon_broadcast(self, sk: Ed25519PrivateKey, tx: Transaction, delay_ticks: int = 0) -> Receipt:
        """Queue an identity-free transaction after checking ``sk`` against the membership.

        The check happens at the gateway; nothing about the submitter is stored
        in the mempool entry, the transaction or the block.
        """
        with self._lock:
            if delay_ticks < 0:
                raise ValueError("delay must be non-negative")
            if public_bytes(sk) not in self._by_key:
                raise TransactionRejected("secret key matches no authorised party")
            if not tx.anonymous:
                raise TransactionRejected("anonymous transactions carry no party or signature")
            self._check_payload(tx)
            return self._enqueue(tx, delay_ticks)

    def _check_payload(self, tx: Transaction) -> None:
        try:
            validate_payload(tx.tx_type, tx.payload)
        except DecodeError as exc:
            raise TransactionRejected(f"malformed payload: {exc}") from exc

    def _enqueue(self, tx: Transaction, delay: int) -> Receipt:
        entry = MempoolEntry(tx, self.now + delay, self.now)
        self._mempool.append(entry)
        return Receipt(tx.txid, entry.not_before_tick)

    def produce_block(self, tick: int) -> Optional[Block]:
        with self._lock:
            if self._last_tick is not None and tick < self._last_tick:
                raise LedgerError("block ticks must not go backwards")
            self._last_tick = tick
            eligible = [e for e in self._mempool if e.not_before_tick <= tick]
            if not eligible and not self.empty_blocks:
                return None
            self._mempool = [e for e in self._mempool if e.not_before_tick > tick]
            height = len(self._store)
            producer = self._order[height % len(self._order)]
            block = Block(height, self._tip, producer, tuple(e.tx for e in eligible)).sealed()
            self._store.append(block.encode())
            self._tip = block.hash
            return block

    def step(self, ticks: int = 1) -> list[Block]:
        produced = []
        for _ in range(ticks):
            with self._lock:
                block = self.produce_block(self.now)
                self.now += 1
            if block is not None:
                produced.append(block)
        return produced

    # -- reads ---------------------------------------------------------------

    def _ensure_online(self) -> None:
        if not self.online:
            raise LedgerUnavailable("ledger is offline")

    def get_num_blocks(self) -> int:
        self._ensure_online()
        return len(self._store)

    def retrieve_block(self, block_no: int) -> Block:
        self._ensure_online()
        if not 0 <= block_no < len(self._store):
            raise IndexError(f"block {block_no} out of range [0, {len(self._store)})")
        return Block.decode(self._store[block_no])

    def mempool(self) -> list[MempoolEntry]:
        return list(self._mempool)

    def mempool_to_json(self) -> list[dict]:
        return [
            {"tx": e.tx.encode().hex(), "not_before_tick": e.not_before_tick, "submitted_tick": e.submitted_tick}
            for e in self._mempool
        ]

    def restore_mempool(self, entries: Iterable[dict]) -> None:
        with self._lock:
            self._mempool = [
                MempoolEntry(Transaction.decode(bytes.fromhex(e["tx"])), int(e["not_before_tick"]), int(e["submitted_tick"]))
                for e in entries
            ]

    def stored_blocks(self) -> list[bytes]:
        return list(self._store)

    def verify_chain(self) -> ChainCheck:
        return verify_encoded_chain(self._store)

    def producer_counts(self) -> dict[str, int]:
        counts = {pid: 0 for pid in self._order}
        for h in range(1, len(self._store)):
            counts[Block.decode(self._store[h]).producer] += 1
        return counts

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            for blob in self._store:
                fh.write(_lp(blob))

    def append_to(self, path: str | Path, start: int) -> None:
        with open(path, "ab") as fh:
            for blob in self._store[start:]:
                fh.write(_lp(blob))

    def export_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for h in range(len(self._store)):
                fh.write(json.dumps(self.retrieve_block(h).to_json()) + "\n")


def read_chain_file(path: str | Path) -> list[bytes]:
    data = Path(path).read_bytes()
    r = _Reader(data)
    blobs = []
    while r.pos < len(data):
        blobs.append(r.field())
    return blobs
