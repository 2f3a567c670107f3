"""Enrolment, authentication and record keeping on top of the ledger.

A :class:`PassportNode` keeps a local view (``ids``, ``records``, ``hscans``)
of every block it has synced and talks to the chain only through
``broadcast``, ``anon_broadcast``, ``get_num_blocks`` and ``retrieve_block``.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import random
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import biometric, lsh
from .biometric import MaskingMode, Scan
from .config import DEFAULT_COLS, DEFAULT_HASH_BITS, DEFAULT_LAMBDA, DEFAULT_MAX_SHIFTS, DEFAULT_ROWS, DEFAULT_THRESHOLD
from .ledger import (
    DecodeError,
    Ledger,
    Transaction,
    decode_hscan_payload,
    decode_rec_payload,
    encode_hscan_payload,
    encode_rec_payload,
    signed_transaction,
)

logger = logging.getLogger(__name__)

GENDERS = ("male", "female", "other")
MAX_ANON_DELAY = 100

UserID = bytes
HashBits = tuple[int, ...]


class ValidationError(ValueError):
    pass


class DuplicateEnrollment(ValueError):
    pass


# --------------------------------------------------------------------------
# Parameters


@dataclass
class PassportParams:
    h1_key: bytes
    projections: lsh.ProjectionSet
    threshold: float = DEFAULT_THRESHOLD
    system_seed: int = 0
    security_lambda: int = DEFAULT_LAMBDA
    rows: int = DEFAULT_ROWS
    cols: int = DEFAULT_COLS
    masking_mode: MaskingMode = MaskingMode.TYPE1
    global_mask: Optional[np.ndarray] = None
    rotation_search: bool = False
    max_shifts: int = DEFAULT_MAX_SHIFTS

    def __post_init__(self) -> None:
        self.masking_mode = MaskingMode(self.masking_mode)
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("threshold must lie strictly between 0 and 1")
        if self.projections.n != self.rows * self.cols:
            raise ValidationError("projection length must equal rows * cols")
        if len(self.h1_key) != 32:
            raise ValidationError("H1 key must be 32 bytes")
        if self.masking_mode is MaskingMode.TYPE2 and self.global_mask is None:
            raise ValidationError("type2 masking needs a global mask")

    def h1(self, data: bytes) -> bytes:
        """The keyed 256-bit collision-resistant hash."""
        return hashlib.blake2b(data, digest_size=32, key=self.h1_key).digest()

    def h2(self, fv: np.ndarray) -> np.ndarray:
        return lsh.s3hash(self.projections, fv)

    def to_json(self) -> dict:
        return {
            "h1_key": self.h1_key.hex(),
            "projection_seed": self.projections.seed,
            "n": self.projections.n,
            "m": self.projections.m,
            "threshold": self.threshold,
            "system_seed": self.system_seed,
            "security_lambda": self.security_lambda,
            "rows": self.rows,
            "cols": self.cols,
            "masking_mode": self.masking_mode.value,
            "global_mask": None if self.global_mask is None else biometric.encode_matrix(self.global_mask),
            "rotation_search": self.rotation_search,
            "max_shifts": self.max_shifts,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PassportParams":
        gm = obj.get("global_mask")
        return cls(
            h1_key=bytes.fromhex(obj["h1_key"]),
            projections=lsh.sample_projections(obj["n"], obj["m"], obj["projection_seed"]),
            threshold=obj["threshold"],
            system_seed=obj["system_seed"],
            security_lambda=obj["security_lambda"],
            rows=obj["rows"],
            cols=obj["cols"],
            masking_mode=MaskingMode(obj["masking_mode"]),
            global_mask=None if gm is None else biometric.decode_matrix(gm),
            rotation_search=obj.get("rotation_search", False),
            max_shifts=obj.get("max_shifts", DEFAULT_MAX_SHIFTS),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PassportParams":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def setup(
    security_lambda: int = DEFAULT_LAMBDA,
    seed: int = 0,
    *,
    m: int = DEFAULT_HASH_BITS,
    rows: int = DEFAULT_ROWS,
    cols: int = DEFAULT_COLS,
    threshold: float = DEFAULT_THRESHOLD,
    masking_mode: MaskingMode | str = MaskingMode.TYPE1,
    global_mask: Optional[np.ndarray] = None,
    rotation_search: bool = False,
    max_shifts: int = DEFAULT_MAX_SHIFTS,
) -> PassportParams:
    """Derive the public system parameters from a system seed.

    The projection set comes straight from ``seed``; the H1 key is a
    domain-separated digest of it, so every party holding the seed hashes
    identically.
    """
    key = hashlib.sha256(b"vaxpass-h1-key\x00" + struct.pack(">q", seed)).digest()
    return PassportParams(
        h1_key=key,
        projections=lsh.sample_projections(rows * cols, m, seed),
        threshold=threshold,
        system_seed=seed,
        security_lambda=security_lambda,
        rows=rows,
        cols=cols,
        masking_mode=MaskingMode(masking_mode),
        global_mask=global_mask,
        rotation_search=rotation_search,
        max_shifts=max_shifts,
    )


# --------------------------------------------------------------------------
# Records and identifiers


@dataclass(frozen=True)
class VaccinationRecord:
    date: str
    vaccine: str
    dose: int
    issuer: str
    free_text: Optional[str] = None

    def __post_init__(self) -> None:
        try:
            _dt.date.fromisoformat(self.date)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"record date {self.date!r} is not an ISO-8601 date") from exc
        if not isinstance(self.dose, int) or isinstance(self.dose, bool) or self.dose < 1:
            raise ValidationError("dose must be an integer >= 1")
        if not self.vaccine or not self.issuer:
            raise ValidationError("vaccine and issuer are required")

    def to_json(self) -> dict:
        out = {"vaccine": self.vaccine, "dose": self.dose, "date": self.date, "issuer": self.issuer}
        if self.free_text is not None:
            out["free_text"] = self.free_text
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "VaccinationRecord":
        extra = set(obj) - {"vaccine", "dose", "date", "issuer", "free_text"}
        if extra:
            raise ValidationError(f"unexpected record fields {sorted(extra)}")
        try:
            return cls(
                date=obj["date"],
                vaccine=obj["vaccine"],
                dose=obj["dose"],
                issuer=obj["issuer"],
                free_text=obj.get("free_text"),
            )
        except KeyError as exc:
            raise ValidationError(f"record is missing {exc.args[0]!r}") from exc

    def sort_key(self) -> tuple:
        return (self.date, self.dose, self.vaccine, self.issuer, self.free_text or "")

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "VaccinationRecord":
        return cls.from_json(json.loads(raw.decode("utf-8")))


def validate_demographics(dob: str, gender: str) -> None:
    try:
        parsed = _dt.datetime.strptime(dob, "%d/%m/%Y")
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"date of birth {dob!r} is not dd/mm/yyyy") from exc
    if parsed.strftime("%d/%m/%Y") != dob:
        raise ValidationError(f"date of birth {dob!r} is not zero-padded dd/mm/yyyy")
    if gender not in GENDERS:
        raise ValidationError(f"gender must be one of {GENDERS}")


def _lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def compute_id(params: PassportParams, dob: str, gender: str, hscan) -> UserID:
    """256-bit identifier from demographics and the biometric hash.

    Fields are length-prefixed before hashing so different splits of the same
    characters can never collide.
    """
    validate_demographics(dob, gender)
    return params.h1(_lp(dob.encode()) + _lp(gender.encode()) + _lp(encode_hscan_payload(hscan)))


# --------------------------------------------------------------------------
# Node


@dataclass(frozen=True)
class PassportState:
    num_blocks: int
    ids: frozenset
    records: frozenset  # of ((user_id, record), multiplicity)
    hscans: frozenset

    def same_contents(self, other: "PassportState") -> bool:
        return (self.ids, self.records, self.hscans) == (other.ids, other.records, other.hscans)


@dataclass
class AuthResult:
    user_id: Optional[UserID]
    path: Optional[str]  # "exact", "near" or None
    distance: Optional[float] = None
    matching_candidates: int = 0


@dataclass
class RecordReceipt:
    user_id: UserID
    enrolled: bool
    txids: list[str] = field(default_factory=list)


class PassportNode:
    """One organisation's protocol endpoint over a shared ledger."""

    def __init__(self, params: PassportParams, ledger: Ledger, seed: int = 0):
        self.params = params
        self.ledger = ledger
        self._rng = random.Random(seed)
        self.num_blocks = 0
        self.ids: set[UserID] = set()
        self.records: Counter = Counter()
        self.hscans: set[HashBits] = set()
        # records applied locally before their transaction reaches a block
        self._pending: Counter = Counter()
        self.sync()

    # -- chain view ----------------------------------------------------------

    def sync(self) -> PassportState:
        new_num = self.ledger.get_num_blocks()
        for height in range(self.num_blocks, new_num):
            block = self.ledger.retrieve_block(height)
            for tx in block.transactions:
                self._apply(tx, height)
        self.num_blocks = max(self.num_blocks, new_num)
        return self.state()

    def _apply(self, tx: Transaction, height: int) -> None:
        try:
            if tx.tx_type == "rec":
                user_id, raw = decode_rec_payload(tx.payload)
                record = VaccinationRecord.from_bytes(raw)
                self.ids.add(user_id)
                if self._pending[tx.txid]:
                    self._pending[tx.txid] -= 1
                else:
                    self.records[(user_id, record)] += 1
            elif tx.tx_type == "hscan":
                bits = decode_hscan_payload(tx.payload)
                if len(bits) != self.params.projections.m:
                    raise DecodeError(f"hash of {len(bits)} bits, expected {self.params.projections.m}")
                self.hscans.add(bits)
            else:
                raise DecodeError(f"unknown transaction type {tx.tx_type!r}")
        except (DecodeError, ValidationError, ValueError) as exc:
            logger.warning("skipping malformed transaction %s in block %d: %s", tx.txid[:16], height, exc)

    def state(self) -> PassportState:
        return PassportState(
            self.num_blocks,
            frozenset(self.ids),
            frozenset(self.records.items()),
            frozenset(self.hscans),
        )

    def state_digest(self) -> str:
        h = hashlib.sha256()
        for uid in sorted(self.ids):
            h.update(b"I" + uid)
        for (uid, rec), count in sorted(self.records.items(), key=lambda kv: (kv[0][0], kv[0][1].to_bytes())):
            h.update(b"R" + uid + _lp(rec.to_bytes()) + struct.pack(">I", count))
        for bits in sorted(self.hscans):
            h.update(b"H" + encode_hscan_payload(bits))
        return h.hexdigest()

    # -- biometric helpers ---------------------------------------------------

    def feature_vector(self, scan: Scan) -> np.ndarray:
        template, mask = scan
        if np.shape(template) != (self.params.rows, self.params.cols):
            raise ValidationError(f"scan must be {self.params.rows}x{self.params.cols}")
        return biometric.extract_feature_vector(template, mask, self.params.masking_mode, self.params.global_mask)

    def hash_scan(self, scan: Scan) -> HashBits:
        return tuple(int(b) for b in self.params.h2(self.feature_vector(scan)))

    # -- protocol ------------------------------------------------------------

    def authenticate_detail(self, dob: str, gender: str, scan: Scan) -> AuthResult:
        validate_demographics(dob, gender)
        self.sync()
        fv = self.feature_vector(scan)
        hscan = self.params.h2(fv)
        user_id = compute_id(self.params, dob, gender, hscan)
        if user_id in self.ids:
            return AuthResult(user_id, "exact", 0.0, 1)
        if not self.hscans:
            return AuthResult(None, None)

        stored = sorted(self.hscans)
        table = np.array(stored, dtype=np.uint8)
        if self.params.rotation_search:
            rows = self.params.rows
            probes = np.stack(
                [
                    self.params.h2(biometric.rotate(fv, s, rows))
                    for s in range(-self.params.max_shifts, self.params.max_shifts + 1)
                ]
            )
        else:
            probes = hscan[None, :]
        dists = (probes[:, None, :] != table[None, :, :]).mean(axis=2).min(axis=0)

        # closest candidate first; ties broken by the hash bits themselves
        order = sorted(range(len(stored)), key=lambda k: (dists[k], stored[k]))
        found: Optional[tuple[UserID, float]] = None
        matches = 0
        for k in order:
            if dists[k] >= self.params.threshold:
                break
            cand = compute_id(self.params, dob, gender, stored[k])
            if cand in self.ids:
                matches += 1
                if found is None:
                    found = (cand, float(dists[k]))
        if found is None:
            return AuthResult(None, None)
        return AuthResult(found[0], "near", found[1], matches)

    def authenticate(self, dob: str, gender: str, scan: Scan) -> Optional[UserID]:
        return self.authenticate_detail(dob, gender, scan).user_id

    def enroll(self, party: str, sk, dob: str, gender: str, scan: Scan, init_record: VaccinationRecord) -> UserID:
        validate_demographics(dob, gender)
        self.sync()
        hscan = self.hash_scan(scan)
        user_id = compute_id(self.params, dob, gender, hscan)
        if user_id in self.ids:
            raise DuplicateEnrollment("user is already enrolled")
        self._broadcast_record(party, sk, user_id, init_record)
        delay = self._rng.randint(1, MAX_ANON_DELAY)
        anon = Transaction("hscan", encode_hscan_payload(hscan))
        self.ledger.anon_broadcast(sk, anon, delay_ticks=delay)
        self.ids.add(user_id)
        self.hscans.add(hscan)
        return user_id

    def _broadcast_record(self, party: str, sk, user_id: UserID, record: VaccinationRecord) -> str:
        tx = signed_transaction("rec", encode_rec_payload(user_id, record.to_bytes()), party, sk)
        receipt = self.ledger.broadcast(party, sk, tx)
        self.records[(user_id, record)] += 1
        self._pending[receipt.txid] += 1
        return receipt.txid

    def add_record(self, party: str, sk, dob: str, gender: str, scan: Scan, record: VaccinationRecord) -> RecordReceipt:
        user_id = self.authenticate(dob, gender, scan)
        if user_id is None:
            user_id = self.enroll(party, sk, dob, gender, scan, record)
            return RecordReceipt(user_id, True)
        txid = self._broadcast_record(party, sk, user_id, record)
        return RecordReceipt(user_id, False, [txid])

    def fetch_records(self, dob: str, gender: str, scan: Scan) -> list[VaccinationRecord]:
        user_id = self.authenticate(dob, gender, scan)
        if user_id is None:
            return []
        found = [rec for (uid, rec), count in self.records.items() if uid == user_id for _ in range(count)]
        return sorted(found, key=VaccinationRecord.sort_key)
