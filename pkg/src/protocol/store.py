"""User records and the file-backed server store.

One JSON document per user under ``<root>/users/``; every write goes to a
temporary file in the same directory and is moved into place with
``os.replace``. With ``root=None`` the store lives in memory only.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional

import structlog
from cryptography.exceptions import InvalidKey
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.pbkdf2 import PBKDF2HMAC

from src.protocol.biometric import FbUrl
from src.protocol.crypto_core import (
    EncryptedEnvelope,
    Nonce10,
    RandomSource,
    ReplayToken,
    Salt,
    SecretKey,
)
from src.protocol.errors import UnknownEmail
from src.protocol.jsonfile import read_json, write_json_atomic
from src.protocol.messages import SessionId
from src.sim.channels import BluetoothAddress

logger = structlog.get_logger()


class SessionState(str, Enum):
    IDLE = "Idle"
    LOGIN_BEGUN = "LoginBegun"
    AWAITING_PROXIMITY = "AwaitingProximity"
    AWAITING_ROTATION_ACK = "AwaitingRotationAck"
    AWAITING_OK = "AwaitingOk"


ROTATION_STATES = frozenset({SessionState.AWAITING_ROTATION_ACK, SessionState.AWAITING_OK})


@dataclass(frozen=True)
class PasswordVerifier:
    salt: bytes
    iterations: int
    digest: bytes

    @staticmethod
    def _kdf(salt: bytes, iterations: int) -> PBKDF2HMAC:
        return PBKDF2HMAC(algorithm=hashes.SHA256(), length=32, salt=salt, iterations=iterations)

    @classmethod
    def create(cls, pwd: str, rng: RandomSource, iterations: int) -> "PasswordVerifier":
        salt = rng.bytes(16)
        return cls(salt, iterations, cls._kdf(salt, iterations).derive(pwd.encode("utf-8")))

    def check(self, pwd: str) -> bool:
        try:
            self._kdf(self.salt, self.iterations).verify(pwd.encode("utf-8"), self.digest)
        except InvalidKey:
            return False
        return True

    def to_doc(self) -> dict:
        return {"salt": self.salt.hex(), "iterations": self.iterations, "digest": self.digest.hex()}

    @classmethod
    def from_doc(cls, doc: dict) -> "PasswordVerifier":
        return cls(bytes.fromhex(doc["salt"]), int(doc["iterations"]), bytes.fromhex(doc["digest"]))


@dataclass
class UserRecord:
    em: str
    pwd_verifier: PasswordVerifier
    aid: SecretKey
    salt: Salt
    reg_fburl: FbUrl
    bt1: Optional[BluetoothAddress] = None
    n1: Optional[Nonce10] = None
    sid: Optional[SessionId] = None
    token: Optional[ReplayToken] = None
    session_state: SessionState = SessionState.IDLE
    session_deadline: Optional[int] = None
    # session bookkeeping beyond the protocol tuple
    identified: bool = False
    login_fburl: Optional[FbUrl] = None
    fd_endpoint: Optional[str] = None
    sd_endpoint: Optional[str] = None
    rotation_env: Optional[EncryptedEnvelope] = field(default=None, repr=False)

    def reset_session(self) -> None:
        self.bt1 = None
        self.n1 = None
        self.sid = None
        self.token = None
        self.session_state = SessionState.IDLE
        self.session_deadline = None
        self.identified = False
        self.login_fburl = None
        self.fd_endpoint = None
        self.sd_endpoint = None
        self.rotation_env = None

    def expired(self, now: int) -> bool:
        return self.session_deadline is not None and self.session_deadline <= now

    def to_doc(self, aid_next: SecretKey | None = None) -> dict:
        def hx(value) -> str | None:
            return None if value is None else value.value.hex()

        return {
            "em": self.em,
            "pwd_verifier": self.pwd_verifier.to_doc(),
            "aid": self.aid.value.hex(),
            "aid_next": hx(aid_next),
            "salt": self.salt.value.hex(),
            "reg_fburl": self.reg_fburl.id,
            "bt1": None if self.bt1 is None else str(self.bt1),
            "n1": None if self.n1 is None else self.n1.digits,
            "sid": hx(self.sid),
            "token": hx(self.token),
            "session_state": self.session_state.value,
            "session_deadline": self.session_deadline,
            "identified": self.identified,
            "login_fburl": None if self.login_fburl is None else self.login_fburl.id,
            "fd_endpoint": self.fd_endpoint,
            "sd_endpoint": self.sd_endpoint,
            "rotation_env": None if self.rotation_env is None else self.rotation_env.hex(),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> tuple["UserRecord", SecretKey | None]:
        def opt(key: str, build):
            return None if doc.get(key) is None else build(doc[key])

        record = cls(
            em=doc["em"],
            pwd_verifier=PasswordVerifier.from_doc(doc["pwd_verifier"]),
            aid=SecretKey(bytes.fromhex(doc["aid"])),
            salt=Salt(bytes.fromhex(doc["salt"])),
            reg_fburl=FbUrl(doc["reg_fburl"]),
            bt1=opt("bt1", BluetoothAddress.parse),
            n1=opt("n1", Nonce10),
            sid=opt("sid", lambda h: SessionId(bytes.fromhex(h))),
            token=opt("token", lambda h: ReplayToken(bytes.fromhex(h))),
            session_state=SessionState(doc["session_state"]),
            session_deadline=doc.get("session_deadline"),
            identified=bool(doc.get("identified", False)),
            login_fburl=opt("login_fburl", FbUrl),
            fd_endpoint=doc.get("fd_endpoint"),
            sd_endpoint=doc.get("sd_endpoint"),
            rotation_env=opt("rotation_env", EncryptedEnvelope.from_hex),
        )
        return record, opt("aid_next", lambda h: SecretKey(bytes.fromhex(h)))

class ServerStore:
    """Committed user records, pending rotations and the consumed-token ledger."""

    def __init__(self, root: Path | None = None) -> None:
        self.root = None if root is None else Path(root)
        self.records: dict[str, UserRecord] = {}
        self.pending_rotation: dict[str, SecretKey] = {}
        self.consumed_envelopes: set[str] = set()
        self.consumed_tokens: set[bytes] = set()

    def __contains__(self, em: str) -> bool:
        return em in self.records

    def __iter__(self) -> Iterator[UserRecord]:
        return iter([self.records[em] for em in sorted(self.records)])

    def get(self, em: str) -> UserRecord | None:
        return self.records.get(em)

    def require(self, em: str) -> UserRecord:
        record = self.records.get(em)
        if record is None:
            raise UnknownEmail(em)
        return record

    def _user_path(self, em: str) -> Path:
        assert self.root is not None
        return self.root / "users" / f"{hashlib.sha256(em.encode('utf-8')).hexdigest()[:32]}.json"

    def save(self, record: UserRecord) -> None:
        """Write the record's document; new records and session updates alike."""
        self.records[record.em] = record
        if self.root is not None:
            write_json_atomic(self._user_path(record.em), record.to_doc(self.pending_rotation.get(record.em)))

    def set_pending_rotation(self, record: UserRecord, aid_next: SecretKey) -> None:
        self.pending_rotation[record.em] = aid_next
        self.save(record)

    def discard_pending_rotation(self, record: UserRecord) -> None:
        if self.pending_rotation.pop(record.em, None) is not None:
            logger.info("rotation_discarded", em=record.em)

    def replace_aid(self, record: UserRecord) -> SecretKey:
        """The pending next AID becomes the live AID."""
        aid_next = self.pending_rotation.pop(record.em)
        record.aid = aid_next
        return aid_next

    def mark_consumed(self, envelope_digest: str, token: ReplayToken) -> None:
        self.consumed_envelopes.add(envelope_digest)
        self.consumed_tokens.add(token.value)
        if self.root is not None:
            write_json_atomic(
                self.root / "consumed_tokens.json",
                {
                    "envelopes": sorted(self.consumed_envelopes),
                    "tokens": sorted(t.hex() for t in self.consumed_tokens),
                },
            )

    def is_consumed(self, envelope_digest: str) -> bool:
        return envelope_digest in self.consumed_envelopes

    @classmethod
    def load(cls, root: Path) -> "ServerStore":
        store = cls(root)
        users_dir = Path(root) / "users"
        if users_dir.exists():
            for path in sorted(users_dir.glob("*.json")):
                doc = read_json(path)
                if doc is None:
                    continue
                record, aid_next = UserRecord.from_doc(doc)
                store.records[record.em] = record
                if aid_next is not None:
                    store.pending_rotation[record.em] = aid_next
        consumed = read_json(Path(root) / "consumed_tokens.json")
        if consumed:
            store.consumed_envelopes = set(consumed.get("envelopes", []))
            store.consumed_tokens = {bytes.fromhex(t) for t in consumed.get("tokens", [])}
        logger.info("store_loaded", root=str(root), users=len(store.records))
        return store
