"""State machines for the phone app (first device) and the desktop (second device).

Agents are message driven: ``handle(msg, now)`` returns the messages the agent
wants sent. A message the current phase does not expect raises
``InvalidState`` and leaves the agent untouched.

The first device persists only ``{sk, enc_aid_blob, journal}``. The journal
exists between an AID rotation and the matching login result; it keeps the
previous blob and the sealed OK challenge so a crash cannot strand the device
on an AID the server never adopted.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Union

import structlog

from src.config import OK_CHALLENGE, SESSION_DEADLINE_MS
from src.protocol import crypto_core
from src.protocol.biometric import FbUrl, IdentityProfile, capture
from src.protocol.crypto_core import (
    EncryptedEnvelope,
    Nonce10,
    RandomSource,
    ReplayToken,
    Salt,
    SecretKey,
    auth_keys,
    blob_keys,
    derive_bt_key,
    gen_nonce10,
    identifier_keys,
    keys_from_aid,
)
from src.protocol.errors import (
    Bt1NotFound,
    IdentificationFailed,
    InvalidState,
    LoginFailed,
    MacMismatch,
    MalformedAuthString,
    NothingStaged,
)
from src.protocol.jsonfile import read_json, write_json_atomic
from src.protocol.messages import (
    AuthString,
    MessageKind,
    ProtocolMessage,
    SessionId,
    auth_string_parts,
    decode_match,
    encode_auth_string,
    fixed_token,
    gen_session_id,
    message,
)
from src.protocol.trace import NullTracer, SealTracer, traced_seal
from src.sim.channels import BluetoothAddress

logger = structlog.get_logger()


@dataclass(frozen=True)
class ScanRequest:
    scanner: str
    target: BluetoothAddress


@dataclass(frozen=True)
class UiLine:
    device: str
    text: str
    typed: bool = False


Outgoing = Union[ProtocolMessage, ScanRequest]


class DeviceStorage:
    """Persistent storage of one device: a JSON document, optionally mirrored to disk."""

    def __init__(self, path: Path | None = None) -> None:
        self.path = None if path is None else Path(path)
        self._doc: str | None = None

    def write(self, doc: dict) -> None:
        self._doc = json.dumps(doc, sort_keys=True)
        if self.path is not None:
            write_json_atomic(self.path, doc)

    def read(self) -> dict | None:
        if self._doc is None and self.path is not None:
            on_disk = read_json(self.path)
            self._doc = None if on_disk is None else json.dumps(on_disk, sort_keys=True)
        return None if self._doc is None else json.loads(self._doc)

    def raw(self) -> str:
        return self._doc or ""


@dataclass(frozen=True)
class RotationJournal:
    em: str
    alternate_blob: EncryptedEnvelope
    ok_env: EncryptedEnvelope | None

    def to_doc(self) -> dict:
        return {
            "em": self.em,
            "alternate_blob": self.alternate_blob.hex(),
            "ok_env": None if self.ok_env is None else self.ok_env.hex(),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "RotationJournal":
        ok = doc.get("ok_env")
        return cls(
            doc["em"],
            EncryptedEnvelope.from_hex(doc["alternate_blob"]),
            None if ok is None else EncryptedEnvelope.from_hex(ok),
        )


class FdPhase(str, Enum):
    IDLE = "idle"
    AWAITING_REG_RESPONSE = "awaiting_reg_response"
    AWAITING_REG_RESULT = "awaiting_reg_result"
    AWAITING_FACE_URL = "awaiting_face_url"
    AWAITING_CONTEXT_ACK = "awaiting_context_ack"
    AWAITING_SALT = "awaiting_salt"
    STAGED = "staged"
    AWAITING_ROTATION = "awaiting_rotation"
    AWAITING_RESULT = "awaiting_result"
    RECOVERING = "recovering"


_FD_EXPECTS: dict[FdPhase, frozenset[MessageKind]] = {
    FdPhase.IDLE: frozenset(),
    FdPhase.AWAITING_REG_RESPONSE: frozenset({MessageKind.REGISTER_RESPONSE, MessageKind.ERROR}),
    FdPhase.AWAITING_REG_RESULT: frozenset({MessageKind.REGISTER_RESULT, MessageKind.ERROR}),
    FdPhase.AWAITING_FACE_URL: frozenset({MessageKind.FACE_UPLOADED, MessageKind.ERROR}),
    FdPhase.AWAITING_CONTEXT_ACK: frozenset({MessageKind.LOGIN_CONTEXT_ACK, MessageKind.ERROR}),
    FdPhase.AWAITING_SALT: frozenset({MessageKind.IDENTIFY_SALT, MessageKind.ERROR}),
    FdPhase.STAGED: frozenset(),
    FdPhase.AWAITING_ROTATION: frozenset({MessageKind.ROTATE, MessageKind.ERROR}),
    FdPhase.AWAITING_RESULT: frozenset({MessageKind.LOGIN_RESULT, MessageKind.ERROR}),
    FdPhase.RECOVERING: frozenset({MessageKind.LOGIN_RESULT, MessageKind.ERROR}),
}


class FirstDevice:
    def __init__(
        self,
        device_id: str,
        sk: SecretKey,
        bt1: BluetoothAddress,
        rng: RandomSource,
        server_id: str = "server",
        tracer: SealTracer | None = None,
        storage: DeviceStorage | None = None,
        send_rotation_ack: bool = False,
        local_timeout_ms: int = SESSION_DEADLINE_MS,
    ) -> None:
        self.id = device_id
        self.sk = sk
        self.bt1 = bt1
        self.rng = rng
        self.server_id = server_id
        self.tracer = tracer or NullTracer()
        self.storage = storage or DeviceStorage()
        self.send_rotation_ack = send_rotation_ack
        self.local_timeout_ms = local_timeout_ms

        self.enc_aid_blob: EncryptedEnvelope | None = None
        self.journal: RotationJournal | None = None
        self.phase = FdPhase.IDLE
        self.tap_target: str | None = None
        self.registered: bool | None = None
        self.completed_logins = 0
        self.last_error: str | None = None
        self.ui: list[UiLine] = []
        self._reset_volatile()
        self._persist()

    # Persistence

    def persisted_state(self) -> dict:
        return {
            "sk": self.sk.value.hex(),
            "enc_aid_blob": None if self.enc_aid_blob is None else self.enc_aid_blob.hex(),
            "journal": None if self.journal is None else self.journal.to_doc(),
        }

    def _persist(self) -> None:
        self.storage.write(self.persisted_state())

    def restart(self) -> None:
        """Drop everything volatile and reload from persistent storage."""
        doc = self.storage.read() or {}
        self.sk = SecretKey(bytes.fromhex(doc["sk"])) if doc.get("sk") else self.sk
        blob = doc.get("enc_aid_blob")
        self.enc_aid_blob = None if blob is None else EncryptedEnvelope.from_hex(blob)
        journal = doc.get("journal")
        self.journal = None if journal is None else RotationJournal.from_doc(journal)
        self._reset_volatile()
        self.phase = FdPhase.RECOVERING if self.journal else FdPhase.IDLE
        logger.info("device_restarted", device=self.id, journal=self.journal is not None)

    def install_blob(self, blob: EncryptedEnvelope) -> None:
        """Load an AID blob obtained outside the registration flow, e.g. copied from another install."""
        self.enc_aid_blob = blob
        self._persist()

    def _reset_volatile(self) -> None:
        self.pending_auth_string: bytes | None = None
        self._em: str | None = None
        self._pwd: str | None = None
        self._profile: IdentityProfile | None = None
        self._n1: Nonce10 | None = None
        self._sid: SessionId | None = None
        self._login_fburl: FbUrl | None = None
        self._fallback_tried = False
        self.local_deadline: int | None = None

    def _settle(self) -> None:
        self.phase = FdPhase.RECOVERING if self.journal else FdPhase.IDLE

    def _show(self, text: str, typed: bool = False) -> None:
        self.ui.append(UiLine(self.id, text, typed))

    def drain_ui(self) -> list[UiLine]:
        lines, self.ui = self.ui, []
        return lines

    def _to_server(self, kind: MessageKind, **body) -> ProtocolMessage:
        return message(kind, self.id, self.server_id, **body)

    # Registration

    def fd_register(self, em: str, pwd: str, profile: IdentityProfile) -> list[Outgoing]:
        if self.phase is not FdPhase.IDLE:
            raise InvalidState(f"cannot register in phase {self.phase.value}")
        self._show(em, typed=True)
        self._show("*" * len(pwd), typed=True)
        self._em = em
        self.registered = None
        embedding = capture(profile, self.rng)
        self.phase = FdPhase.AWAITING_REG_RESPONSE
        return [self._to_server(MessageKind.REGISTER_REQUEST, em=em, pwd=pwd, embedding=embedding)]

    def _on_register_response(self, msg: ProtocolMessage) -> list[Outgoing]:
        self.enc_aid_blob = msg["env"]
        self._persist()
        try:
            aid = SecretKey(crypto_core.open(blob_keys(self.sk, msg["salt"]), self.enc_aid_blob))
        except MacMismatch:
            self._abort_registration("MacMismatch")
            return []
        confirm = traced_seal(self.tracer, self.id, keys_from_aid(aid), fixed_token(), self.rng)
        self.phase = FdPhase.AWAITING_REG_RESULT
        return [self._to_server(MessageKind.REGISTER_CONFIRM, em=msg["em"], env=confirm)]

    def _abort_registration(self, code: str) -> None:
        self.enc_aid_blob = None
        self._persist()
        self.registered = False
        self.last_error = code
        self._reset_volatile()
        self.phase = FdPhase.IDLE
        logger.info("registration_failed", device=self.id, code=code)

    # Login

    def fd_begin_login(
        self,
        em: str,
        profile: IdentityProfile,
        tap_target: str | None = None,
    ) -> list[Outgoing]:
        if self.phase not in (FdPhase.IDLE, FdPhase.RECOVERING):
            raise InvalidState(f"cannot begin login in phase {self.phase.value}")
        if self.enc_aid_blob is None:
            raise InvalidState("device is not registered")
        self._reset_volatile()
        self.tap_target = tap_target
        self._em = em
        self._profile = profile
        self._show(em, typed=True)
        return self._upload_face()

    def _upload_face(self) -> list[Outgoing]:
        self._sid = gen_session_id(self.rng)
        embedding = capture(self._profile, self.rng)
        self.phase = FdPhase.AWAITING_FACE_URL
        return [self._to_server(MessageKind.FACE_UPLOAD, embedding=embedding)]

    def _on_face_uploaded(self, msg: ProtocolMessage) -> list[Outgoing]:
        self._login_fburl = FbUrl(msg["fburl"])
        self._n1 = gen_nonce10(self.rng)
        self.phase = FdPhase.AWAITING_CONTEXT_ACK
        return [self._to_server(MessageKind.LOGIN_CONTEXT, em=self._em, n1=self._n1, bt1=self.bt1)]

    def _on_context_ack(self, msg: ProtocolMessage) -> list[Outgoing]:
        # wraps the stored blob as is; S is not known yet
        identifier = traced_seal(
            self.tracer, self.id, identifier_keys(self.sk, self._n1), self.enc_aid_blob.to_bytes(), self.rng
        )
        self.phase = FdPhase.AWAITING_SALT
        return [self._to_server(MessageKind.IDENTIFY, em=self._em, env=identifier)]

    def _on_identify_salt(self, msg: ProtocolMessage) -> list[Outgoing]:
        salt: Salt = msg["salt"]
        try:
            aid = SecretKey(crypto_core.open(blob_keys(self.sk, salt), self.enc_aid_blob))
        except MacMismatch:
            self.last_error = "MacMismatch"
            self._reset_volatile()
            self._settle()
            return []
        auth = AuthString(self._em, self._login_fburl, self._sid)
        env = traced_seal(
            self.tracer,
            self.id,
            auth_keys(aid, salt),
            encode_auth_string(auth),
            self.rng,
            parts=auth_string_parts(auth),
        )
        self.pending_auth_string = env.to_bytes()
        self.phase = FdPhase.STAGED
        self._show("Tap your phone on the computer to finish signing in")
        return []

    def fd_nfc_tap(self, target: str, send: Callable[[ProtocolMessage], object], now: int = 0) -> None:
        """Hand the staged auth string to ``target``; ``send`` enforces proximity."""
        if self.pending_auth_string is None or self.phase is not FdPhase.STAGED:
            raise NothingStaged("no auth string is staged")
        payload = EncryptedEnvelope.from_bytes(self.pending_auth_string)
        send(message(MessageKind.NFC_AUTH_STRING, self.id, target, env=payload))
        self.pending_auth_string = None
        self.local_deadline = now + self.local_timeout_ms
        self.phase = FdPhase.AWAITING_ROTATION

    def fd_complete_rotation(
        self,
        salt: Salt,
        enc_aid_next: EncryptedEnvelope,
        presenter: str = "server",
    ) -> EncryptedEnvelope:
        old_blob = self.enc_aid_blob
        aid = SecretKey(crypto_core.open(blob_keys(self.sk, salt), old_blob))
        aid_next = crypto_core.open(keys_from_aid(aid), enc_aid_next)
        self.tracer.accepted(self.id, "rotation", enc_aid_next, presenter)
        new_blob = traced_seal(self.tracer, self.id, blob_keys(self.sk, salt), aid_next, self.rng)
        ok_env = traced_seal(self.tracer, self.id, keys_from_aid(aid), OK_CHALLENGE, self.rng)
        # journal and new blob land in one persistent write
        self.journal = RotationJournal(self._em, old_blob, ok_env)
        self.enc_aid_blob = new_blob
        self._persist()
        return ok_env

    def _on_rotate(self, msg: ProtocolMessage) -> list[Outgoing]:
        try:
            ok_env = self.fd_complete_rotation(msg["salt"], msg["env"], presenter=msg.sender)
        except MacMismatch:
            self.last_error = "MacMismatch"
            logger.warning("rotation_rejected", device=self.id)
            self._reset_volatile()
            self._settle()
            return []
        self.phase = FdPhase.AWAITING_RESULT
        out: list[Outgoing] = []
        if self.send_rotation_ack:
            out.append(self._to_server(MessageKind.ROTATION_ACK, em=self._em))
        out.append(self._to_server(MessageKind.KEY_CONFIRM, em=self._em, env=ok_env))
        return out

    def _on_login_result(self, msg: ProtocolMessage) -> list[Outgoing]:
        if not msg["ok"]:
            return self._on_error(msg["error"] or "LoginFailed")
        self.journal = None
        self._persist()
        self.completed_logins += 1
        self.last_error = None
        self._reset_volatile()
        self.phase = FdPhase.IDLE
        self._show(f"Signed in as {msg['em']}")
        logger.info("login_completed", device=self.id, em=msg["em"])
        return []

    def recover(self) -> list[Outgoing]:
        """Resend the journaled OK after a restart."""
        if self.journal is None or self.journal.ok_env is None:
            return []
        self.phase = FdPhase.RECOVERING
        self._em = self.journal.em
        return [self._to_server(MessageKind.KEY_CONFIRM, em=self.journal.em, env=self.journal.ok_env)]

    def _on_error(self, code: str) -> list[Outgoing]:
        self.last_error = code
        phase = self.phase
        if phase in (FdPhase.AWAITING_REG_RESPONSE, FdPhase.AWAITING_REG_RESULT):
            self._abort_registration(code)
            return []
        if phase in (FdPhase.AWAITING_RESULT, FdPhase.RECOVERING) and self.journal is not None:
            if code == LoginFailed.code:
                # the server kept the old AID
                self.enc_aid_blob = self.journal.alternate_blob
                self.journal = None
                self._persist()
            else:
                self.journal = RotationJournal(self.journal.em, self.journal.alternate_blob, None)
                self._persist()
        if (
            code == IdentificationFailed.code
            and phase is FdPhase.AWAITING_SALT
            and self.journal is not None
            and not self._fallback_tried
        ):
            # the server may never have adopted the rotated AID: retry once with the previous blob
            current = self.enc_aid_blob
            self.enc_aid_blob = self.journal.alternate_blob
            self.journal = RotationJournal(self.journal.em, current, None)
            self._persist()
            self._fallback_tried = True
            logger.info("fallback_to_previous_blob", device=self.id)
            return self._upload_face()
        logger.info("device_error", device=self.id, phase=phase.value, code=code)
        self._reset_volatile()
        self._settle()
        return []

    # Dispatch

    def handle(self, msg: ProtocolMessage, now: int) -> list[Outgoing]:
        if msg.kind not in _FD_EXPECTS[self.phase]:
            raise InvalidState(f"{self.id} does not expect {msg.kind.value} in phase {self.phase.value}")
        if msg.kind is MessageKind.ERROR:
            return self._on_error(msg["code"])
        if msg.kind is MessageKind.REGISTER_RESPONSE:
            return self._on_register_response(msg)
        if msg.kind is MessageKind.REGISTER_RESULT:
            self.registered = bool(msg["ok"])
            self.phase = FdPhase.IDLE
            self._reset_volatile()
            self._show("Registration complete")
            return []
        if msg.kind is MessageKind.FACE_UPLOADED:
            return self._on_face_uploaded(msg)
        if msg.kind is MessageKind.LOGIN_CONTEXT_ACK:
            return self._on_context_ack(msg)
        if msg.kind is MessageKind.IDENTIFY_SALT:
            return self._on_identify_salt(msg)
        if msg.kind is MessageKind.ROTATE:
            return self._on_rotate(msg)
        return self._on_login_result(msg)

    def tick(self, now: int) -> None:
        """Local timer: forget a staged or tapped login once it runs out."""
        if self.local_deadline is not None and now >= self.local_deadline and self.phase in (
            FdPhase.STAGED,
            FdPhase.AWAITING_ROTATION,
        ):
            logger.info("local_timer_expired", device=self.id)
            self._reset_volatile()
            self._settle()


class SdPhase(str, Enum):
    IDLE = "idle"
    HOLDING = "holding"
    AWAITING_MATCH = "awaiting_match"
    SCANNING = "scanning"
    AWAITING_RESULT = "awaiting_result"


_SD_EXPECTS: dict[SdPhase, frozenset[MessageKind]] = {
    SdPhase.IDLE: frozenset({MessageKind.NFC_AUTH_STRING}),
    SdPhase.HOLDING: frozenset({MessageKind.NFC_AUTH_STRING}),
    SdPhase.AWAITING_MATCH: frozenset({MessageKind.MATCH, MessageKind.ERROR}),
    SdPhase.SCANNING: frozenset(),
    SdPhase.AWAITING_RESULT: frozenset({MessageKind.LOGIN_RESULT, MessageKind.ERROR}),
}


class SecondDevice:
    def __init__(
        self,
        device_id: str,
        bt2: BluetoothAddress,
        rng: RandomSource,
        server_id: str = "server",
        tracer: SealTracer | None = None,
        submits: bool = True,
        proximity_check: bool = True,
        local_timeout_ms: int = SESSION_DEADLINE_MS,
    ) -> None:
        self.id = device_id
        self.bt2 = bt2
        self.rng = rng
        self.server_id = server_id
        self.tracer = tracer or NullTracer()
        self.submits = submits
        self.proximity_check = proximity_check
        self.local_timeout_ms = local_timeout_ms
        self.phase = SdPhase.IDLE
        self.logged_in_as: str | None = None
        self.last_error: str | None = None
        self.ui: list[UiLine] = []
        self._clear()

    def _clear(self) -> None:
        self.received_auth_string: bytes | None = None
        self.match_token: ReplayToken | None = None
        self._sid: SessionId | None = None
        self._bt1: BluetoothAddress | None = None
        self.local_deadline: int | None = None

    def _abort(self, code: str) -> None:
        self.last_error = code
        self._clear()
        self.phase = SdPhase.IDLE
        logger.info("desktop_aborted", device=self.id, code=code)

    def _show(self, text: str) -> None:
        self.ui.append(UiLine(self.id, text))

    def drain_ui(self) -> list[UiLine]:
        lines, self.ui = self.ui, []
        return lines

    def receive_auth_string(self, raw: bytes, now: int = 0) -> None:
        self.received_auth_string = raw
        self.local_deadline = now + self.local_timeout_ms
        self.phase = SdPhase.HOLDING
        self._show("Phone tapped, verifying")

    def sd_receive_and_submit(self) -> list[Outgoing]:
        if self.received_auth_string is None:
            raise InvalidState("no auth string received")
        env = EncryptedEnvelope.from_bytes(self.received_auth_string)
        self.phase = SdPhase.AWAITING_MATCH
        return [message(MessageKind.AUTH_SUBMIT, self.id, self.server_id, env=env, bt2=self.bt2)]

    def sd_on_match(self, env: EncryptedEnvelope, sid: SessionId) -> list[Outgoing]:
        try:
            match = decode_match(crypto_core.open(derive_bt_key(self.bt2, sid.value), env))
        except (MacMismatch, MalformedAuthString) as exc:
            self._abort(exc.code)
            raise
        self.match_token = match.token
        self._sid = sid
        self._bt1 = match.bt1
        if not self.proximity_check:
            return self._send_token()
        self.phase = SdPhase.SCANNING
        return [ScanRequest(self.id, match.bt1)]

    def on_scan_result(self, found: bool) -> list[Outgoing]:
        if self.phase is not SdPhase.SCANNING:
            raise InvalidState(f"{self.id} is not scanning")
        if not found:
            self._abort(Bt1NotFound.code)
            raise Bt1NotFound(f"{self._bt1 or 'BT1'} not in range of {self.id}")
        return self._send_token()

    def _send_token(self) -> list[Outgoing]:
        env = traced_seal(
            self.tracer, self.id, derive_bt_key(self._bt1, self._sid.value), self.match_token.value, self.rng
        )
        self.phase = SdPhase.AWAITING_RESULT
        return [message(MessageKind.PROXIMITY_TOKEN, self.id, self.server_id, env=env)]

    def handle(self, msg: ProtocolMessage, now: int) -> list[Outgoing]:
        if msg.kind not in _SD_EXPECTS[self.phase]:
            raise InvalidState(f"{self.id} does not expect {msg.kind.value} in phase {self.phase.value}")
        if msg.kind is MessageKind.NFC_AUTH_STRING:
            self.receive_auth_string(msg["env"].to_bytes(), now)
            return self.sd_receive_and_submit() if self.submits else []
        if msg.kind is MessageKind.MATCH:
            return self.sd_on_match(msg["env"], msg["sid"])
        if msg.kind is MessageKind.ERROR:
            self._abort(msg["code"])
            return []
        if msg["ok"]:
            self.logged_in_as = msg["em"]
            self._show(f"Signed in as {msg['em']}")
            self._clear()
            self.phase = SdPhase.IDLE
        else:
            self._abort(msg["error"] or "LoginFailed")
        return []

    def tick(self, now: int) -> None:
        if self.local_deadline is not None and now >= self.local_deadline and self.phase is not SdPhase.IDLE:
            self._abort("LocalTimeout")


Agent = Union[FirstDevice, SecondDevice]
