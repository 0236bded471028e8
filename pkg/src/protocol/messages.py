"""Canonical encodings for everything that is sealed, tapped or sent.

Sealed payloads use length-prefixed binary so both ends agree byte for byte.
Transport framing is strict JSON: one schema per message kind, binary fields
hex-wrapped, keys sorted. ``check_step_coverage`` runs at import and refuses to
load if the registration and login step tables and the schemas drift apart.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

from src.config import FIXED_TOKEN, MATCH_TAG, PROTOCOL_VERSION
from src.protocol.biometric import FaceEmbedding, FbUrl
from src.protocol.crypto_core import (
    EncryptedEnvelope,
    Nonce10,
    RandomSource,
    ReplayToken,
    Salt,
    TOKEN_LEN,
)
from src.protocol.errors import MalformedAuthString, MalformedMessage, ProtocolError
from src.sim.channels import BluetoothAddress

SID_LEN = 16
_LEN = struct.Struct(">I")


@dataclass(frozen=True)
class SessionId:
    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, bytes) or len(self.value) != SID_LEN:
            raise ValueError("SessionId must be exactly 16 bytes")


def gen_session_id(rng: RandomSource) -> SessionId:
    return SessionId(rng.bytes(SID_LEN))


# Sealed payloads


@dataclass(frozen=True)
class AuthString:
    em: str
    login_fburl: FbUrl
    sid: SessionId


@dataclass(frozen=True)
class MatchMessage:
    token: ReplayToken
    bt1: BluetoothAddress
    tag: bytes = MATCH_TAG


def _pack(*fields: bytes) -> bytes:
    return b"".join(_LEN.pack(len(f)) + f for f in fields)


def _unpack(raw: bytes, count: int) -> list[bytes]:
    fields, pos = [], 0
    for _ in range(count):
        if pos + _LEN.size > len(raw):
            raise MalformedAuthString("truncated length prefix")
        (n,) = _LEN.unpack_from(raw, pos)
        pos += _LEN.size
        if pos + n > len(raw):
            raise MalformedAuthString("field runs past end of input")
        fields.append(raw[pos : pos + n])
        pos += n
    if pos != len(raw):
        raise MalformedAuthString("trailing bytes after last field")
    return fields


def encode_auth_string(a: AuthString) -> bytes:
    return _pack(a.em.encode("utf-8"), a.login_fburl.id.encode("utf-8"), a.sid.value)


def decode_auth_string(b: bytes) -> AuthString:
    em, fburl, sid = _unpack(b, 3)
    if len(sid) != SID_LEN:
        raise MalformedAuthString("session id must be 16 bytes")
    try:
        return AuthString(em.decode("utf-8"), FbUrl(fburl.decode("utf-8")), SessionId(sid))
    except UnicodeDecodeError as exc:
        raise MalformedAuthString("text field is not UTF-8") from exc


def auth_string_parts(a: AuthString) -> tuple[bytes, ...]:
    return (a.em.encode("utf-8"), a.login_fburl.id.encode("utf-8"), a.sid.value)


def encode_match(m: MatchMessage) -> bytes:
    return _pack(m.tag, m.token.value, str(m.bt1).encode("ascii"))


def decode_match(b: bytes) -> MatchMessage:
    tag, token, bt1 = _unpack(b, 3)
    if tag != MATCH_TAG or len(token) != TOKEN_LEN:
        raise MalformedAuthString("not a MATCH payload")
    try:
        return MatchMessage(ReplayToken(token), BluetoothAddress.parse(bt1.decode("ascii")), tag)
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedAuthString("bad address in MATCH payload") from exc


def fixed_token() -> bytes:
    return FIXED_TOKEN


# Transport framing


class MessageKind(str, Enum):
    REGISTER_REQUEST = "REGISTER_REQUEST"
    REGISTER_RESPONSE = "REGISTER_RESPONSE"
    REGISTER_CONFIRM = "REGISTER_CONFIRM"
    REGISTER_RESULT = "REGISTER_RESULT"
    FACE_UPLOAD = "FACE_UPLOAD"
    FACE_UPLOADED = "FACE_UPLOADED"
    LOGIN_CONTEXT = "LOGIN_CONTEXT"
    LOGIN_CONTEXT_ACK = "LOGIN_CONTEXT_ACK"
    IDENTIFY = "IDENTIFY"
    IDENTIFY_SALT = "IDENTIFY_SALT"
    NFC_AUTH_STRING = "NFC_AUTH_STRING"
    AUTH_SUBMIT = "AUTH_SUBMIT"
    MATCH = "MATCH"
    PROXIMITY_TOKEN = "PROXIMITY_TOKEN"
    ROTATE = "ROTATE"
    ROTATION_ACK = "ROTATION_ACK"
    KEY_CONFIRM = "KEY_CONFIRM"
    LOGIN_RESULT = "LOGIN_RESULT"
    ERROR = "ERROR"


class FieldType(Enum):
    STR = "str"
    BOOL = "bool"
    BYTES = "bytes"
    ENV = "env"
    SALT = "salt"
    NONCE = "nonce"
    BT = "bt"
    SID = "sid"
    EMBEDDING = "embedding"


_F = FieldType

SCHEMAS: dict[MessageKind, dict[str, FieldType]] = {
    MessageKind.REGISTER_REQUEST: {"em": _F.STR, "pwd": _F.STR, "embedding": _F.EMBEDDING},
    MessageKind.REGISTER_RESPONSE: {"em": _F.STR, "salt": _F.SALT, "env": _F.ENV},
    MessageKind.REGISTER_CONFIRM: {"em": _F.STR, "env": _F.ENV},
    MessageKind.REGISTER_RESULT: {"em": _F.STR, "ok": _F.BOOL},
    MessageKind.FACE_UPLOAD: {"embedding": _F.EMBEDDING},
    MessageKind.FACE_UPLOADED: {"fburl": _F.STR},
    MessageKind.LOGIN_CONTEXT: {"em": _F.STR, "n1": _F.NONCE, "bt1": _F.BT},
    MessageKind.LOGIN_CONTEXT_ACK: {"em": _F.STR},
    MessageKind.IDENTIFY: {"em": _F.STR, "env": _F.ENV},
    MessageKind.IDENTIFY_SALT: {"em": _F.STR, "salt": _F.SALT},
    MessageKind.NFC_AUTH_STRING: {"env": _F.ENV},
    MessageKind.AUTH_SUBMIT: {"env": _F.ENV, "bt2": _F.BT},
    MessageKind.MATCH: {"env": _F.ENV, "sid": _F.SID},
    MessageKind.PROXIMITY_TOKEN: {"env": _F.ENV},
    MessageKind.ROTATE: {"em": _F.STR, "salt": _F.SALT, "env": _F.ENV},
    MessageKind.ROTATION_ACK: {"em": _F.STR},
    MessageKind.KEY_CONFIRM: {"em": _F.STR, "env": _F.ENV},
    MessageKind.LOGIN_RESULT: {"em": _F.STR, "ok": _F.BOOL, "sid": _F.BYTES, "error": _F.STR},
    MessageKind.ERROR: {"code": _F.STR, "detail": _F.STR},
}

_PY_TYPES: dict[FieldType, type] = {
    _F.STR: str,
    _F.BOOL: bool,
    _F.BYTES: bytes,
    _F.ENV: EncryptedEnvelope,
    _F.SALT: Salt,
    _F.NONCE: Nonce10,
    _F.BT: BluetoothAddress,
    _F.SID: SessionId,
    _F.EMBEDDING: FaceEmbedding,
}


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    sender: str
    receiver: str
    body: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        schema = SCHEMAS.get(self.kind)
        if schema is None:
            raise MalformedMessage("kind", f"unknown kind {self.kind!r}")
        if set(self.body) != set(schema):
            raise MalformedMessage("body", f"fields {sorted(self.body)} do not match {self.kind.value}")
        for name, ftype in schema.items():
            if type(self.body[name]) is not _PY_TYPES[ftype]:
                raise MalformedMessage(f"body.{name}", f"expected {ftype.value}")

    def __getitem__(self, name: str) -> Any:
        return self.body[name]


def message(kind: MessageKind, sender: str, receiver: str, **body: Any) -> ProtocolMessage:
    return ProtocolMessage(kind, sender, receiver, dict(body))


def error_message(sender: str, receiver: str, exc: ProtocolError) -> ProtocolMessage:
    return message(MessageKind.ERROR, sender, receiver, code=exc.code, detail=exc.detail)


def _encode_field(ftype: FieldType, value: Any) -> Any:
    if ftype in (_F.STR, _F.BOOL):
        return value
    if ftype in (_F.BYTES, _F.ENV):
        return value.hex()
    if ftype in (_F.SALT, _F.SID):
        return value.value.hex()
    if ftype is _F.NONCE:
        return value.digits
    if ftype is _F.BT:
        return str(value)
    return value.to_bytes().hex()


def _decode_field(ftype: FieldType, raw: Any, path: str) -> Any:
    try:
        if ftype is _F.STR:
            if not isinstance(raw, str):
                raise TypeError
            return raw
        if ftype is _F.BOOL:
            if not isinstance(raw, bool):
                raise TypeError
            return raw
        if not isinstance(raw, str):
            raise TypeError
        if ftype is _F.NONCE:
            return Nonce10(raw)
        if ftype is _F.BT:
            return BluetoothAddress.parse(raw)
        data = bytes.fromhex(raw)
        if ftype is _F.BYTES:
            return data
        if ftype is _F.ENV:
            return EncryptedEnvelope.from_bytes(data)
        if ftype is _F.SALT:
            return Salt(data)
        if ftype is _F.SID:
            return SessionId(data)
        return FaceEmbedding.from_bytes(data)
    except MalformedMessage as exc:
        raise MalformedMessage(path, exc.detail) from exc
    except (TypeError, ValueError, ProtocolError) as exc:
        raise MalformedMessage(path, f"not a valid {ftype.value}") from exc


def encode_message(m: ProtocolMessage) -> bytes:
    schema = SCHEMAS[m.kind]
    doc = {
        "v": PROTOCOL_VERSION,
        "kind": m.kind.value,
        "from": m.sender,
        "to": m.receiver,
        "body": {name: _encode_field(ftype, m.body[name]) for name, ftype in schema.items()},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


_ENVELOPE_KEYS = {"v", "kind", "from", "to", "body"}


def decode_message(raw: bytes) -> ProtocolMessage:
    if not raw:
        raise MalformedMessage("$", "empty input")
    try:
        doc = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMessage("$", "not JSON") from exc
    if not isinstance(doc, dict):
        raise MalformedMessage("$", "top level must be an object")
    if set(doc) != _ENVELOPE_KEYS:
        extra = sorted(set(doc) ^ _ENVELOPE_KEYS)
        raise MalformedMessage(extra[0] if extra else "$", "unexpected or missing key")
    if doc["v"] != PROTOCOL_VERSION or isinstance(doc["v"], bool):
        raise MalformedMessage("v", "unsupported version")
    try:
        kind = MessageKind(doc["kind"])
    except (ValueError, TypeError) as exc:
        raise MalformedMessage("kind", f"unknown kind {doc['kind']!r}") from exc
    for key in ("from", "to"):
        if not isinstance(doc[key], str):
            raise MalformedMessage(key, "principal id must be a string")
    body = doc["body"]
    if not isinstance(body, dict):
        raise MalformedMessage("body", "must be an object")
    schema = SCHEMAS[kind]
    mismatched = sorted(set(body) ^ set(schema))
    if mismatched:
        name = mismatched[0]
        raise MalformedMessage(f"body.{name}", "unexpected field" if name in body else "missing field")
    decoded = {name: _decode_field(ftype, body[name], f"body.{name}") for name, ftype in schema.items()}
    return ProtocolMessage(kind, doc["from"], doc["to"], decoded)


# Step table


@dataclass(frozen=True)
class ProtocolStep:
    phase: str
    number: int
    actor: str
    action: str
    kinds: tuple[MessageKind, ...] = ()


_K = MessageKind

ARP_STEPS: tuple[ProtocolStep, ...] = (
    ProtocolStep("ARP", 1, "first", "capture face, send email, password and face", (_K.REGISTER_REQUEST,)),
    ProtocolStep("ARP", 2, "server", "store face embedding, issue REG-FbURL"),
    ProtocolStep("ARP", 3, "server", "generate AID and salt"),
    ProtocolStep("ARP", 4, "server", "send salt and AID sealed under SK+S", (_K.REGISTER_RESPONSE,)),
    ProtocolStep("ARP", 5, "first", "store encrypted AID, recover AID transiently"),
    ProtocolStep("ARP", 6, "first", "send fixed token sealed under AID", (_K.REGISTER_CONFIRM,)),
    ProtocolStep("ARP", 7, "server", "verify fixed token, save the user record"),
    ProtocolStep("ARP", 8, "server", "confirm registration; device discards salt and AID", (_K.REGISTER_RESULT,)),
)

ALP_STEPS: tuple[ProtocolStep, ...] = (
    ProtocolStep(
        "ALP", 1, "first", "capture login face, generate N1, write N1 and BT1",
        (_K.FACE_UPLOAD, _K.FACE_UPLOADED, _K.LOGIN_CONTEXT, _K.LOGIN_CONTEXT_ACK),
    ),
    ProtocolStep("ALP", 2, "first", "send stored AID blob wrapped under N1", (_K.IDENTIFY,)),
    ProtocolStep("ALP", 3, "server", "compare identifier against the stored AID"),
    ProtocolStep("ALP", 4, "server", "send registration salt", (_K.IDENTIFY_SALT,)),
    ProtocolStep("ALP", 5, "first", "build auth string sealed under AID+S"),
    ProtocolStep("ALP", 6, "first", "tap auth string to the second device", (_K.NFC_AUTH_STRING,)),
    ProtocolStep("ALP", 7, "second", "submit auth string and BT2", (_K.AUTH_SUBMIT,)),
    ProtocolStep("ALP", 8, "server", "open auth string, match login face against registration face"),
    ProtocolStep("ALP", 9, "server", "send MATCH and TOKEN sealed under BT2", (_K.MATCH,)),
    ProtocolStep("ALP", 10, "second", "search for BT1 in proximity"),
    ProtocolStep("ALP", 11, "second", "send TOKEN sealed under BT1", (_K.PROXIMITY_TOKEN,)),
    ProtocolStep("ALP", 12, "server", "verify TOKEN, generate AID'"),
    ProtocolStep("ALP", 13, "server", "send salt and AID' sealed under AID", (_K.ROTATE,)),
    ProtocolStep("ALP", 14, "first", "recover AID', replace the stored blob", (_K.ROTATION_ACK,)),
    ProtocolStep("ALP", 15, "first", "send OK sealed under the old AID", (_K.KEY_CONFIRM,)),
    ProtocolStep("ALP", 16, "server", "verify OK, replace AID with AID', report the result", (_K.LOGIN_RESULT,)),
)

INFRASTRUCTURE_KINDS = frozenset({MessageKind.ERROR})


def check_step_coverage() -> None:
    for steps, expected in ((ARP_STEPS, 8), (ALP_STEPS, 16)):
        numbers = [s.number for s in steps]
        if numbers != list(range(1, expected + 1)):
            raise RuntimeError(f"{steps[0].phase} steps are not numbered 1..{expected}: {numbers}")
    seen: dict[MessageKind, ProtocolStep] = {}
    for step in ARP_STEPS + ALP_STEPS:
        for kind in step.kinds:
            if kind in seen:
                raise RuntimeError(f"{kind.value} appears in more than one step")
            if kind not in SCHEMAS:
                raise RuntimeError(f"{kind.value} has no schema")
            seen[kind] = step
    missing = set(MessageKind) - set(seen) - INFRASTRUCTURE_KINDS
    if missing:
        raise RuntimeError(f"kinds without a protocol step: {sorted(k.value for k in missing)}")


check_step_coverage()

STEP_OF_KIND: dict[MessageKind, ProtocolStep] = {
    kind: step for step in ARP_STEPS + ALP_STEPS for kind in step.kinds
}


def alp_step(kind: MessageKind) -> int | None:
    step = STEP_OF_KIND.get(kind)
    return step.number if step is not None and step.phase == "ALP" else None
