"""Verifier server: registration, the server half of login, AID rotation,
session deadlines and replay-token accounting.

Every public operation runs under one lock, so the store sees a single
writer. Session operations take the simulated time ``now`` in milliseconds;
a session whose deadline is ``<= now`` is expired.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from typing import Callable

import structlog

from src.config import (
    MATCH_TAG,
    MATCH_THRESHOLD,
    OK_CHALLENGE,
    PWD_HASH_ITERATIONS,
    SESSION_DEADLINE_MS,
)
from src.protocol import biometric
from src.protocol.biometric import EmbeddingStore, FaceEmbedding, FbUrl
from src.protocol.crypto_core import (
    EncryptedEnvelope,
    Nonce10,
    RandomSource,
    Salt,
    SecretKey,
    auth_keys,
    blob_keys,
    constant_eq,
    derive_bt_key,
    gen_salt,
    gen_secret,
    gen_token,
    identifier_keys,
    keys_from_aid,
    try_open,
)
from src.protocol import crypto_core
from src.protocol.errors import (
    BadPadding,
    BiometricMismatch,
    DuplicateEmail,
    IdentificationFailed,
    InvalidState,
    LoginFailed,
    MacMismatch,
    MalformedMessage,
    NoMatchingUser,
    NotFound,
    ProtocolError,
    RegistrationAborted,
    SessionAlreadyActive,
    SessionExpired,
    TokenAlreadyConsumed,
    TokenMismatch,
)
from src.protocol.messages import (
    MatchMessage,
    MessageKind,
    ProtocolMessage,
    SessionId,
    decode_auth_string,
    encode_match,
    error_message,
    fixed_token,
    message,
)
from src.protocol.store import (
    ROTATION_STATES,
    PasswordVerifier,
    ServerStore,
    SessionState,
    UserRecord,
)
from src.protocol.trace import NullTracer, SealTracer, traced_seal
from src.sim.channels import BluetoothAddress

logger = structlog.get_logger()


@dataclass(frozen=True)
class ServerSettings:
    match_threshold: float = MATCH_THRESHOLD
    session_deadline_ms: int = SESSION_DEADLINE_MS
    pwd_hash_iterations: int = PWD_HASH_ITERATIONS
    token_single_use: bool = True
    separate_rotation_ack: bool = False


@dataclass(frozen=True)
class PendingRegistration:
    em: str
    pwd_verifier: PasswordVerifier
    aid: SecretKey
    salt: Salt
    reg_fburl: FbUrl


@dataclass(frozen=True)
class MatchResult:
    em: str
    sid: SessionId
    env: EncryptedEnvelope


@dataclass(frozen=True)
class Rotation:
    em: str
    salt: Salt
    env: EncryptedEnvelope
    fd_endpoint: str | None


@dataclass(frozen=True)
class LoginSuccess:
    em: str
    sid: SessionId
    fd_endpoint: str | None
    sd_endpoint: str | None


def envelope_digest(env: EncryptedEnvelope) -> str:
    return hashlib.sha256(env.to_bytes()).hexdigest()


class VerifierServer:
    def __init__(
        self,
        sk: SecretKey,
        rng: RandomSource,
        settings: ServerSettings | None = None,
        store: ServerStore | None = None,
        embeddings: EmbeddingStore | None = None,
        tracer: SealTracer | None = None,
        principal: str = "server",
    ) -> None:
        self.sk = sk
        self.rng = rng
        self.settings = settings or ServerSettings()
        self.store = store or ServerStore()
        self.embeddings = embeddings or EmbeddingStore(rng)
        self.tracer = tracer or NullTracer()
        self.principal = principal
        self.pending: dict[str, PendingRegistration] = {}
        self._lock = threading.RLock()
        self.tracer.secret("SK", sk.value)

    # Registration

    def register(self, em: str, pwd: str, embedding: FaceEmbedding) -> tuple[Salt, EncryptedEnvelope]:
        with self._lock:
            if em in self.store or em in self.pending:
                raise DuplicateEmail(em)
            reg_fburl = self.embeddings.store(embedding)
            aid = gen_secret(self.rng)
            salt = gen_salt(self.rng)
            self.tracer.secret("AID", aid.value)
            env = traced_seal(self.tracer, self.principal, blob_keys(self.sk, salt), aid.value, self.rng)
            verifier = PasswordVerifier.create(pwd, self.rng, self.settings.pwd_hash_iterations)
            self.pending[em] = PendingRegistration(em, verifier, aid, salt, reg_fburl)
            logger.info("registration_started", em=em, fburl=reg_fburl.id)
            return salt, env

    def confirm_registration(self, em: str, env: EncryptedEnvelope) -> None:
        with self._lock:
            pending = self.pending.get(em)
            if pending is None:
                raise InvalidState(f"no registration pending for {em}")
            try:
                ok = constant_eq(crypto_core.open(keys_from_aid(pending.aid), env), fixed_token())
            except (MacMismatch, BadPadding):
                ok = False
            if not ok:
                self._abort_registration(pending)
                raise RegistrationAborted("confirmation token did not verify")
            del self.pending[em]
            record = UserRecord(
                em=em,
                pwd_verifier=pending.pwd_verifier,
                aid=pending.aid,
                salt=pending.salt,
                reg_fburl=pending.reg_fburl,
            )
            self.store.save(record)
            logger.info("registration_committed", em=em)

    def _abort_registration(self, pending: PendingRegistration) -> None:
        del self.pending[pending.em]
        self.embeddings.delete(pending.reg_fburl)
        logger.info("registration_aborted", em=pending.em)

    # Login

    def upload_login_face(self, embedding: FaceEmbedding) -> FbUrl:
        with self._lock:
            return self.embeddings.store(embedding)

    def update_login_context(
        self,
        em: str,
        n1: Nonce10,
        bt1: BluetoothAddress,
        now: int,
        fd_endpoint: str | None = None,
    ) -> None:
        with self._lock:
            record = self.store.require(em)
            if record.session_state is not SessionState.IDLE and record.expired(now):
                self._close_session(record, "expired")
            if record.session_state is not SessionState.IDLE:
                raise SessionAlreadyActive(em)
            record.n1 = n1
            record.bt1 = bt1
            record.fd_endpoint = fd_endpoint
            record.session_state = SessionState.LOGIN_BEGUN
            record.session_deadline = now + self.settings.session_deadline_ms
            self.store.save(record)
            logger.info("login_context_updated", em=em, bt1=str(bt1))

    def begin_login(self, em: str, enc_identifier: EncryptedEnvelope, now: int) -> Salt:
        with self._lock:
            record = self.store.require(em)
            if record.session_state is not SessionState.LOGIN_BEGUN or record.identified:
                raise InvalidState(f"{em} is not waiting for an identifier")
            self._check_deadline(record, now)
            try:
                inner = EncryptedEnvelope.from_bytes(
                    crypto_core.open(identifier_keys(self.sk, record.n1), enc_identifier)
                )
                aid = crypto_core.open(blob_keys(self.sk, record.salt), inner)
                matched = constant_eq(aid, record.aid.value)
            except (MacMismatch, BadPadding, MalformedMessage):
                matched = False
            if not matched:
                self._close_session(record, "identification_failed")
                raise IdentificationFailed(em)
            record.identified = True
            record.session_deadline = now + self.settings.session_deadline_ms
            self.store.save(record)
            logger.info("identifier_verified", em=em)
            return record.salt

    def verify_auth_string(
        self,
        env: EncryptedEnvelope,
        bt2: BluetoothAddress,
        now: int,
        presenter: str | None = None,
    ) -> MatchResult:
        with self._lock:
            record, plaintext = self._trial_open(
                env,
                lambda r: r.session_state is SessionState.LOGIN_BEGUN and r.identified,
                lambda r: auth_keys(r.aid, r.salt),
            )
            if record is None:
                raise NoMatchingUser("no active session opens this auth string")
            self._check_deadline(record, now)
            auth = decode_auth_string(plaintext)
            record.login_fburl = auth.login_fburl
            if auth.em != record.em:
                self._close_session(record, "auth_string_user_mismatch")
                raise NoMatchingUser("auth string names a different user")
            try:
                login = self.embeddings.fetch(auth.login_fburl)
            except NotFound:
                self._close_session(record, "login_face_missing")
                raise
            try:
                reg = self.embeddings.fetch(record.reg_fburl)
            except NotFound:
                self._close_session(record, "registration_face_missing")
                raise
            score = biometric.distance(login, reg)
            if not biometric.verify(login, reg, self.settings.match_threshold):
                logger.info("biometric_rejected", em=record.em, distance=round(score, 6))
                self._close_session(record, "biometric_mismatch")
                raise BiometricMismatch(f"distance {score:.4f} above threshold")

            token = gen_token(self.rng)
            self.tracer.secret("TOKEN", token.value)
            record.sid = auth.sid
            record.token = token
            record.sd_endpoint = presenter
            record.session_state = SessionState.AWAITING_PROXIMITY
            record.session_deadline = now + self.settings.session_deadline_ms
            self.store.save(record)
            match = MatchMessage(token=token, bt1=record.bt1)
            out = traced_seal(
                self.tracer,
                self.principal,
                derive_bt_key(bt2, auth.sid.value),
                encode_match(match),
                self.rng,
                parts=(MATCH_TAG, token.value, str(record.bt1).encode("ascii")),
            )
            logger.info("auth_string_verified", em=record.em, distance=round(score, 6), bt2=str(bt2))
            return MatchResult(record.em, auth.sid, out)

    def verify_proximity_token(
        self,
        env: EncryptedEnvelope,
        now: int,
        presenter: str | None = None,
    ) -> Rotation:
        with self._lock:
            single_use = self.settings.token_single_use
            digest = envelope_digest(env)
            if single_use and self.store.is_consumed(digest):
                raise TokenAlreadyConsumed("proximity envelope was already accepted")
            states = {SessionState.AWAITING_PROXIMITY}
            if not single_use:
                states |= ROTATION_STATES
            if not any(r.session_state in states for r in self.store):
                raise InvalidState("no session is waiting for a proximity proof")
            record, plaintext = self._trial_open(
                env,
                lambda r: r.session_state in states,
                lambda r: derive_bt_key(r.bt1, r.sid.value),
            )
            if record is None:
                raise TokenMismatch("envelope does not open under any BT1 key")
            self._check_deadline(record, now)
            if single_use and plaintext in self.store.consumed_tokens:
                raise TokenAlreadyConsumed("token value was already accepted")
            if record.token is None or not constant_eq(plaintext, record.token.value):
                raise TokenMismatch("token does not match the session")

            if record.session_state in ROTATION_STATES:
                # only reachable with single-use disabled: the proof is re-accepted
                record.sd_endpoint = presenter
                self.store.save(record)
                self.tracer.accepted(self.principal, "token", env, presenter or "")
                logger.warning("token_reaccepted", em=record.em, presenter=presenter)
                return Rotation(record.em, record.salt, record.rotation_env, record.fd_endpoint)

            if single_use:
                self.store.mark_consumed(digest, record.token)
                record.token = None
            aid_next = gen_secret(self.rng)
            self.tracer.secret("AID_NEXT", aid_next.value)
            rotation_env = traced_seal(
                self.tracer, self.principal, keys_from_aid(record.aid), aid_next.value, self.rng
            )
            record.rotation_env = rotation_env
            record.session_state = SessionState.AWAITING_ROTATION_ACK
            self.store.set_pending_rotation(record, aid_next)
            self.tracer.accepted(self.principal, "token", env, presenter or "")
            logger.info("proximity_verified", em=record.em)
            return Rotation(record.em, record.salt, rotation_env, record.fd_endpoint)

    def acknowledge_rotation(self, em: str, now: int) -> None:
        with self._lock:
            record = self.store.require(em)
            if (
                not self.settings.separate_rotation_ack
                or record.session_state is not SessionState.AWAITING_ROTATION_ACK
            ):
                raise InvalidState(f"{em} is not waiting for a rotation acknowledgement")
            self._check_deadline(record, now)
            record.session_state = SessionState.AWAITING_OK
            self.store.save(record)

    def verify_ok(
        self,
        em: str,
        env: EncryptedEnvelope,
        now: int,
        presenter: str | None = None,
    ) -> LoginSuccess:
        with self._lock:
            record = self.store.require(em)
            if record.session_state not in ROTATION_STATES:
                raise InvalidState(f"{em} has no rotation in progress")
            self._check_deadline(record, now)
            try:
                ok = constant_eq(crypto_core.open(keys_from_aid(record.aid), env), OK_CHALLENGE)
            except (MacMismatch, BadPadding):
                ok = False
            if not ok:
                self._close_session(record, "ok_rejected")
                raise LoginFailed("OK challenge did not verify under the current AID")
            self.store.replace_aid(record)
            self.tracer.accepted(self.principal, "ok", env, presenter or "")
            result = LoginSuccess(record.em, record.sid, record.fd_endpoint, record.sd_endpoint)
            self._close_session(record, "login_success")
            logger.info("login_succeeded", em=em, sd=result.sd_endpoint)
            return result

    def expire_sessions(self, now: int) -> int:
        with self._lock:
            count = 0
            for record in self.store:
                if record.session_state is not SessionState.IDLE and record.expired(now):
                    self._close_session(record, "expired")
                    count += 1
            return count

    # Internals

    def _trial_open(
        self,
        env: EncryptedEnvelope,
        eligible: Callable[[UserRecord], bool],
        keys_for: Callable[[UserRecord], crypto_core.KeyPair],
    ) -> tuple[UserRecord | None, bytes]:
        for record in self.store:
            if not eligible(record):
                continue
            try:
                plaintext = try_open(keys_for(record), env)
            except BadPadding:
                plaintext = None
            if plaintext is not None:
                return record, plaintext
        return None, b""

    def _check_deadline(self, record: UserRecord, now: int) -> None:
        if record.expired(now):
            self._close_session(record, "expired")
            raise SessionExpired(record.em)

    def _close_session(self, record: UserRecord, reason: str) -> None:
        if record.login_fburl is not None:
            self.embeddings.delete(record.login_fburl)
        self.store.discard_pending_rotation(record)
        if record.session_state is not SessionState.IDLE:
            logger.info("session_closed", em=record.em, reason=reason, state=record.session_state.value)
        record.reset_session()
        self.store.save(record)


class ServerEndpoint:
    """Message front end: one handler per accepted kind, errors become ERROR replies."""

    def __init__(self, server: VerifierServer) -> None:
        self.server = server
        self.principal = server.principal
        self._handlers: dict[MessageKind, Callable[[ProtocolMessage, int], list[ProtocolMessage]]] = {
            MessageKind.REGISTER_REQUEST: self._on_register,
            MessageKind.REGISTER_CONFIRM: self._on_confirm,
            MessageKind.FACE_UPLOAD: self._on_face_upload,
            MessageKind.LOGIN_CONTEXT: self._on_login_context,
            MessageKind.IDENTIFY: self._on_identify,
            MessageKind.AUTH_SUBMIT: self._on_auth_submit,
            MessageKind.PROXIMITY_TOKEN: self._on_proximity_token,
            MessageKind.ROTATION_ACK: self._on_rotation_ack,
            MessageKind.KEY_CONFIRM: self._on_key_confirm,
        }

    def handle(self, msg: ProtocolMessage, now: int) -> list[ProtocolMessage]:
        handler = self._handlers.get(msg.kind)
        try:
            if handler is None:
                raise InvalidState(f"server does not accept {msg.kind.value}")
            return handler(msg, now)
        except ProtocolError as exc:
            logger.info("request_rejected", kind=msg.kind.value, sender=msg.sender, code=exc.code)
            return [error_message(self.principal, msg.sender, exc)]

    def expire_sessions(self, now: int) -> int:
        return self.server.expire_sessions(now)

    def _reply(self, msg: ProtocolMessage, kind: MessageKind, **body) -> ProtocolMessage:
        return message(kind, self.principal, msg.sender, **body)

    def _on_register(self, msg: ProtocolMessage, now: int) -> list[ProtocolMessage]:
        salt, env = self.server.register(msg["em"], msg["pwd"], msg["embedding"])
        return [self._reply(msg, MessageKind.REGISTER_RESPONSE, em=msg["em"], salt=salt, env=env)]

    def _on_confirm(self, msg: ProtocolMessage, now: int) -> list[ProtocolMessage]:
        self.server.confirm_registration(msg["em"], msg["env"])
        return [self._reply(msg, MessageKind.REGISTER_RESULT, em=msg["em"], ok=True)]

    def _on_face_upload(self, msg: ProtocolMessage, now: int) -> list[ProtocolMessage]:
        url = self.server.upload_login_face(msg["embedding"])
        return [self._reply(msg, MessageKind.FACE_UPLOADED, fburl=url.id)]

    def _on_login_context(self, msg: ProtocolMessage, now: int) -> list[ProtocolMessage]:
        self.server.update_login_context(msg["em"], msg["n1"], msg["bt1"], now, fd_endpoint=msg.sender)
        return [self._reply(msg, MessageKind.LOGIN_CONTEXT_ACK, em=msg["em"])]

    def _on_identify(self, msg: ProtocolMessage, now: int) -> list[ProtocolMessage]:
        salt = self.server.begin_login(msg["em"], msg["env"], now)
        return [self._reply(msg, MessageKind.IDENTIFY_SALT, em=msg["em"], salt=salt)]

    def _on_auth_submit(self, msg: ProtocolMessage, now: int) -> list[ProtocolMessage]:
        result = self.server.verify_auth_string(msg["env"], msg["bt2"], now, presenter=msg.sender)
        return [self._reply(msg, MessageKind.MATCH, env=result.env, sid=result.sid)]

    def _on_proximity_token(self, msg: ProtocolMessage, now: int) -> list[ProtocolMessage]:
        rotation = self.server.verify_proximity_token(msg["env"], now, presenter=msg.sender)
        if rotation.fd_endpoint is None:
            return []
        return [
            message(
                MessageKind.ROTATE,
                self.principal,
                rotation.fd_endpoint,
                em=rotation.em,
                salt=rotation.salt,
                env=rotation.env,
            )
        ]

    def _on_rotation_ack(self, msg: ProtocolMessage, now: int) -> list[ProtocolMessage]:
        self.server.acknowledge_rotation(msg["em"], now)
        return []

    def _on_key_confirm(self, msg: ProtocolMessage, now: int) -> list[ProtocolMessage]:
        result = self.server.verify_ok(msg["em"], msg["env"], now, presenter=msg.sender)
        body = {"em": result.em, "ok": True, "sid": result.sid.value, "error": ""}
        out = [message(MessageKind.LOGIN_RESULT, self.principal, msg.sender, **body)]
        if result.sd_endpoint and result.sd_endpoint != msg.sender:
            out.append(message(MessageKind.LOGIN_RESULT, self.principal, result.sd_endpoint, **body))
        return out
