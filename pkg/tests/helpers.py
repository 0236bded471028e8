"""Builders shared by the test modules."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import pytest

from src.config import NOISE_SIGMA, OK_CHALLENGE
from src.harness.scenario import ScenarioConfig, load_scenario
from src.protocol import crypto_core
from src.protocol.biometric import FaceEmbedding, IdentityProfile, capture, random_identity
from src.protocol.crypto_core import (
    EncryptedEnvelope,
    KeyPair,
    ReplayToken,
    Salt,
    SecretKey,
    auth_keys,
    blob_keys,
    derive_bt_key,
    gen_nonce10,
    gen_salt,
    identifier_keys,
    keys_from_aid,
    seal,
)
from src.protocol.messages import (
    SCHEMAS,
    AuthString,
    FieldType,
    ProtocolMessage,
    SessionId,
    decode_match,
    encode_auth_string,
    fixed_token,
    gen_session_id,
)
from src.protocol.server import ServerSettings, VerifierServer
from src.sim.channels import BluetoothAddress
from src.sim.world import World

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"
BUNDLED = sorted(p.stem for p in SCENARIO_DIR.glob("*.json"))

EM = "alice@example.com"
PWD = "hunter2hunter2"
BT1 = BluetoothAddress.parse("AA:BB:CC:00:00:01")
BT2 = BluetoothAddress.parse("AA:BB:CC:00:00:02")


class FixedRandom:
    """RandomSource that replays a fixed byte string, then zeros."""

    def __init__(self, data: bytes = b"") -> None:
        self.data = data

    def bytes(self, n: int) -> bytes:
        out, self.data = self.data[:n], self.data[n:]
        return out + b"\x00" * (n - len(out))

    def gaussian(self, n, sigma):
        raise NotImplementedError


def scenario(name: str, **updates) -> ScenarioConfig:
    """A bundled scenario with top-level fields replaced; password hashing kept cheap."""
    config = load_scenario(SCENARIO_DIR / f"{name}.json")
    doc = {**config.model_dump(), "pwd_hash_iterations": 1, **updates}
    return ScenarioConfig.model_validate(doc)


def honest_world(seed: int = 1, root: Path | None = None, **settings) -> tuple[World, IdentityProfile]:
    """Phone and desktop at ``home``, an empty ``away`` location, user registered."""
    world = World(seed, ServerSettings(pwd_hash_iterations=1, **settings), root=root)
    world.add_location("home")
    world.add_location("away")
    world.add_first_device("phone", "home")
    world.add_second_device("desktop", "home")
    profile = random_identity(world.rng.fork("test/profile"), NOISE_SIGMA)
    world.register("phone", EM, PWD, profile)
    world.run()
    assert world.first_device("phone").registered
    return world, profile


def login(world: World, profile: IdentityProfile, target: str | None = "desktop") -> None:
    world.begin_login("phone", EM, profile, tap_target=target)
    world.run()


def device_aid(world: World, device_id: str = "phone") -> bytes:
    record = world.server.store.require(EM)
    fd = world.first_device(device_id)
    return crypto_core.open(blob_keys(fd.sk, record.salt), fd.enc_aid_blob)


def server_aid(world: World) -> SecretKey:
    return world.server.store.require(EM).aid


def random_value(ftype, rng):
    """A well-typed random value for one message field."""
    if ftype is FieldType.STR:
        return rng.bytes(6).hex()
    if ftype is FieldType.BOOL:
        return rng.bytes(1)[0] % 2 == 0
    if ftype is FieldType.BYTES:
        return rng.bytes(rng.randbelow(20))
    if ftype is FieldType.ENV:
        return seal(KeyPair(rng.bytes(32), rng.bytes(32)), rng.bytes(rng.randbelow(50)), rng)
    if ftype is FieldType.SALT:
        return gen_salt(rng)
    if ftype is FieldType.NONCE:
        return gen_nonce10(rng)
    if ftype is FieldType.BT:
        return BluetoothAddress.random(rng)
    if ftype is FieldType.SID:
        return gen_session_id(rng)
    return random_identity(rng, 0.0).ground_truth


def random_message(kind, rng, sender: str | None = None, receiver: str | None = None):
    body = {name: random_value(ftype, rng) for name, ftype in SCHEMAS[kind].items()}
    return ProtocolMessage(
        kind,
        sender or "from-" + rng.bytes(2).hex(),
        receiver or "to-" + rng.bytes(2).hex(),
        body,
    )


@dataclass
class Session:
    aid: SecretKey
    salt: Salt
    sid: SessionId
    token: ReplayToken
    bt1: BluetoothAddress


class Client:
    """Plays the honest phone and desktop directly against a VerifierServer."""

    def __init__(self, server: VerifierServer, rng, em: str = EM, sigma: float = 0.02) -> None:
        self.server = server
        self.rng = rng
        self.em = em
        self.profile = random_identity(rng, sigma)
        self.blob: EncryptedEnvelope | None = None

    def register(self) -> SecretKey:
        salt, env = self.server.register(self.em, "pw", capture(self.profile, self.rng))
        aid = SecretKey(crypto_core.open(blob_keys(self.server.sk, salt), env))
        self.server.confirm_registration(self.em, seal(keys_from_aid(aid), fixed_token(), self.rng))
        self.blob = env
        return aid

    def context(self, now: int = 0, bt1: BluetoothAddress = BT1):
        n1 = gen_nonce10(self.rng)
        self.server.update_login_context(self.em, n1, bt1, now, fd_endpoint="phone")
        return n1

    def identify(self, n1, now: int = 0, blob: EncryptedEnvelope | None = None) -> Salt:
        wrapped = seal(identifier_keys(self.server.sk, n1), (blob or self.blob).to_bytes(), self.rng)
        return self.server.begin_login(self.em, wrapped, now)

    def auth_string(self, salt: Salt, face: FaceEmbedding | None = None) -> tuple[EncryptedEnvelope, SessionId]:
        url = self.server.upload_login_face(face or capture(self.profile, self.rng))
        aid = SecretKey(crypto_core.open(blob_keys(self.server.sk, salt), self.blob))
        sid = gen_session_id(self.rng)
        plain = encode_auth_string(AuthString(self.em, url, sid))
        return seal(auth_keys(aid, salt), plain, self.rng), sid

    def to_match(self, now: int = 0) -> Session:
        n1 = self.context(now)
        salt = self.identify(n1, now)
        env, sid = self.auth_string(salt)
        result = self.server.verify_auth_string(env, BT2, now, presenter="desktop")
        match = decode_match(crypto_core.open(derive_bt_key(BT2, sid.value), result.env))
        aid = SecretKey(crypto_core.open(blob_keys(self.server.sk, salt), self.blob))
        return Session(aid, salt, sid, match.token, match.bt1)

    def token_env(self, session: Session, token: bytes | None = None, bt: BluetoothAddress | None = None):
        keys = derive_bt_key(bt or session.bt1, session.sid.value)
        return seal(keys, token or session.token.value, self.rng)

    def finish(self, session: Session, now: int = 0) -> SecretKey:
        rotation = self.server.verify_proximity_token(self.token_env(session), now, presenter="desktop")
        aid_next = SecretKey(crypto_core.open(keys_from_aid(session.aid), rotation.env))
        ok = seal(keys_from_aid(session.aid), OK_CHALLENGE, self.rng)
        self.server.verify_ok(self.em, ok, now, presenter="phone")
        self.blob = seal(blob_keys(self.server.sk, session.salt), aid_next.value, self.rng)
        return aid_next


GOLDEN_DIR = Path(__file__).resolve().parent / "fixtures" / "golden"


def assert_golden(name: str, data: bytes) -> None:
    """Compare ``data`` with ``tests/fixtures/golden/<name>``.

    A missing fixture is recorded and the test skipped; commit the file. Set
    ``MFA_UPDATE_GOLDEN=1`` to re-record after an intended format change.
    """
    path = GOLDEN_DIR / name
    if os.environ.get("MFA_UPDATE_GOLDEN") == "1" or not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        pytest.skip(f"recorded golden fixture {path.name}")
    expected = path.read_bytes()
    if data != expected:
        got, want = data.decode("utf-8").splitlines(), expected.decode("utf-8").splitlines()
        first = next((i for i, (a, b) in enumerate(zip(got, want)) if a != b), min(len(got), len(want)))
        pytest.fail(f"{name} differs from the golden fixture at line {first + 1}")
