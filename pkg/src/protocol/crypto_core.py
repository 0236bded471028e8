"""Token generation and the encrypt-then-MAC envelope.

Envelope construction:

* a fresh 128-bit IV per seal call,
* AES-256-CBC over the PKCS#7-padded plaintext under ``k_e``,
* HMAC-SHA-256 under ``k_m`` over ``iv || ct``,
* wire order ``iv || mac || ct``.

``open`` verifies the tag before it decrypts anything, so a tampered envelope
can only ever surface as ``MacMismatch``.

All randomness comes from an injected ``RandomSource``. ``SeededRandom`` is
deterministic (HMAC-SHA-256 in counter mode over the seed) and is what the
simulator uses; ``SystemRandom`` reads the operating system pool.
"""
from __future__ import annotations

import hashlib
import hmac as _hmac
import os
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Protocol

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import constant_time, hashes, hmac, padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from src.config import AID_KEY_SALT, BT_KEY_SALT
from src.protocol.errors import BadPadding, EmptyKeyMaterial, MacMismatch, MalformedMessage

if TYPE_CHECKING:
    from src.sim.channels import BluetoothAddress

KEY_LEN = 32
SALT_LEN = 16
IV_LEN = 16
MAC_LEN = 32
BLOCK_LEN = 16
TOKEN_LEN = 16
NONCE_DIGITS = 10
_NONCE_MODULUS = 10**NONCE_DIGITS


class RandomSource(Protocol):
    def bytes(self, n: int) -> bytes: ...

    def gaussian(self, n: int, sigma: float) -> np.ndarray: ...


class SeededRandom:
    def __init__(self, seed: int | bytes, label: str = "") -> None:
        seed_bytes = seed.to_bytes(8, "big") if isinstance(seed, int) else bytes(seed)
        self._key = _hmac.new(
            b"mfa-sim/drbg", seed_bytes + b"/" + label.encode(), hashlib.sha256
        ).digest()
        self._counter = 0
        self._pool = b""

    def bytes(self, n: int) -> bytes:
        while len(self._pool) < n:
            block = _hmac.new(self._key, self._counter.to_bytes(8, "big"), hashlib.sha256)
            self._pool += block.digest()
            self._counter += 1
        out, self._pool = self._pool[:n], self._pool[n:]
        return out

    def fork(self, label: str) -> "SeededRandom":
        """Child stream that depends only on this stream's seed and ``label``."""
        return SeededRandom(self._key, label)

    def gaussian(self, n: int, sigma: float) -> np.ndarray:
        generator = np.random.default_rng(int.from_bytes(self.bytes(16), "big"))
        return generator.normal(0.0, sigma, n)

    def randbelow(self, n: int) -> int:
        width = (n.bit_length() + 7) // 8 or 1
        limit = (256**width // n) * n
        while True:
            value = int.from_bytes(self.bytes(width), "big")
            if value < limit:
                return value % n


class SystemRandom:
    def bytes(self, n: int) -> bytes:
        return os.urandom(n)

    def fork(self, label: str) -> "SystemRandom":
        return self

    def gaussian(self, n: int, sigma: float) -> np.ndarray:
        return np.random.default_rng(int.from_bytes(os.urandom(16), "big")).normal(0.0, sigma, n)


def _check_len(name: str, value: bytes, length: int) -> None:
    if not isinstance(value, bytes) or len(value) != length:
        raise ValueError(f"{name} must be exactly {length} bytes")


@dataclass(frozen=True)
class SecretKey:
    value: bytes = field(repr=False)

    def __post_init__(self) -> None:
        _check_len("SecretKey", self.value, KEY_LEN)


@dataclass(frozen=True)
class Salt:
    value: bytes

    def __post_init__(self) -> None:
        _check_len("Salt", self.value, SALT_LEN)


@dataclass(frozen=True)
class ReplayToken:
    value: bytes = field(repr=False)

    def __post_init__(self) -> None:
        _check_len("ReplayToken", self.value, TOKEN_LEN)


@dataclass(frozen=True)
class Nonce10:
    digits: str = field(repr=False)

    def __post_init__(self) -> None:
        if (
            not isinstance(self.digits, str)
            or len(self.digits) != NONCE_DIGITS
            or not all("0" <= ch <= "9" for ch in self.digits)
        ):
            raise ValueError("Nonce10 must be exactly 10 decimal digits")

    def increment(self) -> "Nonce10":
        # wraps at 10^10 and re-pads, so the map is a bijection on 10-digit strings
        return Nonce10(f"{(int(self.digits) + 1) % _NONCE_MODULUS:0{NONCE_DIGITS}d}")

    def encode(self) -> bytes:
        return self.digits.encode("ascii")


@dataclass(frozen=True)
class KeyPair:
    k_e: bytes = field(repr=False)
    k_m: bytes = field(repr=False)
    # labelled inputs the pair was derived from; read by the symbolic ledger only
    origin: tuple[tuple[str, bytes], ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self) -> None:
        _check_len("k_e", self.k_e, KEY_LEN)
        _check_len("k_m", self.k_m, KEY_LEN)


@dataclass(frozen=True)
class EncryptedEnvelope:
    iv: bytes
    mac: bytes
    ct: bytes

    def __post_init__(self) -> None:
        _check_len("iv", self.iv, IV_LEN)
        _check_len("mac", self.mac, MAC_LEN)
        if not isinstance(self.ct, bytes) or not self.ct or len(self.ct) % BLOCK_LEN:
            raise ValueError("ct must be a non-empty multiple of 16 bytes")

    def to_bytes(self) -> bytes:
        return self.iv + self.mac + self.ct

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EncryptedEnvelope":
        header = IV_LEN + MAC_LEN
        if len(raw) < header + BLOCK_LEN or (len(raw) - header) % BLOCK_LEN:
            raise MalformedMessage("envelope", f"bad envelope length {len(raw)}")
        return cls(iv=raw[:IV_LEN], mac=raw[IV_LEN:header], ct=raw[header:])

    def hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def from_hex(cls, text: str) -> "EncryptedEnvelope":
        try:
            raw = bytes.fromhex(text)
        except (TypeError, ValueError) as exc:
            raise MalformedMessage("envelope", "not hex") from exc
        return cls.from_bytes(raw)


def hmac_sha256(key: bytes, data: bytes) -> bytes:
    h = hmac.HMAC(key, hashes.SHA256())
    h.update(data)
    return h.finalize()


def constant_eq(a: bytes, b: bytes) -> bool:
    return constant_time.bytes_eq(a, b)


def gen_secret(rng: RandomSource) -> SecretKey:
    return SecretKey(rng.bytes(KEY_LEN))


def gen_salt(rng: RandomSource) -> Salt:
    return Salt(rng.bytes(SALT_LEN))


def gen_token(rng: RandomSource) -> ReplayToken:
    return ReplayToken(rng.bytes(TOKEN_LEN))


def gen_nonce10(rng: RandomSource) -> Nonce10:
    digits = []
    while len(digits) < NONCE_DIGITS:
        for byte in rng.bytes(NONCE_DIGITS):
            # reject 250..255 so every digit is equally likely
            if byte < 250 and len(digits) < NONCE_DIGITS:
                digits.append(str(byte % 10))
    return Nonce10("".join(digits))


def derive_keys(k: SecretKey, n: Nonce10) -> KeyPair:
    return KeyPair(
        k_e=hmac_sha256(k.value, n.encode()),
        k_m=hmac_sha256(k.value, n.increment().encode()),
        origin=(("secret", k.value), ("nonce", n.encode())),
    )


def derive_key_from_password(secret_material: bytes, salt: Salt) -> KeyPair:
    if not secret_material:
        raise EmptyKeyMaterial("key material must be non-empty")
    return KeyPair(
        k_e=hmac_sha256(secret_material, salt.value + b"\x00"),
        k_m=hmac_sha256(secret_material, salt.value + b"\x01"),
        origin=(("material", secret_material), ("salt", salt.value)),
    )


def derive_bt_key(bt: "BluetoothAddress", context: bytes) -> KeyPair:
    """Key pair bound to a Bluetooth address and a session context.

    A Bluetooth address carries only 48 bits; the protocol salt and the
    context stretch it but this is not a high-entropy key.
    """
    address = str(bt).encode("ascii")
    pair = derive_key_from_password(address + context, Salt(BT_KEY_SALT))
    return KeyPair(pair.k_e, pair.k_m, origin=(("bt", address), ("context", context)))


# Named key compositions used by the protocol


def blob_keys(sk: SecretKey, salt: Salt) -> KeyPair:
    """Protects the AID blob the first device keeps."""
    return derive_key_from_password(sk.value, salt)


def identifier_keys(sk: SecretKey, n1: Nonce10) -> KeyPair:
    """Wraps the stored blob for one login attempt."""
    return derive_keys(sk, n1)


def auth_keys(aid: SecretKey, salt: Salt) -> KeyPair:
    """Protects the auth string handed over by NFC."""
    return derive_key_from_password(aid.value, salt)


def keys_from_aid(aid: SecretKey) -> KeyPair:
    """Registration confirmation, rotation envelope and OK challenge."""
    return derive_key_from_password(aid.value, Salt(AID_KEY_SALT))


def seal(keys: KeyPair, plaintext: bytes, rng: RandomSource) -> EncryptedEnvelope:
    iv = rng.bytes(IV_LEN)
    padder = padding.PKCS7(BLOCK_LEN * 8).padder()
    padded = padder.update(plaintext) + padder.finalize()
    encryptor = Cipher(algorithms.AES(keys.k_e), modes.CBC(iv)).encryptor()
    ct = encryptor.update(padded) + encryptor.finalize()
    return EncryptedEnvelope(iv=iv, mac=hmac_sha256(keys.k_m, iv + ct), ct=ct)


def open(keys: KeyPair, env: EncryptedEnvelope) -> bytes:  # noqa: A001
    h = hmac.HMAC(keys.k_m, hashes.SHA256())
    h.update(env.iv + env.ct)
    try:
        h.verify(env.mac)
    except InvalidSignature as exc:
        raise MacMismatch("envelope tag does not verify") from exc

    decryptor = Cipher(algorithms.AES(keys.k_e), modes.CBC(env.iv)).decryptor()
    padded = decryptor.update(env.ct) + decryptor.finalize()
    unpadder = padding.PKCS7(BLOCK_LEN * 8).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError as exc:
        raise BadPadding("invalid padding after MAC verification") from exc


def try_open(keys: KeyPair, env: EncryptedEnvelope) -> bytes | None:
    try:
        return open(keys, env)
    except MacMismatch:
        return None
