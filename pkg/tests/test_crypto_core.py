from __future__ import annotations

import hashlib
import hmac
import re
from collections import Counter

import numpy as np
import pytest
from Crypto.Cipher import AES
from Crypto.Util.Padding import pad

from src.protocol import crypto_core
from src.protocol.crypto_core import (
    EncryptedEnvelope,
    KeyPair,
    Nonce10,
    Salt,
    SecretKey,
    SeededRandom,
    derive_bt_key,
    derive_key_from_password,
    derive_keys,
    gen_nonce10,
    gen_secret,
    seal,
)
from src.protocol.errors import BadPadding, EmptyKeyMaterial, MacMismatch, MalformedMessage
from src.config import BT_KEY_SALT
from src.sim.channels import BluetoothAddress
from tests.helpers import FixedRandom


def _oracle_hmac(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def _keys(seed: int = 0) -> KeyPair:
    rng = SeededRandom(seed, "keys")
    return KeyPair(rng.bytes(32), rng.bytes(32))


@pytest.mark.parametrize(
    "key, data, expected",
    [
        (b"\x0b" * 20, b"Hi There", "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
        (b"Jefe", b"what do ya want for nothing?", "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
        (b"\xaa" * 20, b"\xdd" * 50, "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe"),
        (bytes(range(1, 26)), b"\xcd" * 50, "82558a389a443c0ea4cc819899f2083a85f0faa3e578f8077a2e3ff46729665b"),
    ],
)
def test_hmac_sha256_known_answers(key, data, expected):
    assert crypto_core.hmac_sha256(key, data).hex() == expected


def test_aes256_single_block_known_answer():
    keys = KeyPair(bytes(range(32)), b"\x00" * 32)
    env = seal(keys, bytes.fromhex("00112233445566778899aabbccddeeff"), FixedRandom())
    assert env.iv == b"\x00" * 16
    # zero IV: the first CBC block is the raw block cipher output
    assert env.ct[:16].hex() == "8ea2b7ca516745bfeafc49904b496089"


def test_cbc_aes256_known_answer():
    key = bytes.fromhex("603deb1015ca71be2b73aef0857d77811f352c073b6108d72d9810a30914dff4")
    pt = bytes.fromhex(
        "6bc1bee22e409f96e93d7e117393172a"
        "ae2d8a571e03ac9c9eb76fac45af8e51"
        "30c81c46a35ce411e5fbc1191a0a52ef"
        "f69f2445df4f9b17ad2b417be66c3710"
    )
    expected = (
        "f58c4c04d6e5f1ba779eabfb5f7bfbd6"
        "9cfc4e967edb808d679f777bc6702c7d"
        "39f23369a9d9bacfa530e26304231461"
        "b2eb05e2c39be9fcda6c19078c6a9d1b"
    )
    env = seal(KeyPair(key, b"\x01" * 32), pt, FixedRandom(bytes(range(16))))
    assert env.ct[:64].hex() == expected
    assert len(env.ct) == 80  # one full padding block


def test_seal_matches_independent_implementation(rng):
    for size in (0, 1, 15, 16, 17, 100):
        keys = KeyPair(rng.bytes(32), rng.bytes(32))
        pt = rng.bytes(size)
        iv = rng.bytes(16)
        env = seal(keys, pt, FixedRandom(iv))
        ct = AES.new(keys.k_e, AES.MODE_CBC, iv).encrypt(pad(pt, 16))
        assert env.ct == ct
        assert env.mac == _oracle_hmac(keys.k_m, iv + ct)
        assert env.to_bytes() == iv + env.mac + ct


def test_derive_keys_uses_nonce_and_successor():
    k = SecretKey(bytes(range(32)))
    pair = derive_keys(k, Nonce10("0123456789"))
    assert pair.k_e == _oracle_hmac(k.value, b"0123456789")
    assert pair.k_m == _oracle_hmac(k.value, b"0123456790")


def test_derive_keys_wraps_at_last_nonce():
    k = SecretKey(b"\x07" * 32)
    pair = derive_keys(k, Nonce10("9999999999"))
    assert pair.k_m == _oracle_hmac(k.value, b"0000000000")


def test_derive_key_from_password_known_answer():
    pair = derive_key_from_password(b"test", Salt(b"\x00" * 16))
    assert pair.k_e == _oracle_hmac(b"test", b"\x00" * 17)
    assert pair.k_m == _oracle_hmac(b"test", b"\x00" * 16 + b"\x01")
    assert pair.k_e != pair.k_m


def test_derive_key_from_password_rejects_empty_material():
    with pytest.raises(EmptyKeyMaterial):
        derive_key_from_password(b"", Salt(b"\x00" * 16))


def test_derive_bt_key_binds_address_and_context():
    zero = BluetoothAddress(b"\x00" * 6)
    pair = derive_bt_key(zero, b"ctx")
    material = b"00:00:00:00:00:00ctx"
    assert pair.k_e == _oracle_hmac(material, BT_KEY_SALT + b"\x00")
    assert pair.k_m == _oracle_hmac(material, BT_KEY_SALT + b"\x01")
    assert derive_bt_key(zero, b"other") != pair
    assert derive_bt_key(BluetoothAddress(b"\x00" * 5 + b"\x01"), b"ctx") != pair


def test_seeded_secret_known_answer():
    drbg_key = _oracle_hmac(b"mfa-sim/drbg", (0).to_bytes(8, "big") + b"/")
    expected = _oracle_hmac(drbg_key, (0).to_bytes(8, "big"))
    assert gen_secret(SeededRandom(0)).value == expected


def test_seed_zero_known_answers():
    assert gen_secret(SeededRandom(0)).value.hex() == (
        "2a8de43fac8213b96bea92f58a3ae62b9ecf2a432f1e3f8f90b895c7daf4fd82"
    )
    assert gen_nonce10(SeededRandom(0)).digits == "2183209574"


def test_seeded_random_is_deterministic_and_forks_independently():
    a, b = SeededRandom(42), SeededRandom(42)
    assert a.bytes(100) == b.bytes(100)
    assert SeededRandom(42).fork("x").bytes(32) != SeededRandom(42).fork("y").bytes(32)
    assert SeededRandom(42).fork("x").bytes(32) == SeededRandom(42).fork("x").bytes(32)
    assert SeededRandom(1).bytes(32) != SeededRandom(2).bytes(32)


def test_gen_nonce10_format_and_digit_coverage(rng):
    draws = [gen_nonce10(rng).digits for _ in range(10_000)]
    assert all(re.fullmatch(r"[0-9]{10}", d) for d in draws)
    for position in range(10):
        counts = Counter(d[position] for d in draws)
        assert set(counts) == set("0123456789"), position
        observed = np.array([counts[digit] for digit in "0123456789"])
        chi_square = float(((observed - 1_000) ** 2 / 1_000).sum())
        # 9 degrees of freedom; 45 is far past the 1e-6 tail
        assert chi_square < 45, (position, chi_square)


def test_gen_nonce10_skips_biased_bytes():
    assert gen_nonce10(FixedRandom(bytes([250, 255, 7, 13, 249]))).digits == "7390000000"
    assert gen_nonce10(FixedRandom(bytes([251] * 10 + [1] * 10))).digits == "1111111111"


@pytest.mark.parametrize(
    "digits, expected",
    [("0000000000", "0000000001"), ("0000000009", "0000000010"), ("9999999999", "0000000000")],
)
def test_nonce_increment(digits, expected):
    assert Nonce10(digits).increment().digits == expected


def test_nonce_increment_is_injective_near_the_wrap():
    starts = [f"{n:010d}" for n in list(range(0, 500)) + list(range(9_999_999_500, 10_000_000_000))]
    images = {Nonce10(s).increment().digits for s in starts}
    assert len(images) == len(starts)


@pytest.mark.parametrize("bad", ["123", "12345678901", "12345abcde", " 123456789"])
def test_nonce_rejects_bad_digits(bad):
    with pytest.raises(ValueError):
        Nonce10(bad)


def test_empty_plaintext_is_one_block(rng):
    env = seal(_keys(), b"", rng)
    assert len(env.ct) == 16
    assert crypto_core.open(_keys(), env) == b""


def test_each_seal_draws_a_fresh_iv(rng):
    keys = _keys()
    ivs = {seal(keys, b"same", rng).iv for _ in range(100)}
    assert len(ivs) == 100


def test_seal_open_roundtrip(rng):
    for _ in range(1000):
        keys = KeyPair(rng.bytes(32), rng.bytes(32))
        pt = rng.bytes(rng.randbelow(200))
        assert crypto_core.open(keys, seal(keys, pt, rng)) == pt
    big = rng.bytes(64 * 1024)
    assert crypto_core.open(_keys(), seal(_keys(), big, rng)) == big


def test_every_bit_flip_is_a_mac_mismatch(rng):
    keys = _keys()
    raw = seal(keys, b"x" * 40, rng).to_bytes()
    assert len(raw) == 16 + 32 + 48
    for bit in range(len(raw) * 8):
        flipped = bytearray(raw)
        flipped[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(MacMismatch):
            crypto_core.open(keys, EncryptedEnvelope.from_bytes(bytes(flipped)))


def test_wrong_keys_are_a_mac_mismatch(rng):
    env = seal(_keys(0), b"secret", rng)
    with pytest.raises(MacMismatch):
        crypto_core.open(_keys(1), env)
    wrong_enc = KeyPair(_keys(1).k_e, _keys(0).k_m)
    # right MAC key, wrong cipher key: garbage plaintext or bad padding, never the original
    try:
        assert crypto_core.open(wrong_enc, env) != b"secret"
    except BadPadding:
        pass
    assert crypto_core.try_open(_keys(1), env) is None


def test_bad_padding_after_valid_mac():
    keys = _keys()
    iv = b"\x05" * 16
    ct = AES.new(keys.k_e, AES.MODE_CBC, iv).encrypt(b"\x00" * 16)
    env = EncryptedEnvelope(iv, _oracle_hmac(keys.k_m, iv + ct), ct)
    with pytest.raises(BadPadding):
        crypto_core.open(keys, env)


def test_envelope_wire_format(rng):
    env = seal(_keys(), b"payload", rng)
    assert EncryptedEnvelope.from_hex(env.hex()) == env
    with pytest.raises(MalformedMessage):
        EncryptedEnvelope.from_bytes(env.to_bytes()[:-1])
    with pytest.raises(MalformedMessage):
        EncryptedEnvelope.from_bytes(env.to_bytes()[:48])
    with pytest.raises(MalformedMessage):
        EncryptedEnvelope.from_hex("zz")


def test_fixed_length_types_reject_wrong_sizes():
    with pytest.raises(ValueError):
        SecretKey(b"\x00" * 31)
    with pytest.raises(ValueError):
        Salt(b"\x00" * 17)
    with pytest.raises(ValueError):
        EncryptedEnvelope(b"\x00" * 16, b"\x00" * 32, b"")


def test_seeded_seal_is_deterministic():
    a = seal(_keys(), b"hello", SeededRandom(9, "iv"))
    b = seal(_keys(), b"hello", SeededRandom(9, "iv"))
    assert a == b
