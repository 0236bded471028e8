"""Hooks through which principals report seals, fresh secrets and acceptances.

Agents never read what a tracer does with the information; the simulator
plugs in a provenance ledger, everything else gets ``NullTracer``.
"""
from __future__ import annotations

from typing import Protocol

from src.protocol.crypto_core import EncryptedEnvelope, KeyPair, RandomSource, seal


class SealTracer(Protocol):
    def sealed(
        self,
        sealer: str,
        keys: KeyPair,
        plaintext: bytes,
        env: EncryptedEnvelope,
        parts: tuple[bytes, ...] | None = None,
    ) -> None: ...

    def secret(self, label: str, value: bytes) -> None: ...

    def accepted(self, acceptor: str, what: str, env: EncryptedEnvelope, presenter: str) -> None: ...


class NullTracer:
    def sealed(self, sealer, keys, plaintext, env, parts=None) -> None:
        pass

    def secret(self, label, value) -> None:
        pass

    def accepted(self, acceptor, what, env, presenter) -> None:
        pass


def traced_seal(
    tracer: SealTracer,
    sealer: str,
    keys: KeyPair,
    plaintext: bytes,
    rng: RandomSource,
    parts: tuple[bytes, ...] | None = None,
) -> EncryptedEnvelope:
    env = seal(keys, plaintext, rng)
    tracer.sealed(sealer, keys, plaintext, env, parts)
    return env
