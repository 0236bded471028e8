"""Symbolic message terms, attacker knowledge closure and the seal provenance ledger.

Terms never hold secret bytes. An ``Atom`` is identified by the SHA-256 of its
value, so transcripts can carry knowledge sets without leaking what they
describe. Keys are terms over their derivation inputs: anyone who knows every
input can derive the key.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Union

from src.config import AID_KEY_SALT, BT_KEY_SALT, FIXED_TOKEN, MATCH_TAG, OK_CHALLENGE
from src.protocol.crypto_core import EncryptedEnvelope, KeyPair

_FN_BY_ORIGIN = {
    ("secret", "nonce"): "kdf",
    ("material", "salt"): "pwkdf",
    ("bt", "context"): "btkdf",
}


def term_ref(value: bytes) -> str:
    return hashlib.sha256(value).hexdigest()


@dataclass(frozen=True)
class Atom:
    ref: str
    label: str = field(default="", compare=False)

    @classmethod
    def of(cls, value: bytes, label: str = "") -> "Atom":
        return cls(term_ref(value), label)


@dataclass(frozen=True)
class Pair:
    left: "Term"
    right: "Term"


@dataclass(frozen=True)
class Key:
    fn: str
    inputs: tuple["Term", ...]


@dataclass(frozen=True)
class Enc:
    key: Key
    body: "Term"


Term = Union[Atom, Pair, Key, Enc]


def pair_of(parts: Iterable[Term]) -> Term:
    """Right-nested pair; a single part is returned as is."""
    items = list(parts)
    if not items:
        raise ValueError("pair_of needs at least one term")
    term = items[-1]
    for item in reversed(items[:-1]):
        term = Pair(item, term)
    return term


def key_term(keys: KeyPair) -> Key:
    labels = tuple(label for label, _ in keys.origin)
    fn = _FN_BY_ORIGIN.get(labels)
    if fn is None:
        raise ValueError(f"key pair has no recognised derivation: {labels}")
    return Key(fn, tuple(Atom.of(value, label) for label, value in keys.origin))


def public_atoms() -> list[Term]:
    """Protocol constants every principal, attacker included, knows."""
    return [
        Atom.of(AID_KEY_SALT, "AID_KEY_SALT"),
        Atom.of(BT_KEY_SALT, "BT_KEY_SALT"),
        Atom.of(FIXED_TOKEN, "FIXED_TOKEN"),
        Atom.of(MATCH_TAG, "MATCH_TAG"),
        Atom.of(OK_CHALLENGE, "OK"),
    ]


class AttackerKnowledge:
    """A set of terms; ``close`` applies the derivation rules up to a fixed point."""

    def __init__(self, terms: Iterable[Term] = ()) -> None:
        self.terms: set[Term] = set(terms)

    def __contains__(self, term: Term) -> bool:
        return term in self.terms

    def __len__(self) -> int:
        return len(self.terms)

    def add(self, term: Term) -> None:
        self.terms.add(term)

    def update(self, terms: Iterable[Term]) -> None:
        self.terms.update(terms)

    def copy(self) -> "AttackerKnowledge":
        return AttackerKnowledge(self.terms)

    def can_derive(self, term: Term) -> bool:
        """Synthesis: the term is known or can be built from known parts."""
        if term in self.terms:
            return True
        if isinstance(term, Pair):
            return self.can_derive(term.left) and self.can_derive(term.right)
        if isinstance(term, Key):
            return all(self.can_derive(t) for t in term.inputs)
        if isinstance(term, Enc):
            return self.can_derive(term.key) and self.can_derive(term.body)
        return False

    def close(self) -> "AttackerKnowledge":
        """Analysis to a fixed point: split pairs, open envelopes whose key is derivable."""
        closed = self.copy()
        changed = True
        while changed:
            changed = False
            for term in list(closed.terms):
                found: tuple[Term, ...] = ()
                if isinstance(term, Pair):
                    found = (term.left, term.right)
                elif isinstance(term, Enc) and closed.can_derive(term.key):
                    found = (term.body,)
                for new in found:
                    if new not in closed.terms:
                        closed.terms.add(new)
                        changed = True
        return closed

    def atom_refs(self) -> set[str]:
        return {t.ref for t in self.terms if isinstance(t, Atom)}

    def envelope_count(self) -> int:
        return sum(isinstance(t, Enc) for t in self.terms)


def close_knowledge(k: AttackerKnowledge) -> AttackerKnowledge:
    return k.close()


# Serialisation


def term_to_json(term: Term) -> dict:
    if isinstance(term, Atom):
        return {"a": term.ref, "l": term.label} if term.label else {"a": term.ref}
    if isinstance(term, Pair):
        return {"p": [term_to_json(term.left), term_to_json(term.right)]}
    if isinstance(term, Key):
        return {"k": term.fn, "in": [term_to_json(t) for t in term.inputs]}
    return {"e": [term_to_json(term.key), term_to_json(term.body)]}


def term_from_json(doc: dict) -> Term:
    if not isinstance(doc, dict):
        raise ValueError("term must be an object")
    if "a" in doc:
        return Atom(str(doc["a"]), str(doc.get("l", "")))
    if "p" in doc:
        left, right = doc["p"]
        return Pair(term_from_json(left), term_from_json(right))
    if "k" in doc:
        return Key(str(doc["k"]), tuple(term_from_json(t) for t in doc["in"]))
    if "e" in doc:
        key, body = doc["e"]
        parsed = term_from_json(key)
        if not isinstance(parsed, Key):
            raise ValueError("envelope key must be a key term")
        return Enc(parsed, term_from_json(body))
    raise ValueError(f"unknown term shape: {sorted(doc)}")


# Provenance


@dataclass(frozen=True)
class SealRecord:
    digest: str
    sealer: str
    term: Enc


@dataclass(frozen=True)
class AcceptRecord:
    acceptor: str
    what: str
    digest: str
    presenter: str


class ProvenanceLedger:
    """Tracer that remembers who sealed which envelope and what it symbolically contains."""

    def __init__(self) -> None:
        self.seals: dict[str, SealRecord] = {}
        self.order: list[SealRecord] = []
        self.secrets: list[tuple[str, str]] = []
        self.accepts: list[AcceptRecord] = []

    def sealed(self, sealer, keys, plaintext, env, parts=None) -> None:
        if parts:
            body = pair_of(Atom.of(p) for p in parts)
        else:
            nested = self.seals.get(term_ref(plaintext))
            body = nested.term if nested is not None else Atom.of(plaintext)
        record = SealRecord(term_ref(env.to_bytes()), sealer, Enc(key_term(keys), body))
        self.seals[record.digest] = record
        self.order.append(record)

    def secret(self, label: str, value: bytes) -> None:
        self.secrets.append((label, term_ref(value)))

    def accepted(self, acceptor, what, env, presenter) -> None:
        self.accepts.append(AcceptRecord(acceptor, what, term_ref(env.to_bytes()), presenter))

    def term_for_envelope(self, env: EncryptedEnvelope) -> Term:
        """The sealed term if the envelope was produced by a traced seal, else an opaque atom."""
        record = self.seals.get(term_ref(env.to_bytes()))
        return record.term if record is not None else Atom.of(env.to_bytes(), "opaque")

    def sealer_of(self, digest: str) -> str | None:
        record = self.seals.get(digest)
        return None if record is None else record.sealer
