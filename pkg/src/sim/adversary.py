"""Attacker archetypes, what each may observe, scripted attacks and the secrecy report.

Observation rules, applied at delivery time:

* HTTPS: full message terms only when the adversary runs one of the endpoints
  (``reads``); with ``replay`` it records the message and learns its envelopes
  as opaque ciphertext.
* NFC: with ``replay`` when co-located with the tapping device; with
  ``cr_remote_desktop`` when the tap lands on the victim's desktop.
* UI: screen and keyboard of the victim's desktop, with ``phish_ui_observe``
  (everything) or ``keystroke_log`` (typed lines only).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, Iterable

import structlog

from src.protocol.biometric import IdentityProfile
from src.protocol.crypto_core import (
    EncryptedEnvelope,
    SecretKey,
    SeededRandom,
    derive_bt_key,
    derive_key_from_password,
    derive_keys,
    gen_nonce10,
    gen_salt,
    gen_secret,
)
from src.protocol.devices import FirstDevice, SecondDevice, UiLine
from src.protocol.errors import ScenarioError
from src.protocol.messages import (
    SCHEMAS,
    FieldType,
    MessageKind,
    ProtocolMessage,
    gen_session_id,
    message,
)
from src.protocol.store import SessionState
from src.protocol.trace import traced_seal
from src.sim.channels import BluetoothAddress, ChannelKind, Event
from src.sim.terms import (
    AcceptRecord,
    Atom,
    AttackerKnowledge,
    ProvenanceLedger,
    Term,
    public_atoms,
    term_to_json,
)

if TYPE_CHECKING:
    from src.sim.world import World

logger = structlog.get_logger()


class AttackKind(str, Enum):
    RT_MITM = "rt_mitm"
    CR_MITM = "cr_mitm"
    MBE_PHISH = "mbe_phish"
    REPLAY = "replay"
    SPOOF_APP = "spoof_app"
    KEYSTROKE_LOG = "keystroke_log"


@dataclass(frozen=True)
class AttackerCapabilities:
    phish_ui_observe: bool = False
    rt_relay: bool = False
    cr_remote_desktop: bool = False
    replay: bool = False
    spoof_app: bool = False
    sniff_bt_addr: bool = False
    keystroke_log: bool = False

    @classmethod
    def for_kind(cls, kind: AttackKind) -> "AttackerCapabilities":
        return {
            AttackKind.RT_MITM: cls(phish_ui_observe=True, rt_relay=True, sniff_bt_addr=True),
            AttackKind.CR_MITM: cls(cr_remote_desktop=True, rt_relay=True, sniff_bt_addr=True),
            AttackKind.MBE_PHISH: cls(phish_ui_observe=True),
            AttackKind.REPLAY: cls(replay=True),
            AttackKind.SPOOF_APP: cls(spoof_app=True, sniff_bt_addr=True),
            AttackKind.KEYSTROKE_LOG: cls(keystroke_log=True),
        }[kind]


@dataclass(frozen=True)
class VictimSetup:
    em: str
    pwd: str
    profile: IdentityProfile
    first_device: str
    second_device: str


def message_terms(msg: ProtocolMessage, ledger: ProvenanceLedger, envelopes_only: bool = False) -> list[Term]:
    terms: list[Term] = []
    for name, ftype in SCHEMAS[msg.kind].items():
        value = msg[name]
        if ftype is FieldType.ENV:
            terms.append(ledger.term_for_envelope(value))
        elif envelopes_only or ftype is FieldType.BOOL:
            continue
        elif ftype is FieldType.STR:
            terms.append(Atom.of(value.encode("utf-8"), name))
        elif ftype is FieldType.BYTES:
            terms.append(Atom.of(value, name))
        elif ftype in (FieldType.SALT, FieldType.SID):
            terms.append(Atom.of(value.value, name))
        elif ftype is FieldType.NONCE:
            terms.append(Atom.of(value.encode(), name))
        elif ftype is FieldType.BT:
            terms.append(Atom.of(str(value).encode("ascii"), name))
        else:
            terms.append(Atom.of(value.to_bytes(), name))
    return terms


# Reports


@dataclass(frozen=True)
class SecretVerdict:
    label: str
    ref: str
    safe: bool


@dataclass(frozen=True)
class GoalVerdict:
    goal: str
    holds: bool
    checked: int
    detail: str = ""


@dataclass(frozen=True)
class Roles:
    server: str
    victim_first: frozenset[str]
    victim_second: frozenset[str]


@dataclass
class SecrecyReport:
    secrets: list[SecretVerdict] = field(default_factory=list)
    goals: list[GoalVerdict] = field(default_factory=list)

    @property
    def all_safe(self) -> bool:
        return all(s.safe for s in self.secrets) and all(g.holds for g in self.goals)

    def leaked(self) -> list[str]:
        return [s.label for s in self.secrets if not s.safe]

    def to_doc(self) -> dict:
        return {
            "secrets": [{"label": s.label, "verdict": "SAFE" if s.safe else "UNSAFE"} for s in self.secrets],
            "goals": [
                {"goal": g.goal, "holds": g.holds, "checked": g.checked, "detail": g.detail} for g in self.goals
            ],
            "all_safe": self.all_safe,
        }


def _numbered(secrets: Iterable[tuple[str, str]]) -> list[tuple[str, str]]:
    seen: dict[str, int] = {}
    out = []
    for label, ref in secrets:
        seen[label] = seen.get(label, 0) + 1
        out.append((f"{label}#{seen[label]}", ref))
    return out


def secrecy_report(
    secrets: Iterable[tuple[str, str]],
    knowledge: AttackerKnowledge,
    sealers: dict[str, str],
    accepts: Iterable[AcceptRecord],
    roles: Roles,
) -> SecrecyReport:
    """Per-secret SAFE/UNSAFE against the closed knowledge, plus the authenticity goals.

    A goal with nothing to check is left out, so an empty transcript gives an
    empty report.
    """
    closed = knowledge.close()
    report = SecrecyReport()
    for label, ref in _numbered(secrets):
        report.secrets.append(SecretVerdict(label, ref, not closed.can_derive(Atom(ref))))

    accepts = list(accepts)
    checks: list[tuple[str, str, Callable[[AcceptRecord, str | None], bool]]] = [
        ("ok_sealed_by_first_device", "ok", lambda a, s: s in roles.victim_first),
        (
            "token_sealed_and_presented_by_desktop",
            "token",
            lambda a, s: s in roles.victim_second and a.presenter == s,
        ),
        ("rotation_sealed_by_server", "rotation", lambda a, s: s == roles.server),
    ]
    for goal, what, rule in checks:
        relevant = [a for a in accepts if a.what == what]
        if not relevant:
            continue
        bad = [a for a in relevant if not rule(a, sealers.get(a.digest))]
        detail = ""
        if bad:
            detail = f"sealer={sealers.get(bad[0].digest)} presenter={bad[0].presenter}"
        report.goals.append(GoalVerdict(goal, not bad, len(relevant), detail))
    return report


@dataclass
class AttackOutcome:
    scenario: str
    seed: int
    authenticated_as_victim: bool
    report: SecrecyReport
    steps: int
    errors: list[str] = field(default_factory=list)
    envelopes_known: int = 0

    @property
    def secrets_leaked(self) -> list[str]:
        return self.report.leaked()

    def to_doc(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "authenticated": self.authenticated_as_victim,
            "secrets_leaked": self.secrets_leaked,
            "steps": self.steps,
            "errors": self.errors,
        }


# The adversary


class Adversary:
    def __init__(
        self,
        name: str,
        caps: AttackerCapabilities,
        location: str,
        victim: VictimSetup,
        operated: Iterable[str] = (),
        reads: Iterable[str] = (),
        seed: int = 0,
    ) -> None:
        self.name = name
        self.caps = caps
        self.location = location
        self.victim = victim
        self.operated = frozenset(operated) | {name}
        self.reads = frozenset(reads) | {name}
        self.rng = SeededRandom(seed, f"adversary/{name}")
        self.bt = BluetoothAddress.random(self.rng)
        self.knowledge = AttackerKnowledge()
        self.recorded: list[ProtocolMessage] = []
        self.captured_nfc: list[ProtocolMessage] = []
        self.triggers: dict[MessageKind, Callable[[ProtocolMessage], None]] = {}
        self.world: "World | None" = None

    # Knowledge

    def attach(self, world: "World") -> None:
        self.world = world
        initial: list[Term] = [*public_atoms(), Atom.of(self.victim.em.encode("utf-8"), "em")]
        initial.append(Atom.of(str(self.bt).encode("ascii"), "bt"))
        for device_id in sorted(self.operated):
            if device_id in world.topology.addresses:
                initial.append(Atom.of(str(world.topology.addresses[device_id]).encode("ascii"), "bt"))
            device = world.agents.get(device_id)
            if isinstance(device, FirstDevice):
                initial.append(Atom.of(device.sk.value, "own_sk"))
        if self.caps.sniff_bt_addr:
            victim_bt = world.topology.addresses.get(self.victim.first_device)
            if victim_bt is not None:
                initial.append(Atom.of(str(victim_bt).encode("ascii"), "bt1"))
        self.learn(initial, "initial")

    def leak(self, secret: SecretKey, label: str) -> None:
        """Hand the adversary a secret outright; positive controls only."""
        self.learn([Atom.of(secret.value, label)], "leak")

    def learn(self, terms: list[Term], source: str, seq: int | None = None) -> None:
        fresh = [t for t in terms if t not in self.knowledge]
        if not fresh:
            return
        self.knowledge.update(fresh)
        if self.world is not None:
            self.world.record_line(
                {
                    "type": "observe",
                    "adversary": self.name,
                    "source": source,
                    "seq": seq,
                    "terms": [term_to_json(t) for t in fresh],
                }
            )

    def close_knowledge(self) -> AttackerKnowledge:
        return self.knowledge.close()

    # Observation

    def observe(self, event: Event, msg: ProtocolMessage | None) -> None:
        world = self.world
        if world is None:
            return
        if event.kind is ChannelKind.UI:
            line: UiLine = event.message
            if event.src != self.victim.second_device:
                return
            if self.caps.phish_ui_observe or (self.caps.keystroke_log and line.typed):
                self.learn([Atom.of(line.text.encode("utf-8"), "ui")], "ui", event.seq)
            return
        if msg is None:
            return
        if event.kind is ChannelKind.HTTPS:
            if event.src in self.reads or event.dst in self.reads:
                self.learn(message_terms(msg, world.ledger), "https", event.seq)
            elif self.caps.replay:
                self.recorded.append(msg)
                self.learn(message_terms(msg, world.ledger, envelopes_only=True), "https", event.seq)
        elif event.kind is ChannelKind.NFC:
            nearby = self.caps.replay and world.topology.proximate(self.name, event.src)
            remote = self.caps.cr_remote_desktop and event.dst == self.victim.second_device
            if nearby or remote or event.dst in self.reads:
                self.captured_nfc.append(msg)
                self.learn(message_terms(msg, world.ledger), "nfc", event.seq)
        trigger = self.triggers.get(msg.kind)
        if trigger is not None and msg.sender not in self.operated:
            del self.triggers[msg.kind]
            trigger(msg)

    # Acting

    def _send(self, kind: MessageKind, **body) -> None:
        self.world.inject(message(kind, self.name, self.world.server.principal, **body))

    def _forge(self, keys, plaintext: bytes) -> EncryptedEnvelope:
        return traced_seal(self.world.ledger, self.name, keys, plaintext, self.rng)

    def _random_keys(self):
        return derive_key_from_password(self.rng.bytes(32), gen_salt(self.rng))

    def authenticated_as_victim(self) -> bool:
        return bool(self.world.logged_in_devices(self.victim.em) & self.operated)

    def _victim_login(self, tap_target: str | None = None) -> None:
        v = self.victim
        self.world.begin_login(v.first_device, v.em, v.profile, tap_target=tap_target or v.second_device)

    def _session_state(self) -> SessionState:
        record = self.world.server.store.get(self.victim.em)
        return SessionState.IDLE if record is None else record.session_state

    def run_attack(self, kind: AttackKind) -> None:
        if self.world is None:
            raise ScenarioError("adversary is not attached to a world")
        script = {
            AttackKind.RT_MITM: self._rt_mitm,
            AttackKind.CR_MITM: self._cr_mitm,
            AttackKind.MBE_PHISH: self._passive,
            AttackKind.KEYSTROKE_LOG: self._passive,
            AttackKind.REPLAY: self._replay,
            AttackKind.SPOOF_APP: self._spoof_app,
        }[kind]
        logger.info("attack_started", kind=kind.value, adversary=self.name)
        script()
        self.world.run()

    def _rt_mitm(self) -> None:
        """Relay in real time whatever the victim's screen shows; nothing useful is typed there."""
        w, v = self.world, self.victim
        bt1 = w.topology.addresses.get(v.first_device) if self.caps.sniff_bt_addr else self.bt
        self._victim_login()
        w.run_until(lambda: self._session_state() is not SessionState.IDLE)
        # a parallel session for the same user while the victim's is open
        self._send(MessageKind.LOGIN_CONTEXT, em=v.em, n1=gen_nonce10(self.rng), bt1=bt1)
        w.run()
        # own session: the identifier has to be forged without SK
        n1 = gen_nonce10(self.rng)
        self._send(MessageKind.LOGIN_CONTEXT, em=v.em, n1=n1, bt1=bt1)
        w.run()
        forged_blob = self._forge(self._random_keys(), gen_secret(self.rng).value)
        identifier = self._forge(derive_keys(gen_secret(self.rng), n1), forged_blob.to_bytes())
        self._send(MessageKind.IDENTIFY, em=v.em, env=identifier)
        self._send(MessageKind.AUTH_SUBMIT, env=self._forge(self._random_keys(), v.em.encode()), bt2=self.bt)

    def _cr_mitm(self) -> None:
        """Capture the tap on a remotely controlled desktop and replay it from the attacker's desktop."""
        w, v = self.world, self.victim
        desks = [d for d in sorted(self.operated) if isinstance(w.agents.get(d), SecondDevice)]
        if not desks:
            raise ScenarioError("cr_mitm needs an attacker-operated second device")
        desk: SecondDevice = w.agents[desks[0]]
        self._victim_login()
        w.run_until(lambda: bool(self.captured_nfc))
        if not self.captured_nfc:
            logger.info("nothing_captured", adversary=self.name)
            return
        auth = self.captured_nfc[-1]
        desk.receive_auth_string(auth["env"].to_bytes(), w.now)
        w.post_all(desk.sd_receive_and_submit())
        w.run()
        if self.authenticated_as_victim():
            return
        # knowing BT1 is not enough without the session id the token is bound to
        bt1 = w.topology.addresses.get(v.first_device, self.bt)
        guess = gen_session_id(self.rng)
        self._send(MessageKind.PROXIMITY_TOKEN, env=self._forge(derive_bt_key(bt1, guess.value), self.rng.bytes(16)))

    def _passive(self) -> None:
        self._victim_login()
        self.world.run()
        if self.knowledge.envelope_count():
            logger.warning("envelope_observed", adversary=self.name, count=self.knowledge.envelope_count())

    def _replay(self) -> None:
        w, v = self.world, self.victim
        proximity: list[ProtocolMessage] = []

        def replay_token(msg: ProtocolMessage) -> None:
            proximity.append(msg)
            self._send(MessageKind.PROXIMITY_TOKEN, env=msg["env"])

        self.triggers[MessageKind.PROXIMITY_TOKEN] = replay_token
        self._victim_login()
        w.run()

        # after the session: every recorded artifact is stale
        for old in [m for m in self.recorded if m.kind is MessageKind.AUTH_SUBMIT][:1]:
            self._send(MessageKind.AUTH_SUBMIT, env=old["env"], bt2=self.bt)
        for old in proximity[:1]:
            self._send(MessageKind.PROXIMITY_TOKEN, env=old["env"])
        for old in self.captured_nfc[:1]:
            w.inject(
                message(MessageKind.NFC_AUTH_STRING, self.name, v.second_device, env=old["env"]),
                ChannelKind.NFC,
            )
        w.run()

        stale = [m for m in self.recorded if m.kind is MessageKind.IDENTIFY]
        if not stale:
            return
        self.triggers[MessageKind.LOGIN_CONTEXT] = lambda msg: self._send(
            MessageKind.IDENTIFY, em=v.em, env=stale[0]["env"]
        )
        self._victim_login()
        w.run()
        # the victim notices the failed attempt and tries again
        if w.first_device(v.first_device).completed_logins < 2:
            self._victim_login()

    def _spoof_app(self) -> None:
        """Run the app logic on an attacker phone holding the victim's copied AID blob."""
        w, v = self.world, self.victim
        phones = [d for d in sorted(self.operated) if isinstance(w.agents.get(d), FirstDevice)]
        desks = [d for d in sorted(self.operated) if isinstance(w.agents.get(d), SecondDevice)]
        if not phones or not desks:
            raise ScenarioError("spoof_app needs an attacker phone and desktop")
        phone = w.first_device(phones[0])
        blob = w.first_device(v.first_device).enc_aid_blob
        if blob is None:
            raise ScenarioError("victim is not registered")
        phone.install_blob(blob)
        self.learn([w.ledger.term_for_envelope(blob)], "stolen_blob")
        w.begin_login(phone.id, v.em, v.profile, tap_target=desks[0])

    def outcome(self, kind: AttackKind, roles: Roles, extra: Iterable["Adversary"] = ()) -> AttackOutcome:
        knowledge = self.knowledge.copy()
        for other in extra:
            knowledge.update(other.knowledge.terms)
        w = self.world
        sealers = {digest: record.sealer for digest, record in w.ledger.seals.items()}
        report = secrecy_report(w.ledger.secrets, knowledge, sealers, w.ledger.accepts, roles)
        return AttackOutcome(
            scenario=kind.value,
            seed=w.seed,
            authenticated_as_victim=self.authenticated_as_victim(),
            report=report,
            steps=len(w.deliveries),
            errors=w.error_codes(),
            envelopes_known=knowledge.envelope_count(),
        )


def run_attack(kind: AttackKind, world: "World", seed: int | None = None) -> AttackOutcome:
    """Run ``kind`` with the first adversary attached to ``world``."""
    if not world.adversaries:
        raise ScenarioError("world has no adversary")
    adversary = world.adversaries[0]
    if seed is not None:
        adversary.rng = SeededRandom(seed, f"adversary/{adversary.name}")
    adversary.run_attack(kind)
    roles = Roles(
        world.server.principal,
        frozenset({adversary.victim.first_device}),
        frozenset({adversary.victim.second_device}),
    )
    return adversary.outcome(kind, roles, world.adversaries[1:])
