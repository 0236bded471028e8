from __future__ import annotations

import pytest

from src.protocol.crypto_core import derive_key_from_password, gen_salt, gen_secret, gen_token
from src.protocol.errors import ScenarioError
from src.protocol.messages import MessageKind, message
from src.sim.adversary import (
    Adversary,
    AttackerCapabilities,
    AttackKind,
    Roles,
    VictimSetup,
    message_terms,
    run_attack,
    secrecy_report,
)
from src.sim.terms import AcceptRecord, Atom, AttackerKnowledge, Enc, Key, ProvenanceLedger, term_ref
from tests.helpers import EM, PWD, honest_world, login, random_message

ROLES = Roles("server", frozenset({"phone"}), frozenset({"desktop"}))


def _victim(profile) -> VictimSetup:
    return VictimSetup(EM, PWD, profile, "phone", "desktop")


def _attached(caps: AttackerCapabilities, location: str = "home", seed: int = 1):
    world, profile = honest_world(seed)
    adversary = Adversary("attacker", caps, location, _victim(profile), seed=seed)
    world.add_adversary(adversary)
    return world, profile, adversary


def _sources(world, source: str) -> list[dict]:
    return [line for line in world.lines if line.get("type") == "observe" and line["source"] == source]


@pytest.mark.parametrize(
    "kind, flags",
    [
        (AttackKind.RT_MITM, {"phish_ui_observe", "rt_relay", "sniff_bt_addr"}),
        (AttackKind.CR_MITM, {"cr_remote_desktop", "rt_relay", "sniff_bt_addr"}),
        (AttackKind.MBE_PHISH, {"phish_ui_observe"}),
        (AttackKind.REPLAY, {"replay"}),
        (AttackKind.SPOOF_APP, {"spoof_app", "sniff_bt_addr"}),
        (AttackKind.KEYSTROKE_LOG, {"keystroke_log"}),
    ],
)
def test_capabilities_per_attack(kind, flags):
    caps = AttackerCapabilities.for_kind(kind)
    on = {name for name in AttackerCapabilities.__dataclass_fields__ if getattr(caps, name)}
    assert on == flags


def test_message_terms(rng):
    ledger = ProvenanceLedger()
    msg = random_message(MessageKind.AUTH_SUBMIT, rng)
    terms = message_terms(msg, ledger)
    assert Atom.of(str(msg["bt2"]).encode("ascii")) in terms
    assert message_terms(msg, ledger, envelopes_only=True) == [ledger.term_for_envelope(msg["env"])]

    result = message(MessageKind.LOGIN_RESULT, "server", "phone", em="a@b", ok=True, sid=b"\x01", error="")
    labels = [t.label for t in message_terms(result, ledger)]
    assert "ok" not in labels
    assert sorted(labels) == ["em", "error", "sid"]


def test_empty_report_is_safe():
    report = secrecy_report([], AttackerKnowledge(), {}, [], ROLES)
    assert report.all_safe
    assert report.secrets == [] and report.goals == []
    assert report.to_doc() == {"secrets": [], "goals": [], "all_safe": True}


def test_report_flags_derivable_secrets():
    aid, mat = Atom.of(b"aid"), Atom.of(b"material")
    salt = Atom.of(b"salt")
    envelope = Enc(Key("pwkdf", (mat, salt)), aid)
    secrets = [("AID", aid.ref), ("AID", Atom.of(b"aid-2").ref), ("SK", Atom.of(b"sk").ref)]

    shut = secrecy_report(secrets, AttackerKnowledge([envelope, salt]), {}, [], ROLES)
    assert shut.all_safe
    assert [s.label for s in shut.secrets] == ["AID#1", "AID#2", "SK#1"]

    leaked = secrecy_report(secrets, AttackerKnowledge([envelope, salt, mat]), {}, [], ROLES)
    assert leaked.leaked() == ["AID#1"]
    assert not leaked.all_safe
    assert leaked.to_doc()["secrets"][0]["verdict"] == "UNSAFE"


def test_report_checks_who_sealed_what():
    accepts = [
        AcceptRecord("server", "ok", "d-ok", "phone"),
        AcceptRecord("server", "token", "d-token", "desktop"),
        AcceptRecord("phone", "rotation", "d-rot", "server"),
    ]
    honest = {"d-ok": "phone", "d-token": "desktop", "d-rot": "server"}
    report = secrecy_report([], AttackerKnowledge(), honest, accepts, ROLES)
    assert [(g.goal, g.holds, g.checked) for g in report.goals] == [
        ("ok_sealed_by_first_device", True, 1),
        ("token_sealed_and_presented_by_desktop", True, 1),
        ("rotation_sealed_by_server", True, 1),
    ]

    forged = {**honest, "d-token": "attacker"}
    report = secrecy_report([], AttackerKnowledge(), forged, accepts[1:2], ROLES)
    (goal,) = report.goals
    assert not goal.holds
    assert goal.detail == "sealer=attacker presenter=desktop"
    assert not report.all_safe


def test_phishing_sees_the_desktop_screen():
    world, profile, adversary = _attached(AttackerCapabilities(phish_ui_observe=True))
    login(world, profile)
    learned = [t for line in _sources(world, "ui") for t in line["terms"]]
    assert {"a": term_ref(f"Signed in as {EM}".encode()), "l": "ui"} in learned
    assert adversary.knowledge.envelope_count() == 0


def test_keystroke_logger_learns_nothing_from_the_desktop():
    world, profile, adversary = _attached(AttackerCapabilities(keystroke_log=True))
    login(world, profile)
    assert _sources(world, "ui") == []
    assert adversary.knowledge.envelope_count() == 0


def test_replay_attacker_nearby_captures_the_tap():
    world, profile, adversary = _attached(AttackerCapabilities(replay=True))
    login(world, profile)
    assert [m.kind for m in adversary.captured_nfc] == [MessageKind.NFC_AUTH_STRING]
    assert adversary.recorded
    assert adversary.knowledge.envelope_count() > 0
    record = world.server.store.require(EM)
    assert not adversary.close_knowledge().can_derive(Atom.of(record.aid.value))


def test_replay_attacker_away_misses_the_tap():
    world, profile, adversary = _attached(AttackerCapabilities(replay=True), location="away")
    login(world, profile)
    assert adversary.captured_nfc == []
    assert adversary.recorded


def test_leak_is_recorded(rng):
    world, _, adversary = _attached(AttackerCapabilities())
    secret = gen_secret(rng)
    adversary.leak(secret, "SK")
    assert Atom.of(secret.value) in adversary.knowledge
    assert _sources(world, "leak")[0]["terms"] == [{"a": term_ref(secret.value), "l": "SK"}]


def test_envelope_sealed_under_learned_key_opens(rng):
    world, _, adversary = _attached(AttackerCapabilities())
    keys = derive_key_from_password(b"material", gen_salt(rng))
    token = gen_token(rng)
    adversary.learn([Enc(Key("pwkdf", tuple(Atom.of(v) for _, v in keys.origin)), Atom.of(token.value))], "test")
    assert Atom.of(token.value) not in adversary.close_knowledge()
    adversary.learn([Atom.of(v) for _, v in keys.origin], "test")
    assert Atom.of(token.value) in adversary.close_knowledge()


def test_run_attack_needs_an_adversary():
    world, _ = honest_world()
    with pytest.raises(ScenarioError):
        run_attack(AttackKind.MBE_PHISH, world)


def test_unattached_adversary_cannot_attack():
    world, profile = honest_world()
    adversary = Adversary("attacker", AttackerCapabilities(), "home", _victim(profile))
    with pytest.raises(ScenarioError):
        adversary.run_attack(AttackKind.MBE_PHISH)


def test_passive_attack_outcome():
    world, _, _ = _attached(AttackerCapabilities.for_kind(AttackKind.MBE_PHISH))
    outcome = run_attack(AttackKind.MBE_PHISH, world, seed=3)
    assert not outcome.authenticated_as_victim
    assert outcome.report.all_safe
    assert outcome.envelopes_known == 0
    assert outcome.seed == world.seed
