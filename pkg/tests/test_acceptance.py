"""End-to-end runs: bundled scenarios, seed sweeps, positive controls, transcripts."""
from __future__ import annotations

import hashlib
import json
import os
import subprocess
import sys

import pytest

from src.harness import cli
from src.harness.runner import build_world, load_suite, run_scenario, run_suite, verify_transcript
from src.harness.scenario import load_scenario
from src.harness.transcript import dumps_line
from src.protocol.errors import ScenarioError
from src.protocol.store import ServerStore
from tests.helpers import (
    BUNDLED,
    EM,
    GOLDEN_DIR,
    SCENARIO_DIR,
    assert_golden,
    device_aid,
    honest_world,
    login,
    scenario,
    server_aid,
)

ATTACKS = ["rt_mitm", "cr_mitm", "mbe_phish", "replay", "spoof_app", "keystroke_log"]


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenario_passes(name, tmp_path):
    result = run_scenario(scenario(name), tmp_path / f"{name}.jsonl", tmp_path / f"{name}.metrics.json")
    assert result.passed, result.failures
    assert result.exit_code == 0
    metrics = json.loads(result.metrics_path.read_text())
    assert metrics["scenario"] == name


def test_honest_login_leaves_everything_safe():
    result = run_scenario(scenario("honest_login"))
    assert result.outcome == "LoginSuccess"
    assert result.logins == 2
    assert result.report.all_safe
    assert {g.goal for g in result.report.goals} == {
        "ok_sealed_by_first_device",
        "token_sealed_and_presented_by_desktop",
        "rotation_sealed_by_server",
    }


def _login_rotates(seed: int) -> None:
    world, profile = honest_world(seed)
    fd = world.first_device("phone")
    old_blob = fd.enc_aid_blob
    old_aid = server_aid(world)
    login(world, profile)
    assert fd.completed_logins == 1
    assert world.logged_in_devices(EM) == {"phone", "desktop"}
    assert server_aid(world) != old_aid
    assert device_aid(world) == server_aid(world).value

    login(world, profile)
    assert fd.completed_logins == 2
    assert device_aid(world) == server_aid(world).value

    # the blob from before the first rotation no longer identifies the user
    fd.enc_aid_blob = old_blob
    login(world, profile)
    assert fd.completed_logins == 2
    assert "IdentificationFailed" in world.error_codes("phone")


def test_login_rotates_the_aid():
    _login_rotates(1)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(100))
def test_login_rotates_the_aid_for_many_seeds(seed):
    _login_rotates(seed)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", ATTACKS)
def test_attacks_fail_for_many_seeds(name, seed):
    result = run_scenario(scenario(name, seed=seed))
    assert result.outcome == "AttackFailed"
    assert result.passed, result.failures


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("crash_at", range(17))
def test_device_recovers_from_a_crash_at_any_step(crash_at, seed, tmp_path):
    config = scenario("rotation_crash", seed=seed, crash_at=crash_at)
    result = run_scenario(config, root=tmp_path)
    assert result.outcome == "Recovered", result.failures
    assert result.passed


def test_crash_during_rotation_recovers():
    for crash_at in (12, 13, 14):
        result = run_scenario(scenario("rotation_crash", crash_at=crash_at))
        assert result.outcome == "Recovered", (crash_at, result.failures)


# Positive controls: switching a defence off lets the matching attack through.


def test_remote_desktop_succeeds_without_proximity_check():
    result = run_scenario(scenario("cr_mitm", defenses={"proximity_check": False}))
    assert result.outcome == "AttackSucceeded"
    goals = {g.goal: g for g in result.report.goals}
    assert not goals["token_sealed_and_presented_by_desktop"].holds
    assert result.exit_code == 1


def test_replay_succeeds_with_a_reusable_token():
    result = run_scenario(scenario("replay", defenses={"token_single_use": False}))
    assert result.outcome == "AttackSucceeded"


def test_spoofed_app_succeeds_once_sk_leaks():
    result = run_scenario(scenario("spoof_app", leak_sk=True))
    assert result.outcome == "AttackSucceeded"
    leaked = result.report.leaked()
    assert any(label.startswith("AID#") for label in leaked)
    assert any(label.startswith("AID_NEXT#") for label in leaked)


@pytest.mark.parametrize("name", ["honest_login", "replay", "rotation_crash"])
def test_runs_are_deterministic(name):
    digests = {run_scenario(scenario(name)).digest for _ in range(5)}
    assert len(digests) == 1
    assert run_scenario(scenario(name, seed=12345)).digest not in digests


@pytest.mark.parametrize("name", ["honest_login", "cr_mitm"])
def test_bundled_runs_are_frozen(name):
    result = run_scenario(load_scenario(SCENARIO_DIR / f"{name}.json"))
    assert_golden(f"{name}.jsonl", result.transcript)
    assert hashlib.sha256((GOLDEN_DIR / f"{name}.jsonl").read_bytes()).hexdigest() == result.digest


def test_transcript_is_identical_in_a_fresh_interpreter(tmp_path):
    path = tmp_path / "fresh.jsonl"
    subprocess.run(
        [
            sys.executable, "-m", "src.harness.cli", "run",
            "--scenario", str(SCENARIO_DIR / "honest_login.json"),
            "--transcript", str(path),
        ],
        cwd=SCENARIO_DIR.parent,
        env={**os.environ, "PYTHONHASHSEED": "97"},
        check=True,
        capture_output=True,
    )
    assert path.read_bytes() == run_scenario(load_scenario(SCENARIO_DIR / "honest_login.json")).transcript


def test_verify_agrees_with_the_run(tmp_path):
    for name in BUNDLED:
        result = run_scenario(scenario(name), tmp_path / f"{name}.jsonl")
        assert verify_transcript(result.transcript_path).to_doc() == result.report.to_doc()


def test_verify_flags_a_leak(tmp_path):
    result = run_scenario(scenario("spoof_app", leak_sk=True), tmp_path / "leak.jsonl")
    report = verify_transcript(result.transcript_path)
    assert not report.all_safe
    assert "SK#1" in report.leaked()

    # a safe run made unsafe by hand
    rows = run_scenario(scenario("honest_login")).transcript.decode().splitlines()
    ref = json.loads(rows[0])["secrets"][0]["ref"]
    leak = dumps_line({"type": "observe", "adversary": "x", "source": "leak", "seq": None, "terms": [{"a": ref}]})
    path = tmp_path / "edited.jsonl"
    path.write_text("\n".join([*rows[:-1], leak, rows[-1]]) + "\n")
    assert not verify_transcript(path).all_safe


def test_cli_and_library_write_the_same_transcript(tmp_path):
    path = tmp_path / "cli.jsonl"
    code = cli.main(["run", "--scenario", str(SCENARIO_DIR / "replay.json"), "--transcript", str(path)])
    assert code == 0
    bundled = run_scenario(load_scenario(SCENARIO_DIR / "replay.json"))
    assert hashlib.sha256(path.read_bytes()).hexdigest() == bundled.digest


def test_payload_capture_never_shows_secrets(tmp_path):
    config = scenario("honest_login", capture_payloads=True)
    world_sk = build_world(config).world.server.sk
    result = run_scenario(config, root=tmp_path)
    store = ServerStore.load(tmp_path / "server")
    secrets = [world_sk.value, store.require(EM).aid.value, *store.consumed_tokens]
    assert len(secrets) == 4

    events = [json.loads(row) for row in result.transcript.decode().splitlines()]
    payloads = [bytes.fromhex(e["payload_hex"]) for e in events if e["type"] == "event"]
    assert payloads
    for payload in payloads:
        text = payload.decode("latin-1")
        for secret in secrets:
            assert secret not in payload
            assert secret.hex() not in text


def test_payloads_are_left_out_by_default():
    rows = run_scenario(scenario("honest_login")).transcript.decode().splitlines()
    assert not any("payload_hex" in row for row in rows)


def test_suite_table(tmp_path):
    table = run_suite(SCENARIO_DIR, "r*", out_dir=tmp_path)
    assert list(table["name"]) == ["replay", "rotation_crash", "rt_mitm"]
    assert table["passed"].all()
    assert (tmp_path / "replay.jsonl").exists()
    assert (tmp_path / "rt_mitm.metrics.json").exists()


def test_suite_edge_cases(tmp_path):
    assert run_suite(tmp_path).empty
    assert run_suite(SCENARIO_DIR, "nothing-matches-*").empty

    text = (SCENARIO_DIR / "replay.json").read_text()
    (tmp_path / "a.json").write_text(text)
    (tmp_path / "b.json").write_text(text)
    with pytest.raises(ScenarioError):
        load_suite(tmp_path)
