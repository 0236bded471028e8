"""Build a world from a scenario, run it, check its assertions, write the transcript."""
from __future__ import annotations

import fnmatch
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd
import structlog
from pydantic import ValidationError

from src.config import RUNS_DIR
from src.protocol.biometric import random_identity
from src.protocol.crypto_core import gen_secret
from src.protocol.errors import ScenarioError
from src.protocol.jsonfile import write_json_atomic
from src.protocol.server import ServerSettings
from src.sim.adversary import (
    Adversary,
    AttackOutcome,
    Roles,
    SecrecyReport,
    VictimSetup,
    run_attack,
    secrecy_report,
)
from src.sim.channels import BluetoothAddress
from src.sim.terms import AttackerKnowledge
from src.sim.world import Latencies, RunMetrics, World
from src.harness.scenario import ScenarioConfig, ScenarioKind, load_scenario
from src.harness.transcript import ledger_lines, read_transcript, render, write_transcript

logger = structlog.get_logger()

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2

SUITE_COLUMNS = ["name", "kind", "seed", "outcome", "duration_ms", "logins", "assertions", "passed"]


@dataclass
class RunResult:
    config: ScenarioConfig
    outcome: str
    failures: list[str]
    metrics: RunMetrics
    report: SecrecyReport
    transcript: bytes
    digest: str
    duration_ms: int
    logins: int
    attack: AttackOutcome | None = None
    transcript_path: Path | None = None
    metrics_path: Path | None = None

    @property
    def exit_code(self) -> int:
        return EXIT_OK if not self.failures else EXIT_ASSERTION

    @property
    def passed(self) -> bool:
        return not self.failures


@dataclass
class Built:
    world: World
    victim: VictimSetup
    adversary: Adversary | None
    roles: Roles = field(init=False)

    def __post_init__(self) -> None:
        self.roles = Roles(
            self.world.server.principal,
            frozenset({self.victim.first_device}),
            frozenset({self.victim.second_device}),
        )


def build_world(config: ScenarioConfig, root: Path | None = None) -> Built:
    settings = ServerSettings(
        match_threshold=config.biometric.match_threshold,
        session_deadline_ms=config.timings.session_deadline_ms,
        pwd_hash_iterations=config.pwd_hash_iterations,
        token_single_use=config.defenses.token_single_use,
        separate_rotation_ack=config.defenses.separate_rotation_ack,
    )
    latencies = Latencies(
        https=config.timings.https_ms,
        nfc=config.timings.nfc_ms,
        ble_scan=config.timings.ble_scan_ms,
        biometric_match=config.timings.biometric_match_ms,
    )
    world = World(config.seed, settings, latencies, root=root, capture_payloads=config.capture_payloads)
    for location in config.topology.locations:
        world.add_location(location)
    for a, b in config.topology.adjacent:
        world.connect(a, b)

    caps = config.capabilities()
    for device_id in sorted(config.devices):
        spec = config.devices[device_id]
        bt = None if spec.bt is None else BluetoothAddress.parse(spec.bt)
        if spec.role == "first":
            if spec.owner == "victim" or config.leak_sk:
                sk = world.server.sk
            else:
                sk = gen_secret(world.rng.fork(f"spoof-sk/{device_id}"))
            world.add_first_device(device_id, spec.location, bt=bt, sk=sk)
        else:
            # a remotely controlled victim desktop holds the tap instead of submitting it
            held = caps.cr_remote_desktop and device_id == config.victim.second_device
            world.add_second_device(
                device_id,
                spec.location,
                bt=bt,
                submits=not held,
                proximity_check=config.defenses.proximity_check,
            )

    profile = random_identity(world.rng.fork("victim/profile"), config.biometric.noise_sigma)
    victim = VictimSetup(
        config.victim.em, config.victim.pwd, profile, config.victim.first_device, config.victim.second_device
    )
    adversary = None
    if config.attacker is not None:
        reads = [d for d in config.attacker.devices if config.devices[d].role == "first"]
        adversary = Adversary(
            "attacker",
            caps,
            config.attacker.location,
            victim,
            operated=config.attacker.devices,
            reads=reads,
            seed=config.seed,
        )
        world.add_adversary(adversary)
        if config.leak_sk:
            adversary.leak(world.server.sk, "SK")
    return Built(world, victim, adversary)


def _login(world: World, victim: VictimSetup) -> None:
    world.begin_login(victim.first_device, victim.em, victim.profile, tap_target=victim.second_device)
    world.run()


def _drive(config: ScenarioConfig, built: Built) -> tuple[str, AttackOutcome | None]:
    world, victim = built.world, built.victim
    fd = world.first_device(victim.first_device)
    world.register(victim.first_device, victim.em, victim.pwd, victim.profile)
    world.run()
    if not fd.registered:
        return "RegistrationFailed", None

    attack = config.kind.attack
    if attack is not None:
        outcome = run_attack(attack, world, config.seed)
        return ("AttackSucceeded" if outcome.authenticated_as_victim else "AttackFailed"), outcome

    if config.kind is ScenarioKind.ROTATION_CRASH:
        world.arm_crash(victim.first_device, config.crash_at)
        _login(world, victim)
        if world.crashes == 0:
            world.crash(victim.first_device)
        world.recover(victim.first_device)
        world.idle(config.timings.session_deadline_ms + 1)
        before = fd.completed_logins
        for _ in range(config.sessions):
            _login(world, victim)
        return ("Recovered" if fd.completed_logins > before else "LockedOut"), None

    before = fd.completed_logins
    for _ in range(config.sessions):
        _login(world, victim)
    return ("LoginSuccess" if fd.completed_logins - before == config.sessions else "LoginFailed"), None


def _check(config: ScenarioConfig, outcome: str, report: SecrecyReport, world: World, logins: int) -> list[str]:
    spec = config.assertions
    failures: list[str] = []
    if outcome != spec.expect:
        failures.append(f"expect: wanted {spec.expect}, got {outcome}")
    if report.all_safe != spec.secrets_safe:
        failures.append(f"secrets_safe: wanted {spec.secrets_safe}, leaked {report.leaked()}")
    seen = set(world.error_codes()) | set(world.rejections())
    for code in spec.expected_errors:
        if code not in seen:
            failures.append(f"expected_errors: {code} never raised")
    if logins < spec.min_logins:
        failures.append(f"min_logins: wanted {spec.min_logins}, got {logins}")
    return failures


def run_scenario(
    config: ScenarioConfig,
    transcript_path: Path | None = None,
    metrics_path: Path | None = None,
    root: Path | None = None,
) -> RunResult:
    built = build_world(config, root)
    world = built.world
    outcome, attack = _drive(config, built)

    knowledge = AttackerKnowledge()
    for adversary in world.adversaries:
        knowledge.update(adversary.knowledge.terms)
    sealers = {digest: record.sealer for digest, record in world.ledger.seals.items()}
    report = secrecy_report(world.ledger.secrets, knowledge, sealers, world.ledger.accepts, built.roles)
    logins = world.first_device(built.victim.first_device).completed_logins
    failures = _check(config, outcome, report, world, logins)
    for failure in failures[:1]:
        logger.warning("assertion_failed", scenario=config.name, assertion=failure)

    header = {
        "scenario": config.name,
        "kind": config.kind.value,
        "seed": config.seed,
        "capture_payloads": config.capture_payloads,
        "roles": {
            "server": built.roles.server,
            "victim_first": sorted(built.roles.victim_first),
            "victim_second": sorted(built.roles.victim_second),
        },
        "secrets": [{"label": label, "ref": ref} for label, ref in world.ledger.secrets],
    }
    outcome_doc = {
        "outcome": outcome,
        "authenticated": None if attack is None else attack.authenticated_as_victim,
        "failures": failures,
        "report": report.to_doc(),
        "duration_ms": world.now,
    }
    data = render(header, world.lines + ledger_lines(world.ledger), outcome_doc)
    digest = hashlib.sha256(data).hexdigest()
    result = RunResult(
        config=config,
        outcome=outcome,
        failures=failures,
        metrics=world.metrics,
        report=report,
        transcript=data,
        digest=digest,
        duration_ms=world.now,
        logins=logins,
        attack=attack,
    )
    if transcript_path is not None:
        write_transcript(transcript_path, data)
        result.transcript_path = Path(transcript_path)
    if metrics_path is not None:
        write_json_atomic(Path(metrics_path), {"scenario": config.name, "seed": config.seed, **world.metrics.to_doc()})
        result.metrics_path = Path(metrics_path)
    logger.info("scenario_finished", scenario=config.name, outcome=outcome, passed=result.passed, digest=digest)
    return result


def load_suite(directory: Path, pattern: str = "*") -> list[ScenarioConfig]:
    configs: list[ScenarioConfig] = []
    names: set[str] = set()
    for path in sorted(Path(directory).glob("*.json")):
        config = load_scenario(path)
        if config.name in names:
            raise ScenarioError(f"duplicate scenario name {config.name!r} in {path}")
        names.add(config.name)
        if fnmatch.fnmatch(config.name, pattern):
            configs.append(config)
    return configs


def run_suite(directory: Path, pattern: str = "*", out_dir: Path | None = None) -> pd.DataFrame:
    directory = Path(directory)
    if not any(directory.glob("*.json")):
        logger.warning("empty_suite", directory=str(directory))
        return pd.DataFrame(columns=SUITE_COLUMNS)
    rows = []
    for config in load_suite(directory, pattern):
        transcript = None if out_dir is None else Path(out_dir) / f"{config.name}.jsonl"
        metrics = None if out_dir is None else Path(out_dir) / f"{config.name}.metrics.json"
        result = run_scenario(config, transcript, metrics)
        rows.append(
            {
                "name": config.name,
                "kind": config.kind.value,
                "seed": config.seed,
                "outcome": result.outcome,
                "duration_ms": result.duration_ms,
                "logins": result.logins,
                "assertions": "ok" if result.passed else result.failures[0],
                "passed": result.passed,
                "secrets": result.report.to_doc()["secrets"],
                "step_ms": result.metrics.step_totals(),
            }
        )
    return pd.DataFrame(rows, columns=SUITE_COLUMNS + ["secrets", "step_ms"])


def verify_transcript(path: Path) -> SecrecyReport:
    transcript = read_transcript(path)
    roles_doc = transcript.header.get("roles") or {}
    roles = Roles(
        roles_doc.get("server", "server"),
        frozenset(roles_doc.get("victim_first", [])),
        frozenset(roles_doc.get("victim_second", [])),
    )
    return secrecy_report(
        transcript.secrets(), transcript.knowledge(), transcript.sealers(), transcript.accept_records(), roles
    )


def config_error_message(exc: Exception) -> str:
    if isinstance(exc, ValidationError):
        first = exc.errors()[0]
        return f"{'.'.join(str(p) for p in first['loc']) or '$'}: {first['msg']}"
    if isinstance(exc, json.JSONDecodeError):
        return f"not JSON: {exc.msg} at line {exc.lineno}"
    return str(exc)


def default_transcript_path(config: ScenarioConfig) -> Path:
    return RUNS_DIR / f"{config.name}-{config.seed}.jsonl"
