"""Scenario files: JSON with full-line ``//`` comments, validated by pydantic."""
from __future__ import annotations

import json
import re
from enum import Enum
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.config import (
    BIOMETRIC_MATCH_MS,
    BLE_SCAN_MS,
    HTTPS_LATENCY_MS,
    MATCH_THRESHOLD,
    NFC_LATENCY_MS,
    NOISE_SIGMA,
    PWD_HASH_ITERATIONS,
    SESSION_DEADLINE_MS,
)
from src.protocol.messages import ALP_STEPS
from src.sim.adversary import AttackerCapabilities, AttackKind
from src.sim.channels import BluetoothAddress

_COMMENT = re.compile(r"^\s*//.*$", re.MULTILINE)
MAX_SEED = 2**64 - 1


class ScenarioKind(str, Enum):
    HONEST = "honest"
    ROTATION_CRASH = "rotation_crash"
    RT_MITM = "rt_mitm"
    CR_MITM = "cr_mitm"
    MBE_PHISH = "mbe_phish"
    REPLAY = "replay"
    SPOOF_APP = "spoof_app"
    KEYSTROKE_LOG = "keystroke_log"

    @property
    def attack(self) -> AttackKind | None:
        try:
            return AttackKind(self.value)
        except ValueError:
            return None


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DeviceSpec(_Strict):
    role: Literal["first", "second"]
    owner: Literal["victim", "attacker"] = "victim"
    location: str
    bt: Optional[str] = None

    @field_validator("bt")
    @classmethod
    def _bt_parses(cls, value: str | None) -> str | None:
        if value is not None:
            BluetoothAddress.parse(value)
        return value


class TopologySpec(_Strict):
    locations: list[str] = Field(min_length=1)
    adjacent: list[tuple[str, str]] = Field(default_factory=list)


class VictimSpec(_Strict):
    em: str = Field(min_length=1)
    pwd: str = Field(min_length=1)
    first_device: str
    second_device: str


class AttackerSpec(_Strict):
    location: str
    devices: list[str] = Field(default_factory=list)
    capabilities: dict[str, bool] = Field(default_factory=dict)

    @field_validator("capabilities")
    @classmethod
    def _known_flags(cls, value: dict[str, bool]) -> dict[str, bool]:
        unknown = set(value) - set(AttackerCapabilities.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown capability flags: {sorted(unknown)}")
        return value


class TimingSpec(_Strict):
    https_ms: int = Field(HTTPS_LATENCY_MS, ge=0)
    nfc_ms: int = Field(NFC_LATENCY_MS, ge=0)
    ble_scan_ms: int = Field(BLE_SCAN_MS, ge=0)
    biometric_match_ms: int = Field(BIOMETRIC_MATCH_MS, ge=0)
    session_deadline_ms: int = Field(SESSION_DEADLINE_MS, gt=0)


class BiometricSpec(_Strict):
    noise_sigma: float = Field(NOISE_SIGMA, ge=0)
    match_threshold: float = Field(MATCH_THRESHOLD, gt=0)


class DefenseSpec(_Strict):
    proximity_check: bool = True
    token_single_use: bool = True
    separate_rotation_ack: bool = False


class AssertionSpec(_Strict):
    expect: Literal["LoginSuccess", "AttackFailed", "AttackSucceeded", "Recovered"]
    secrets_safe: bool = True
    expected_errors: list[str] = Field(default_factory=list)
    min_logins: int = Field(0, ge=0)


class ScenarioConfig(_Strict):
    name: str = Field(min_length=1)
    kind: ScenarioKind
    seed: int = Field(ge=0, le=MAX_SEED)
    topology: TopologySpec
    devices: dict[str, DeviceSpec]
    victim: VictimSpec
    attacker: Optional[AttackerSpec] = None
    timings: TimingSpec = TimingSpec()
    biometric: BiometricSpec = BiometricSpec()
    defenses: DefenseSpec = DefenseSpec()
    pwd_hash_iterations: int = Field(PWD_HASH_ITERATIONS, ge=1)
    leak_sk: bool = False
    crash_at: Optional[int] = Field(None, ge=0, le=len(ALP_STEPS))
    sessions: int = Field(1, ge=1)
    capture_payloads: bool = False
    assertions: AssertionSpec

    @model_validator(mode="after")
    def _references(self) -> "ScenarioConfig":
        locations = set(self.topology.locations)
        for a, b in self.topology.adjacent:
            if a not in locations or b not in locations:
                raise ValueError(f"adjacency names an unknown location: {a}, {b}")
        for device_id, spec in self.devices.items():
            if spec.location not in locations:
                raise ValueError(f"device {device_id} is placed at unknown location {spec.location}")
        for field_name, role in (("first_device", "first"), ("second_device", "second")):
            device_id = getattr(self.victim, field_name)
            spec = self.devices.get(device_id)
            if spec is None or spec.role != role or spec.owner != "victim":
                raise ValueError(f"victim.{field_name} must name a victim-owned {role} device")
        attack = self.kind.attack
        if attack is not None and self.attacker is None:
            raise ValueError(f"{self.kind.value} needs an attacker")
        if attack is None and self.attacker is not None:
            raise ValueError(f"{self.kind.value} takes no attacker")
        if self.attacker is not None:
            if self.attacker.location not in locations:
                raise ValueError(f"attacker is placed at unknown location {self.attacker.location}")
            for device_id in self.attacker.devices:
                spec = self.devices.get(device_id)
                if spec is None or spec.owner != "attacker":
                    raise ValueError(f"attacker device {device_id} must be an attacker-owned device")
        if (self.crash_at is not None) != (self.kind is ScenarioKind.ROTATION_CRASH):
            raise ValueError("crash_at is required for rotation_crash and only there")
        return self

    def capabilities(self) -> AttackerCapabilities:
        attack = self.kind.attack
        if attack is None or self.attacker is None:
            return AttackerCapabilities()
        base = AttackerCapabilities.for_kind(attack)
        flags = {name: getattr(base, name) for name in AttackerCapabilities.__dataclass_fields__}
        flags.update(self.attacker.capabilities)
        return AttackerCapabilities(**flags)


def strip_comments(text: str) -> str:
    return _COMMENT.sub("", text)


def parse_scenario(text: str) -> ScenarioConfig:
    return ScenarioConfig.model_validate(json.loads(strip_comments(text)))


def load_scenario(path: Path, seed: int | None = None) -> ScenarioConfig:
    config = parse_scenario(Path(path).read_text())
    if seed is not None:
        config = ScenarioConfig.model_validate({**config.model_dump(), "seed": seed})
    return config
