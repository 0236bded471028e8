"""One simulated deployment: a verifier server, devices on a topology, and observers.

The world owns the event queue. Every payload crosses the wire encoded, so the
transport codec runs on every delivery. Adversaries see events in delivery
order, before the recipient handles them.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable

import structlog

from src.config import BIOMETRIC_MATCH_MS, BLE_SCAN_MS, HTTPS_LATENCY_MS, NFC_LATENCY_MS
from src.protocol.biometric import EmbeddingStore
from src.protocol.crypto_core import SecretKey, SeededRandom, gen_secret
from src.protocol.devices import (
    Agent,
    DeviceStorage,
    FdPhase,
    FirstDevice,
    ScanRequest,
    SecondDevice,
)
from src.protocol.errors import InvalidState, MalformedMessage, ProtocolError, UnknownDevice
from src.protocol.messages import (
    MessageKind,
    ProtocolMessage,
    alp_step,
    decode_message,
    encode_message,
)
from src.protocol.server import ServerEndpoint, ServerSettings, VerifierServer
from src.protocol.store import ServerStore
from src.sim import channels
from src.sim.channels import BluetoothAddress, ChannelKind, Event, EventQueue, Topology
from src.sim.terms import ProvenanceLedger, term_ref

if TYPE_CHECKING:
    from src.sim.adversary import Adversary

logger = structlog.get_logger()

SERVER_ID = "server"
MAX_EVENTS = 100_000


@dataclass(frozen=True)
class Latencies:
    https: int = HTTPS_LATENCY_MS
    nfc: int = NFC_LATENCY_MS
    ble_scan: int = BLE_SCAN_MS
    biometric_match: int = BIOMETRIC_MATCH_MS


@dataclass
class LoginTiming:
    device: str
    start: int
    last_mark: int
    steps: dict[int, int] = field(default_factory=dict)
    total_ms: int | None = None


@dataclass
class RunMetrics:
    messages: Counter = field(default_factory=Counter)
    logins: list[LoginTiming] = field(default_factory=list)
    ble_search_ms: int = 0
    nfc_tap_ms: int = 0
    biometric_match_ms: int = 0

    def completed_logins(self) -> list[LoginTiming]:
        return [t for t in self.logins if t.total_ms is not None]

    def step_totals(self) -> dict[int, int]:
        totals: Counter = Counter()
        for timing in self.completed_logins():
            totals.update(timing.steps)
        return dict(sorted(totals.items()))

    def to_doc(self) -> dict:
        return {
            "messages": {kind: self.messages[kind] for kind in sorted(self.messages)},
            "logins": [
                {
                    "device": t.device,
                    "start": t.start,
                    "total_ms": t.total_ms,
                    "steps": {str(k): v for k, v in sorted(t.steps.items())},
                }
                for t in self.logins
            ],
            "ble_search_ms": self.ble_search_ms,
            "nfc_tap_ms": self.nfc_tap_ms,
            "biometric_match_ms": self.biometric_match_ms,
        }


@dataclass
class Delivery:
    event: Event
    message: ProtocolMessage | None
    outcome: str


class World:
    def __init__(
        self,
        seed: int,
        settings: ServerSettings | None = None,
        latencies: Latencies | None = None,
        root: Path | None = None,
        capture_payloads: bool = False,
    ) -> None:
        self.seed = seed
        self.rng = SeededRandom(seed)
        self.settings = settings or ServerSettings()
        self.latencies = latencies or Latencies()
        self.root = None if root is None else Path(root)
        self.capture_payloads = capture_payloads

        self.queue = EventQueue()
        self.topology = Topology()
        self.ledger = ProvenanceLedger()
        server_dir = None if self.root is None else self.root / "server"
        store = ServerStore(server_dir)
        embeddings = EmbeddingStore(self.rng.fork("embeddings"), None if server_dir is None else server_dir / "embeddings")
        self.server = VerifierServer(
            gen_secret(self.rng.fork("sk")),
            self.rng.fork("server"),
            settings=self.settings,
            store=store,
            embeddings=embeddings,
            tracer=self.ledger,
            principal=SERVER_ID,
        )
        self.endpoint = ServerEndpoint(self.server)
        self.agents: dict[str, Agent] = {}
        self.adversaries: list["Adversary"] = []
        self.inboxes: dict[str, list[ProtocolMessage]] = {}
        self.deliveries: list[Delivery] = []
        self.lines: list[dict] = []
        self.metrics = RunMetrics()
        self.crash_at: int | None = None
        self.crash_device: str | None = None
        self.crashes = 0
        self._open_login: LoginTiming | None = None

    # Setup

    def add_location(self, name: str) -> None:
        self.topology.add_location(name)

    def connect(self, a: str, b: str) -> None:
        self.topology.connect(a, b)

    def add_first_device(
        self,
        device_id: str,
        location: str,
        bt: BluetoothAddress | None = None,
        sk: SecretKey | None = None,
    ) -> FirstDevice:
        bt = bt or BluetoothAddress.random(self.rng.fork(f"bt/{device_id}"))
        storage = DeviceStorage(None if self.root is None else self.root / "devices" / f"{device_id}.json")
        device = FirstDevice(
            device_id,
            sk or self.server.sk,
            bt,
            self.rng.fork(f"device/{device_id}"),
            server_id=SERVER_ID,
            tracer=self.ledger,
            storage=storage,
            send_rotation_ack=self.settings.separate_rotation_ack,
            local_timeout_ms=self.settings.session_deadline_ms,
        )
        self.topology.place(device_id, location, bt)
        self.agents[device_id] = device
        return device

    def add_second_device(
        self,
        device_id: str,
        location: str,
        bt: BluetoothAddress | None = None,
        submits: bool = True,
        proximity_check: bool = True,
    ) -> SecondDevice:
        bt = bt or BluetoothAddress.random(self.rng.fork(f"bt/{device_id}"))
        device = SecondDevice(
            device_id,
            bt,
            self.rng.fork(f"device/{device_id}"),
            server_id=SERVER_ID,
            tracer=self.ledger,
            submits=submits,
            proximity_check=proximity_check,
            local_timeout_ms=self.settings.session_deadline_ms,
        )
        self.topology.place(device_id, location, bt)
        self.agents[device_id] = device
        return device

    def add_adversary(self, adversary: "Adversary") -> None:
        self.topology.place(adversary.name, adversary.location)
        self.adversaries.append(adversary)
        adversary.attach(self)

    def agent(self, device_id: str) -> Agent:
        try:
            return self.agents[device_id]
        except KeyError as exc:
            raise UnknownDevice(device_id) from exc

    def first_device(self, device_id: str) -> FirstDevice:
        device = self.agent(device_id)
        if not isinstance(device, FirstDevice):
            raise UnknownDevice(f"{device_id} is not a first device")
        return device

    @property
    def now(self) -> int:
        return self.queue.clock

    # Sending

    def post(self, out: ProtocolMessage | ScanRequest) -> Event | None:
        if isinstance(out, ScanRequest):
            return self.queue.push(
                self.now + self.latencies.ble_scan,
                ChannelKind.BLE_SCAN,
                out.scanner,
                out.scanner,
                str(out.target).encode("ascii"),
                out,
            )
        if self._crash_due(out):
            if out.sender == self.crash_device:
                logger.info("message_lost_in_crash", kind=out.kind.value, sender=out.sender)
                return None
        if out.kind is MessageKind.NFC_AUTH_STRING:
            return self._send_nfc(out)
        latency = self.latencies.https
        if out.kind is MessageKind.MATCH:
            latency += self.latencies.biometric_match
        return channels.send(self.queue, ChannelKind.HTTPS, out.sender, out.receiver, encode_message(out), latency)

    def _send_nfc(self, msg: ProtocolMessage) -> Event:
        return channels.send(
            self.queue,
            ChannelKind.NFC,
            msg.sender,
            msg.receiver,
            encode_message(msg),
            self.latencies.nfc,
            topology=self.topology,
        )

    def post_all(self, outs: list) -> None:
        for out in outs:
            self.post(out)

    def inject(self, msg: ProtocolMessage, kind: ChannelKind = ChannelKind.HTTPS) -> Event:
        """Adversary entry point; bypasses crash injection but not the proximity gate."""
        if kind is ChannelKind.NFC:
            return self._send_nfc(msg)
        return channels.send(
            self.queue, ChannelKind.HTTPS, msg.sender, msg.receiver, encode_message(msg), self.latencies.https
        )

    def _show_ui(self) -> None:
        for device_id in sorted(self.agents):
            for line in self.agents[device_id].drain_ui():
                self.queue.push(self.now, ChannelKind.UI, device_id, device_id, line.text.encode("utf-8"), line)

    # User actions

    def register(self, fd_id: str, em: str, pwd: str, profile) -> None:
        self.post_all(self.first_device(fd_id).fd_register(em, pwd, profile))
        self._show_ui()

    def begin_login(self, fd_id: str, em: str, profile, tap_target: str | None = None) -> None:
        device = self.first_device(fd_id)
        self.post_all(device.fd_begin_login(em, profile, tap_target=tap_target))
        self._open_login = LoginTiming(fd_id, self.now, self.now)
        self.metrics.logins.append(self._open_login)
        self._show_ui()

    def tap(self, fd_id: str, target: str) -> None:
        device = self.first_device(fd_id)
        device.fd_nfc_tap(target, self._tap_send, self.now)
        self.metrics.nfc_tap_ms += self.latencies.nfc

    def _tap_send(self, msg: ProtocolMessage) -> None:
        if self._crash_due(msg) and msg.sender == self.crash_device:
            raise InvalidState("device crashed during the tap")
        self._send_nfc(msg)

    def recover(self, fd_id: str) -> None:
        self.post_all(self.first_device(fd_id).recover())

    def move(self, device_id: str, location: str) -> None:
        channels.move_device(self.topology, device_id, location)

    # Crash injection

    def arm_crash(self, device_id: str, after_step: int) -> None:
        self.crash_device = device_id
        self.crash_at = after_step

    def crash(self, device_id: str) -> None:
        self.first_device(device_id).restart()
        self.crashes += 1
        self.crash_at = None
        logger.info("device_crashed", device=device_id, t=self.now)

    def _crash_due(self, msg: ProtocolMessage) -> bool:
        if self.crash_at is None or self.crash_device is None:
            return False
        step = alp_step(msg.kind)
        if step is None or step <= self.crash_at:
            return False
        self.crash(self.crash_device)
        return True

    # Running

    def _on_boundary(self, now: int) -> None:
        self.server.expire_sessions(now)
        for device_id in sorted(self.agents):
            self.agents[device_id].tick(now)

    def step(self) -> Event:
        return channels.step(self.queue, self._deliver, self._on_boundary)

    def run(self, max_events: int = MAX_EVENTS) -> int:
        """Deliver until the queue is empty."""
        return self.run_until(lambda: False, max_events)

    def run_until(self, predicate: Callable[[], bool], max_events: int = MAX_EVENTS) -> int:
        count = 0
        while len(self.queue) and not predicate():
            if count >= max_events:
                raise RuntimeError(f"no quiescence after {max_events} events")
            self.step()
            count += 1
        return count

    def advance_to(self, until: int) -> None:
        channels.advance(self.queue, until, self._deliver, self._on_boundary)
        self._on_boundary(until)

    def idle(self, ms: int) -> None:
        self.run()
        self.advance_to(self.now + ms)

    # Delivery

    def _deliver(self, event: Event) -> None:
        msg: ProtocolMessage | None = None
        outcome = "handled"
        if event.kind in (ChannelKind.HTTPS, ChannelKind.NFC):
            try:
                msg = decode_message(event.payload)
            except MalformedMessage as exc:
                outcome = f"malformed:{exc.path}"
        self._record(event, msg)
        self.metrics.messages[event.kind.value] += 1
        for adversary in self.adversaries:
            adversary.observe(event, msg)
        if event.kind is ChannelKind.UI or outcome != "handled":
            self.deliveries.append(Delivery(event, msg, outcome if event.kind is not ChannelKind.UI else "shown"))
            return

        outs: list = []
        try:
            if event.kind is ChannelKind.BLE_SCAN:
                request: ScanRequest = event.message
                found = channels.ble_search(self.topology, request.scanner, request.target)
                self.metrics.ble_search_ms += self.latencies.ble_scan
                outs = self.agent(request.scanner).on_scan_result(found)
            elif event.dst == SERVER_ID:
                outs = self.endpoint.handle(msg, self.now)
                if msg.kind is MessageKind.AUTH_SUBMIT and any(o.kind is MessageKind.MATCH for o in outs):
                    self.metrics.biometric_match_ms += self.latencies.biometric_match
            elif event.dst in self.agents:
                outs = self.agent(event.dst).handle(msg, self.now)
            else:
                self.inboxes.setdefault(event.dst, []).append(msg)
                outcome = "inbox"
        except ProtocolError as exc:
            outcome = f"rejected:{exc.code}"
            logger.info("delivery_rejected", dst=event.dst, kind=event.kind.value, code=exc.code)
        self.deliveries.append(Delivery(event, msg, outcome))
        self._mark_step(event, msg)
        self.post_all(outs)
        self._auto_tap()
        self._show_ui()

    def _auto_tap(self) -> None:
        for device_id in sorted(self.agents):
            device = self.agents[device_id]
            if isinstance(device, FirstDevice) and device.phase is FdPhase.STAGED and device.tap_target:
                try:
                    self.tap(device_id, device.tap_target)
                except ProtocolError as exc:
                    logger.info("tap_failed", device=device_id, code=exc.code)
                    device.tap_target = None

    def _mark_step(self, event: Event, msg: ProtocolMessage | None) -> None:
        timing = self._open_login
        if timing is None or msg is None:
            return
        step = alp_step(msg.kind)
        if step is None:
            return
        timing.steps[step] = timing.steps.get(step, 0) + event.t - timing.last_mark
        timing.last_mark = event.t
        if msg.kind is MessageKind.LOGIN_RESULT and msg.receiver == timing.device and msg["ok"]:
            timing.total_ms = event.t - timing.start
            self._open_login = None

    def _record(self, event: Event, msg: ProtocolMessage | None) -> None:
        line = {
            "type": "event",
            "t": event.t,
            "seq": event.seq,
            "kind": event.kind.value,
            "from": event.src,
            "to": event.dst,
            "payload_digest": term_ref(event.payload),
        }
        if msg is not None:
            line["msg"] = msg.kind.value
        if self.capture_payloads:
            line["payload_hex"] = event.payload.hex()
        self.lines.append(line)

    def record_line(self, line: dict) -> None:
        self.lines.append(line)

    # Queries

    def login_results(self, em: str) -> list[Delivery]:
        """Successful LOGIN_RESULT deliveries for `em`, whether or not the recipient was ready."""
        return [
            d
            for d in self.deliveries
            if d.message is not None
            and d.message.kind is MessageKind.LOGIN_RESULT
            and d.message["em"] == em
            and d.message["ok"]
        ]

    def logged_in_devices(self, em: str) -> set[str]:
        return {d.event.dst for d in self.login_results(em)}

    def error_codes(self, receiver: str | None = None) -> list[str]:
        return [
            d.message["code"]
            for d in self.deliveries
            if d.message is not None
            and d.message.kind is MessageKind.ERROR
            and (receiver is None or d.event.dst == receiver)
        ]

    def rejections(self) -> list[str]:
        return [d.outcome.split(":", 1)[1] for d in self.deliveries if d.outcome.startswith("rejected:")]
