"""Discrete-event transports over a location topology with a virtual clock.

Deliveries are totally ordered by (time, insertion sequence). Time is in
simulated milliseconds; the wall clock is never read.
"""
from __future__ import annotations

import heapq
import itertools
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable

from src.protocol.errors import NotInProximity, UnknownDevice, UnknownLocation

_BT_RE = re.compile(r"^[0-9A-Fa-f]{2}(:[0-9A-Fa-f]{2}){5}$")


@dataclass(frozen=True)
class BluetoothAddress:
    octets: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.octets, bytes) or len(self.octets) != 6:
            raise ValueError("BluetoothAddress must be exactly six octets")

    def __str__(self) -> str:
        return ":".join(f"{b:02X}" for b in self.octets)

    @classmethod
    def parse(cls, text: str) -> "BluetoothAddress":
        if not isinstance(text, str) or not _BT_RE.match(text):
            raise ValueError(f"malformed Bluetooth address: {text!r}")
        return cls(bytes(int(part, 16) for part in text.split(":")))

    @classmethod
    def random(cls, rng: Any) -> "BluetoothAddress":
        return cls(rng.bytes(6))


class ChannelKind(str, Enum):
    HTTPS = "https"
    NFC = "nfc"
    BLE_SCAN = "ble_scan"
    # screen and keyboard surfaces of a device; only adversaries read these
    UI = "ui"


@dataclass
class Topology:
    locations: set[str] = field(default_factory=set)
    placement: dict[str, str] = field(default_factory=dict)
    adjacency: set[frozenset[str]] = field(default_factory=set)
    addresses: dict[str, BluetoothAddress] = field(default_factory=dict)

    def add_location(self, name: str) -> None:
        self.locations.add(name)

    def connect(self, a: str, b: str) -> None:
        for loc in (a, b):
            if loc not in self.locations:
                raise UnknownLocation(loc)
        self.adjacency.add(frozenset((a, b)))

    def place(self, device: str, location: str, bt: BluetoothAddress | None = None) -> None:
        if location not in self.locations:
            raise UnknownLocation(location)
        if device in self.placement:
            raise ValueError(f"device {device} is already placed")
        self.placement[device] = location
        if bt is not None:
            self.addresses[device] = bt

    def location_of(self, device: str) -> str:
        try:
            return self.placement[device]
        except KeyError as exc:
            raise UnknownDevice(device) from exc

    def proximate(self, a: str, b: str) -> bool:
        loc_a, loc_b = self.location_of(a), self.location_of(b)
        return loc_a == loc_b or frozenset((loc_a, loc_b)) in self.adjacency

    def devices_with(self, addr: BluetoothAddress) -> list[str]:
        return sorted(dev for dev, bt in self.addresses.items() if bt == addr)


def move_device(topology: Topology, device: str, location: str) -> None:
    if device not in topology.placement:
        raise UnknownDevice(device)
    if location not in topology.locations:
        raise UnknownLocation(location)
    topology.placement[device] = location


def ble_search(topology: Topology, scanner_device: str, target_addr: BluetoothAddress) -> bool:
    topology.location_of(scanner_device)
    return any(
        dev != scanner_device and topology.proximate(scanner_device, dev)
        for dev in topology.devices_with(target_addr)
    )


@dataclass
class Event:
    t: int
    seq: int
    kind: ChannelKind
    src: str
    dst: str
    payload: bytes
    message: Any = None


class EventQueue:
    def __init__(self) -> None:
        self.clock = 0
        self._heap: list[tuple[int, int, Event]] = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self._heap)

    def push(
        self,
        t: int,
        kind: ChannelKind,
        src: str,
        dst: str,
        payload: bytes,
        message: Any = None,
    ) -> Event:
        if t < self.clock:
            raise ValueError("cannot schedule an event in the past")
        event = Event(t=t, seq=next(self._seq), kind=kind, src=src, dst=dst, payload=payload, message=message)
        heapq.heappush(self._heap, (event.t, event.seq, event))
        return event

    def next_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def pop(self) -> Event:
        t, _, event = heapq.heappop(self._heap)
        self.clock = max(self.clock, t)
        return event

    def pending(self) -> Iterable[Event]:
        return (entry[2] for entry in sorted(self._heap))


def send(
    queue: EventQueue,
    kind: ChannelKind,
    src: str,
    dst: str,
    payload: bytes,
    latency: int,
    topology: Topology | None = None,
    message: Any = None,
) -> Event:
    if latency < 0:
        raise ValueError("latency must be non-negative")
    if kind is ChannelKind.NFC and (topology is None or not topology.proximate(src, dst)):
        raise NotInProximity(f"{src} is not near {dst}")
    return queue.push(queue.clock + latency, kind, src, dst, payload, message)


def advance(
    queue: EventQueue,
    until: int,
    deliver: Callable[[Event], None],
    on_boundary: Callable[[int], None] | None = None,
) -> list[Event]:
    """Deliver every event with time <= until, then move the clock to until."""
    if until < queue.clock:
        raise ValueError("until is before the current clock")
    delivered: list[Event] = []
    while len(queue) and queue.next_time() <= until:
        delivered.append(step(queue, deliver, on_boundary))
    queue.clock = until
    return delivered


def step(
    queue: EventQueue,
    deliver: Callable[[Event], None],
    on_boundary: Callable[[int], None] | None = None,
) -> Event:
    event = queue.pop()
    if on_boundary is not None:
        on_boundary(queue.clock)
    deliver(event)
    return event
