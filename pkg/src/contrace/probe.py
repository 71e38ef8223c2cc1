"""Ping and traceroute probe engine over injected transport and clock.

One worker handles all relations of one source address; workers never share
state beyond the record sink, so they can run as threads against raw
sockets or single-threaded against the simulator's virtual clock. Probe
semantics live in small state machines (one traceroute run, one ping burst
entry) that both the blocking one-shot operations and the worker reuse.
"""

from __future__ import annotations

import heapq
import logging
import random
import select
import socket
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

from . import icmp
from .icmp import Family
from .records import (STATUS_ECHO_REPLY, STATUS_TIME_EXCEEDED, STATUS_TIMEOUT,
                      Hop, PingRecord, TracerouteRun)

log = logging.getLogger(__name__)

PING_TTL = 64
SEQUENCE_SPACE = 0x10000


class TransportFailure(Exception):
    """Socket-level failure; distinct from a timeout, which yields a record."""


class Transport(Protocol):
    def send(self, data: bytes, ttl: int, destination: str) -> int:
        """Send one probe; returns the send timestamp in microseconds."""

    def receive(self, deadline_us: int) -> tuple[bytes, str, int] | None:
        """Next (data, source address, timestamp) no later than deadline."""


class Clock(Protocol):
    def now_us(self) -> int: ...

    def sleep_until(self, t_us: int) -> None: ...


@dataclass(frozen=True, slots=True)
class RelationKey:
    """Measurement identity: IP version plus source and destination ISP."""

    ip_version: Family
    source_id: str
    destination_id: str
    source_address: str
    destination_address: str

    def __post_init__(self):
        for address in (self.source_address, self.destination_address):
            if icmp.family_of(address) is not self.ip_version:
                raise ValueError(
                    f"address {address} does not match family {self.ip_version.value}")


@dataclass(slots=True)
class ProbeSchedule:
    """Cadence and limits for one measurement campaign."""

    ping_interval_s: float = 1.0
    traceroute_interval_s: float = 300.0
    traceroute_rounds: int = 3
    max_ttl: int = 35
    reply_timeout_s: float = 3.0
    craft_constant_checksum: bool = True
    jitter_fraction: float = 0.05

    def __post_init__(self):
        if self.ping_interval_s <= 0 or self.traceroute_interval_s <= 0:
            raise ValueError("intervals must be positive")
        if self.traceroute_rounds < 1:
            raise ValueError("traceroute_rounds must be >= 1")
        if not 1 <= self.max_ttl <= 255:
            raise ValueError("max_ttl must be in 1..255")
        if self.reply_timeout_s <= 0:
            raise ValueError("reply_timeout_s must be positive")
        if not 0 <= self.jitter_fraction < 1:
            raise ValueError("jitter_fraction must be in [0, 1)")

    @property
    def ping_interval_us(self) -> int:
        return int(round(self.ping_interval_s * 1_000_000))

    @property
    def traceroute_interval_us(self) -> int:
        return int(round(self.traceroute_interval_s * 1_000_000))

    @property
    def reply_timeout_us(self) -> int:
        return int(round(self.reply_timeout_s * 1_000_000))


def _status_of(kind: icmp.Kind) -> int | None:
    if kind is icmp.Kind.ECHO_REPLY:
        return STATUS_ECHO_REPLY
    if kind is icmp.Kind.TIME_EXCEEDED:
        return STATUS_TIME_EXCEEDED
    return None


class TracerouteProbeRun:
    """State of one traceroute run: a TTL burst and its outstanding probes.

    All requests go out back to back; with crafting enabled they share one
    checksum and therefore one 4-byte header prefix, so ECMP load balancers
    keep the whole run on a single path.
    """

    def __init__(self, relation: RelationKey, schedule: ProbeSchedule,
                 identifier: int, seq_base: int, round_index: int,
                 transport: Transport, now_us: int):
        self.relation = relation
        self.schedule = schedule
        self.identifier = identifier
        self.round_index = round_index
        self.start_us = now_us
        self.deadline = now_us + schedule.reply_timeout_us
        self._pending: dict[tuple[int, int], int] = {}
        self._send_time: dict[int, int] = {}
        self._resolved: dict[int, tuple[int, str | None, int | None]] = {}

        family = relation.ip_version
        target = None
        if schedule.craft_constant_checksum:
            first = icmp.make_request_bytes(
                family, identifier, seq_base & 0xFFFF, now_us,
                source=relation.source_address,
                destination=relation.destination_address)
            target = int.from_bytes(first[2:4], "big")
        for ttl in range(1, schedule.max_ttl + 1):
            seq = (seq_base + ttl - 1) & 0xFFFF
            data = icmp.make_request_bytes(
                family, identifier, seq, now_us, target_checksum=target,
                source=relation.source_address,
                destination=relation.destination_address)
            sent = transport.send(data, ttl, relation.destination_address)
            self._send_time[ttl] = sent
            self._pending[(identifier, seq)] = ttl

    def on_packet(self, data: bytes, source: str, t_us: int) -> bool:
        """Attribute a reply to its probe; returns True when consumed."""
        try:
            decoded = icmp.decode_message(data, self.relation.ip_version,
                                          source=source,
                                          destination=self.relation.source_address)
        except icmp.Truncated:
            return False
        key = decoded.match_key
        if key is None or key not in self._pending:
            return False
        status = _status_of(decoded.kind)
        if status is None:
            return False
        ttl = self._pending.pop(key)
        if not decoded.checksum_ok:
            log.warning("checksum mismatch on %s reply from %s (kept)",
                        self.relation.destination_address, source)
        self._resolved[ttl] = (status, source, t_us - self._send_time[ttl])
        return True

    def _terminal_ttl(self) -> int | None:
        replies = [ttl for ttl, (status, _, _) in self._resolved.items()
                   if status == STATUS_ECHO_REPLY]
        return min(replies) if replies else None

    def completed(self, now_us: int) -> bool:
        if now_us >= self.deadline or not self._pending:
            return True
        terminal = self._terminal_ttl()
        if terminal is not None:
            return all(ttl in self._resolved for ttl in range(1, terminal))
        return False

    def result(self) -> TracerouteRun:
        """Run record: hops up to the first echo reply, or all TTLs if none."""
        terminal = self._terminal_ttl()
        cut = terminal if terminal is not None else self.schedule.max_ttl
        hops = []
        for ttl in range(1, cut + 1):
            status, address, rtt = self._resolved.get(ttl, (STATUS_TIMEOUT, None, None))
            hops.append(Hop(ttl, status, address, rtt))
        return TracerouteRun(self.start_us, self.relation.source_address,
                             self.relation.destination_address,
                             self.round_index, tuple(hops))


def run_traceroute(relation: RelationKey, schedule: ProbeSchedule,
                   transport: Transport, clock: Clock, *, identifier: int = 1,
                   seq_base: int = 0, round_index: int = 0) -> TracerouteRun:
    """Execute one traceroute run to completion (blocking)."""
    run = TracerouteProbeRun(relation, schedule, identifier, seq_base,
                             round_index, transport, clock.now_us())
    while not run.completed(clock.now_us()):
        packet = transport.receive(run.deadline)
        if packet is not None:
            run.on_packet(*packet)
    return run.result()


def run_ping_once(relation: RelationKey, transport: Transport, clock: Clock, *,
                  identifier: int = 1, sequence: int = 0,
                  reply_timeout_s: float = 3.0, ttl: int = PING_TTL) -> PingRecord:
    """Send one echo request and wait for its reply (blocking)."""
    now = clock.now_us()
    data = icmp.make_request_bytes(relation.ip_version, identifier,
                                   sequence & 0xFFFF, now,
                                   source=relation.source_address,
                                   destination=relation.destination_address)
    sent = transport.send(data, ttl, relation.destination_address)
    deadline = sent + int(round(reply_timeout_s * 1_000_000))
    while clock.now_us() < deadline:
        packet = transport.receive(deadline)
        if packet is None:
            break
        raw, source, t_us = packet
        try:
            decoded = icmp.decode_message(raw, relation.ip_version, source=source,
                                          destination=relation.source_address)
        except icmp.Truncated:
            continue
        if decoded.match_key != (identifier, sequence & 0xFFFF):
            continue
        status = _status_of(decoded.kind)
        if status == STATUS_ECHO_REPLY:
            return PingRecord(sent, relation.source_address,
                              relation.destination_address, status, t_us - sent)
        if status == STATUS_TIME_EXCEEDED:
            return PingRecord(sent, relation.source_address,
                              relation.destination_address, status)
    return PingRecord(sent, relation.source_address,
                      relation.destination_address, STATUS_TIMEOUT)


@dataclass(slots=True)
class _PendingPing:
    destination: str
    sent_us: int
    deadline_us: int


class RecordSink(Protocol):
    def append(self, record) -> None: ...


_BACKOFF_INITIAL_US = 1_000_000
_BACKOFF_CAP_US = 30_000_000


class SourceWorker:
    """All measurement scheduling for one source address.

    Ping bursts fire every ping interval to all destinations at once;
    traceroute cycles start on a jittered interval grid and probe each
    destination sequentially with the configured number of rounds. Driven
    by next_wakeup()/on_wakeup()/on_packet(); see run_relation_worker for
    the blocking driver.
    """

    def __init__(self, relations: list[RelationKey], schedule: ProbeSchedule,
                 transport_factory: Callable[[], Transport], sink: RecordSink, *,
                 start_us: int, end_us: int, seed: int = 0):
        if not relations:
            raise ValueError("worker needs at least one relation")
        sources = {r.source_address for r in relations}
        if len(sources) != 1:
            raise ValueError("one worker handles exactly one source address")
        self.source_address = relations[0].source_address
        self.relations = list(relations)
        self.schedule = schedule
        self.sink = sink
        self.start_us = start_us
        self.end_us = end_us
        self._factory = transport_factory
        self.transport = transport_factory()

        rng = random.Random(f"{seed}:{self.source_address}")
        self.identifier = rng.randrange(1, SEQUENCE_SPACE)
        self._jitter_rng = random.Random(f"{seed}:{self.source_address}:jitter")

        self._block = SEQUENCE_SPACE // len(self.relations)
        self._counters = [0] * len(self.relations)

        self._next_ping_us = start_us
        self._cycle_index = 0
        self._next_cycle_us = self._cycle_start(0)

        self._pending: dict[int, _PendingPing] = {}
        self._deadlines: list[tuple[int, int]] = []
        self._cycle_queue: list[tuple[int, int]] = []
        self._active: TracerouteProbeRun | None = None
        self._active_relation: RelationKey | None = None
        self._backoff_until: int | None = None
        self._backoff_us = _BACKOFF_INITIAL_US

    # -- sequence allocation: each relation owns a block of the 16-bit space

    def _alloc(self, relation_idx: int, count: int = 1) -> int:
        block, counter = self._block, self._counters[relation_idx]
        if (counter % block) + count > block:
            counter += block - (counter % block)
        start = relation_idx * block + (counter % block)
        self._counters[relation_idx] = counter + count
        return start

    def _cycle_start(self, index: int) -> int:
        # Jitter is one-sided so exactly duration/interval cycles fit into a
        # run, while workers still desynchronize.
        interval = self.schedule.traceroute_interval_us
        jitter = self._jitter_rng.uniform(0.0, self.schedule.jitter_fraction)
        return self.start_us + index * interval + int(jitter * interval)

    # -- scheduling surface -------------------------------------------------

    def next_wakeup(self) -> int | None:
        candidates = []
        if self._backoff_until is not None:
            candidates.append(self._backoff_until)
        else:
            if self._next_ping_us < self.end_us:
                candidates.append(self._next_ping_us)
            if self._active is not None:
                candidates.append(self._active.deadline)
            elif self._next_cycle_us < self.end_us:
                candidates.append(self._next_cycle_us)
        if self._deadlines:
            candidates.append(self._deadlines[0][0])
        return min(candidates) if candidates else None

    @property
    def done(self) -> bool:
        return self.next_wakeup() is None

    def on_wakeup(self, now_us: int) -> None:
        self._expire_pings(now_us)
        if self._backoff_until is not None:
            if now_us >= self._backoff_until:
                self._resume_transport(now_us)
            return
        if self._active is not None and self._active.completed(now_us):
            self._finish_active(now_us)
        if (self._active is None and not self._cycle_queue
                and self._next_cycle_us <= now_us and self._next_cycle_us < self.end_us):
            self._begin_cycle(now_us)
        while self._next_ping_us <= now_us and self._next_ping_us < self.end_us:
            tick = self._next_ping_us
            self._next_ping_us += self.schedule.ping_interval_us
            self._ping_burst(tick, now_us)

    def on_packet(self, data: bytes, source: str, t_us: int) -> None:
        if self._active is not None and self._active.on_packet(data, source, t_us):
            if self._active.completed(t_us):
                self._finish_active(t_us)
            return
        self._match_ping(data, source, t_us)

    # -- ping ---------------------------------------------------------------

    def _ping_burst(self, tick_us: int, now_us: int) -> None:
        for idx, relation in enumerate(self.relations):
            seq = self._alloc(idx)
            data = icmp.make_request_bytes(
                relation.ip_version, self.identifier, seq, now_us,
                source=relation.source_address,
                destination=relation.destination_address)
            try:
                sent = self.transport.send(data, PING_TTL,
                                           relation.destination_address)
            except TransportFailure as exc:
                self._enter_backoff(now_us, exc)
                return
            deadline = sent + self.schedule.reply_timeout_us
            self._pending[seq] = _PendingPing(relation.destination_address,
                                              sent, deadline)
            heapq.heappush(self._deadlines, (deadline, seq))

    def _match_ping(self, data: bytes, source: str, t_us: int) -> None:
        family = self.relations[0].ip_version
        try:
            decoded = icmp.decode_message(data, family, source=source,
                                          destination=self.source_address)
        except icmp.Truncated:
            return
        key = decoded.match_key
        if key is None or key[0] != self.identifier:
            return
        pending = self._pending.pop(key[1], None)
        if pending is None:
            return  # duplicate or late reply: the first resolution stands
        status = _status_of(decoded.kind)
        if status == STATUS_ECHO_REPLY:
            record = PingRecord(pending.sent_us, self.source_address,
                                pending.destination, status,
                                t_us - pending.sent_us)
        elif status == STATUS_TIME_EXCEEDED:
            record = PingRecord(pending.sent_us, self.source_address,
                                pending.destination, status)
        else:
            self._pending[key[1]] = pending
            return
        self.sink.append(record)

    def _expire_pings(self, now_us: int) -> None:
        while self._deadlines and self._deadlines[0][0] <= now_us:
            _, seq = heapq.heappop(self._deadlines)
            pending = self._pending.pop(seq, None)
            if pending is None:
                continue  # already answered
            self.sink.append(PingRecord(pending.sent_us, self.source_address,
                                        pending.destination, STATUS_TIMEOUT))

    # -- traceroute cycles --------------------------------------------------

    def _begin_cycle(self, now_us: int) -> None:
        self._cycle_index += 1
        self._next_cycle_us = self._cycle_start(self._cycle_index)
        self._cycle_queue = [(idx, rnd)
                             for idx in range(len(self.relations))
                             for rnd in range(self.schedule.traceroute_rounds)]
        self._start_next_run(now_us)

    def _start_next_run(self, now_us: int) -> None:
        while self._cycle_queue:
            idx, rnd = self._cycle_queue[0]
            relation = self.relations[idx]
            seq_base = self._alloc(idx, self.schedule.max_ttl)
            try:
                run = TracerouteProbeRun(relation, self.schedule, self.identifier,
                                         seq_base, rnd, self.transport, now_us)
            except TransportFailure as exc:
                self._enter_backoff(now_us, exc)
                return
            self._cycle_queue.pop(0)
            self._active = run
            self._active_relation = relation
            if not run.completed(now_us):
                return
            self._finish_active(now_us, start_next=False)
        self._active = None

    def _finish_active(self, now_us: int, *, start_next: bool = True) -> None:
        assert self._active is not None
        self.sink.append(self._active.result())
        self._active = None
        self._active_relation = None
        if start_next and self._cycle_queue:
            self._start_next_run(now_us)

    # -- failure handling ---------------------------------------------------

    def _enter_backoff(self, now_us: int, exc: Exception) -> None:
        log.warning("transport failure on %s: %s; backing off %.1f s",
                    self.source_address, exc, self._backoff_us / 1e6)
        if self._active is not None:
            # Partial run: probes beyond the failure were never sent, so a
            # record would fabricate timeouts. Drop it loudly.
            log.warning("discarding interrupted traceroute run to %s",
                        self._active.relation.destination_address)
            self._active = None
            self._active_relation = None
        self._cycle_queue = []
        self._backoff_until = now_us + self._backoff_us
        self._backoff_us = min(self._backoff_us * 2, _BACKOFF_CAP_US)

    def _resume_transport(self, now_us: int) -> None:
        try:
            self.transport = self._factory()
        except TransportFailure as exc:
            self._backoff_until = now_us + self._backoff_us
            self._backoff_us = min(self._backoff_us * 2, _BACKOFF_CAP_US)
            log.warning("transport rebuild failed on %s: %s",
                        self.source_address, exc)
            return
        self._backoff_until = None
        self._backoff_us = _BACKOFF_INITIAL_US
        # Skip ticks missed while down; fabricating them would lie.
        interval = self.schedule.ping_interval_us
        if self._next_ping_us <= now_us:
            missed = (now_us - self._next_ping_us) // interval + 1
            self._next_ping_us += missed * interval
        while self._next_cycle_us <= now_us:
            self._cycle_index += 1
            self._next_cycle_us = self._cycle_start(self._cycle_index)


class LiveClock:
    """Epoch-anchored monotonic clock: wall-clock timestamps, no backsteps."""

    def __init__(self):
        self._offset = time.time_ns() // 1000 - time.monotonic_ns() // 1000

    def now_us(self) -> int:
        return time.monotonic_ns() // 1000 + self._offset

    def sleep_until(self, t_us: int) -> None:
        delta = t_us - self.now_us()
        if delta > 0:
            time.sleep(delta / 1e6)


class RawIcmpTransport:
    """probe.Transport over a raw ICMP/ICMPv6 socket (needs privileges).

    Raw v4 sockets deliver the full IP packet; the header is stripped before
    hand-off so both families present bare ICMP messages. PermissionError
    propagates so callers can distinguish privilege problems from transport
    failures.
    """

    def __init__(self, source_address: str, clock: Clock | None = None):
        self.source_address = source_address
        self.family = icmp.family_of(source_address)
        self.clock = clock or LiveClock()
        if self.family is Family.V4:
            self._sock = socket.socket(socket.AF_INET, socket.SOCK_RAW,
                                       socket.IPPROTO_ICMP)
        else:
            self._sock = socket.socket(socket.AF_INET6, socket.SOCK_RAW,
                                       socket.getprotobyname("ipv6-icmp"))
        try:
            self._sock.bind((source_address, 0))
        except OSError as exc:
            self._sock.close()
            raise TransportFailure(f"cannot bind {source_address}: {exc}") from exc
        self._sock.setblocking(False)

    def send(self, data: bytes, ttl: int, destination: str) -> int:
        try:
            if self.family is Family.V4:
                self._sock.setsockopt(socket.IPPROTO_IP, socket.IP_TTL, ttl)
            else:
                self._sock.setsockopt(socket.IPPROTO_IPV6,
                                      socket.IPV6_UNICAST_HOPS, ttl)
            self._sock.sendto(data, (destination, 0))
        except OSError as exc:
            raise TransportFailure(str(exc)) from exc
        return self.clock.now_us()

    def receive(self, deadline_us: int) -> tuple[bytes, str, int] | None:
        while True:
            now = self.clock.now_us()
            if now >= deadline_us:
                return None
            readable, _, _ = select.select([self._sock], [], [],
                                           (deadline_us - now) / 1e6)
            if not readable:
                return None
            try:
                data, addr = self._sock.recvfrom(65535)
            except OSError as exc:
                raise TransportFailure(str(exc)) from exc
            if self.family is Family.V4 and data and (data[0] >> 4) == 4:
                data = data[(data[0] & 0x0F) * 4:]
            return data, addr[0], self.clock.now_us()

    def close(self) -> None:
        self._sock.close()


def run_relation_worker(worker: SourceWorker, clock: Clock,
                        should_stop: Callable[[], bool] = lambda: False) -> None:
    """Blocking driver: runs one worker against a real (or sim) transport."""
    while not should_stop():
        wakeup = worker.next_wakeup()
        if wakeup is None:
            return
        # Cap the wait so should_stop() is polled even on an idle network.
        deadline = min(wakeup, clock.now_us() + 250_000)
        packet = worker.transport.receive(deadline)
        if packet is not None:
            worker.on_packet(*packet)
        if clock.now_us() >= wakeup:
            worker.on_wakeup(clock.now_us())
