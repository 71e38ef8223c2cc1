"""Deterministic in-process network simulator: the probe engine's test bed.

Models TTL decrement, ECMP next-hop selection keyed on the first 4 bytes of
the transport header, per-router ICMP response policies (responsive, silent,
token-bucket rate limit) and scripted topology changes on a virtual
microsecond clock. Replies travel back over the reverse of the forward path
with the same accumulated latency, so ping RTTs are exactly twice the
one-way link latency sum.

Topology files are YAML; see fixtures/ for the documented schema.
"""

from __future__ import annotations

import bisect
import heapq
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import icmp, probe
from .icmp import Family
from .probe import ProbeSchedule, RelationKey, SourceWorker, TransportFailure

MAX_PATH_HOPS = 512

POLICY_RESPONSIVE = "responsive"
POLICY_SILENT = "silent"
POLICY_RATE_LIMIT = "rate_limit"


class TopologyError(Exception):
    """Invalid topology definition."""


@dataclass(frozen=True, slots=True)
class RouterSpec:
    name: str
    address: str
    asn: int | None = None
    country: str | None = None
    lat: float | None = None
    lon: float | None = None


@dataclass(frozen=True, slots=True)
class Policy:
    kind: str = POLICY_RESPONSIVE
    rate: int = 0  # responses per simulated second, rate_limit only


@dataclass(frozen=True, slots=True)
class SimEvent:
    at_us: int
    action: str
    params: tuple


@dataclass(slots=True)
class SimTopology:
    routers: dict[str, RouterSpec]
    links: dict[tuple[str, str], int]
    ecmp: dict[str, dict[str, tuple[str, ...]]]
    policies: dict[str, Policy]
    events: list[SimEvent]
    start_us: int = 1_609_459_200_000_000  # 2021-01-01T00:00:00Z
    measurement: dict | None = None

    def validate(self) -> None:
        for (u, v), latency in self.links.items():
            if u not in self.routers or v not in self.routers:
                raise TopologyError(f"link {u}->{v} references unknown router")
            if latency <= 0:
                raise TopologyError(f"link {u}->{v} latency must be positive")
        for router, groups in self.ecmp.items():
            if router not in self.routers:
                raise TopologyError(f"ecmp entry for unknown router {router}")
            for dest, group in groups.items():
                if not group:
                    raise TopologyError(f"empty ecmp group at {router} for {dest}")
                for hop in group:
                    if hop not in self.routers:
                        raise TopologyError(
                            f"ecmp group at {router} references unknown router {hop}")
        for router in self.policies:
            if router not in self.routers:
                raise TopologyError(f"policy for unknown router {router}")
        if any(self.events[i].at_us > self.events[i + 1].at_us
               for i in range(len(self.events) - 1)):
            raise TopologyError("events must be sorted by time")
        addresses = [r.address for r in self.routers.values()]
        if len(set(addresses)) != len(addresses):
            raise TopologyError("router addresses must be unique")


def _parse_policy(raw) -> Policy:
    if raw in (None, POLICY_RESPONSIVE):
        return Policy(POLICY_RESPONSIVE)
    if raw == POLICY_SILENT:
        return Policy(POLICY_SILENT)
    if isinstance(raw, dict) and POLICY_RATE_LIMIT in raw:
        rate = int(raw[POLICY_RATE_LIMIT])
        if rate < 0:
            raise TopologyError("rate_limit must be >= 0")
        return Policy(POLICY_RATE_LIMIT, rate)
    raise TopologyError(f"unknown policy {raw!r}")


def topology_from_dict(doc: dict) -> SimTopology:
    routers = {}
    for name, spec in (doc.get("routers") or {}).items():
        if not isinstance(spec, dict) or "address" not in spec:
            raise TopologyError(f"router {name} needs an address")
        routers[name] = RouterSpec(
            name=name, address=str(spec["address"]),
            asn=spec.get("asn"), country=spec.get("country"),
            lat=spec.get("lat"), lon=spec.get("lon"))
    links = {}
    for entry in doc.get("links") or []:
        links[(entry["from"], entry["to"])] = int(entry["latency_us"])
    ecmp: dict[str, dict[str, tuple[str, ...]]] = {}
    for router, groups in (doc.get("ecmp") or {}).items():
        if isinstance(groups, list):
            groups = {"default": groups}
        ecmp[router] = {dest: tuple(group) for dest, group in groups.items()}
    policies = {router: _parse_policy(raw)
                for router, raw in (doc.get("policies") or {}).items()}
    start_us = int(doc.get("start_time", 1_609_459_200_000_000))
    events = []
    for entry in doc.get("events") or []:
        at_us = start_us + int(round(float(entry["at"]) * 1_000_000))
        action = entry["action"]
        if action in ("add_link", "set_latency"):
            params = (entry["from"], entry["to"], int(entry["latency_us"]))
        elif action == "remove_link":
            params = (entry["from"], entry["to"])
        elif action == "set_policy":
            params = (entry["router"], _parse_policy(entry["policy"]))
        else:
            raise TopologyError(f"unknown event action {action!r}")
        events.append(SimEvent(at_us, action, params))
    events.sort(key=lambda e: e.at_us)
    topo = SimTopology(routers=routers, links=links, ecmp=ecmp,
                       policies=policies, events=events, start_us=start_us,
                       measurement=doc.get("measurement"))
    topo.validate()
    return topo


def load_topology(path: str | Path) -> SimTopology:
    with open(path, "r", encoding="utf-8") as fp:
        doc = yaml.safe_load(fp)
    if not isinstance(doc, dict):
        raise TopologyError(f"{path}: topology must be a mapping")
    return topology_from_dict(doc)


class VirtualClock:
    """Monotone integer-microsecond clock; time only moves via advance_to."""

    def __init__(self, start_us: int):
        self._now = start_us

    def now_us(self) -> int:
        return self._now

    def advance_to(self, t_us: int) -> None:
        if t_us < self._now:
            raise ValueError(f"clock cannot move backwards ({t_us} < {self._now})")
        self._now = t_us

    # probe.Clock protocol: blocking drivers "sleep" by jumping.
    sleep_until = advance_to


@dataclass(slots=True)
class Outcome:
    """Fate of one forwarded packet (exactly one per probe)."""

    kind: str  # delivered | time_exceeded | dropped
    node: str | None
    at_us: int
    latency_us: int
    reason: str = ""
    path: tuple[str, ...] = ()


@dataclass(slots=True)
class SentProbe:
    """Send-log entry kept for tests and oracles."""

    t_us: int
    source: str
    destination: str
    ttl: int
    data: bytes
    outcome: Outcome


class _EpochState:
    """Immutable topology view for one interval between events."""

    __slots__ = ("links", "ecmp", "policies", "adjacency")

    def __init__(self, links, ecmp, policies):
        self.links = links
        self.ecmp = ecmp
        self.policies = policies
        self.adjacency: dict[str, list[str]] = {}
        for (u, v) in links:
            self.adjacency.setdefault(u, []).append(v)
        for targets in self.adjacency.values():
            targets.sort()


class _TokenBucket:
    __slots__ = ("tokens", "last_us")

    def __init__(self, capacity: float, now_us: int):
        self.tokens = capacity
        self.last_us = now_us

    def allow(self, now_us: int, rate: int) -> bool:
        if rate <= 0:
            return False
        capacity = float(rate)
        self.tokens = min(capacity,
                          self.tokens + (now_us - self.last_us) * rate / 1e6)
        self.last_us = now_us
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return True
        return False


class SimNetwork:
    """Topology plus scripted events, evaluated at any virtual time."""

    def __init__(self, topology: SimTopology):
        self.topology = topology
        self._by_address = {r.address: r.name for r in topology.routers.values()}
        self._epoch_times = [topology.start_us]
        self._epochs = [_EpochState(dict(topology.links),
                                    {r: dict(g) for r, g in topology.ecmp.items()},
                                    dict(topology.policies))]
        links = dict(topology.links)
        ecmp = {r: dict(g) for r, g in topology.ecmp.items()}
        policies = dict(topology.policies)
        for event in topology.events:
            if event.action in ("add_link", "set_latency"):
                u, v, latency = event.params
                links[(u, v)] = latency
            elif event.action == "remove_link":
                links.pop(event.params, None)
            elif event.action == "set_policy":
                router, policy = event.params
                policies[router] = policy
            self._epoch_times.append(event.at_us)
            self._epochs.append(_EpochState(dict(links),
                                            {r: dict(g) for r, g in ecmp.items()},
                                            dict(policies)))
        self._buckets: dict[str, _TokenBucket] = {}

    def node_by_address(self, address: str) -> str:
        try:
            return self._by_address[address]
        except KeyError:
            raise TransportFailure(f"no simulated node has address {address}") from None

    def address_of(self, node: str) -> str:
        return self.topology.routers[node].address

    def state_at(self, t_us: int) -> _EpochState:
        idx = bisect.bisect_right(self._epoch_times, t_us) - 1
        return self._epochs[max(idx, 0)]

    def _next_hop(self, state: _EpochState, router: str, dest_node: str,
                  prefix_value: int) -> str | None:
        groups = state.ecmp.get(router)
        if groups:
            group = groups.get(dest_node) or groups.get("default")
            if group:
                return group[prefix_value % len(group)]
        neighbors = state.adjacency.get(router, [])
        if len(neighbors) == 1:
            return neighbors[0]
        return None

    def forward(self, data: bytes, ttl: int, ingress: str, dest_node: str,
                t_us: int) -> Outcome:
        """Walk the packet hop by hop; returns exactly one outcome.

        Each forwarding router decrements the TTL; at zero the packet is
        dropped and a time-exceeded error originates from that router. The
        ECMP next hop is group[prefix mod group size] where prefix is the
        big-endian value of the packet's first 4 bytes: path choice depends
        on nothing else.
        """
        if ingress not in self.topology.routers:
            raise TransportFailure(f"unknown ingress node {ingress}")
        if ingress == dest_node:
            return Outcome("delivered", dest_node, t_us, 0, path=(ingress,))
        prefix_value = int.from_bytes(data[:icmp.PREFIX_LEN], "big")
        current, now, latency = ingress, t_us, 0
        path = [ingress]
        for _ in range(MAX_PATH_HOPS):
            state = self.state_at(now)
            nxt = self._next_hop(state, current, dest_node, prefix_value)
            if nxt is None:
                return Outcome("dropped", None, now, latency,
                               reason=f"no route from {current}", path=tuple(path))
            link = state.links.get((current, nxt))
            if link is None:
                return Outcome("dropped", None, now, latency,
                               reason=f"link {current}->{nxt} is down",
                               path=tuple(path))
            now += link
            latency += link
            path.append(nxt)
            if nxt == dest_node:
                return Outcome("delivered", dest_node, now, latency, path=tuple(path))
            ttl -= 1
            if ttl == 0:
                return Outcome("time_exceeded", nxt, now, latency, path=tuple(path))
            current = nxt
        return Outcome("dropped", None, now, latency, reason="routing loop",
                       path=tuple(path))

    def _policy_allows(self, node: str, t_us: int) -> bool:
        policy = self.state_at(t_us).policies.get(node, Policy())
        if policy.kind == POLICY_SILENT:
            return False
        if policy.kind == POLICY_RATE_LIMIT:
            bucket = self._buckets.get(node)
            if bucket is None:
                bucket = self._buckets[node] = _TokenBucket(float(max(policy.rate, 1)),
                                                            t_us)
            return bucket.allow(t_us, policy.rate)
        return True

    def response_for(self, outcome: Outcome, request: bytes, family: Family,
                     source_address: str) -> tuple[int, bytes, str] | None:
        """(arrival time at source, response bytes, responder address) or None.

        Responses retrace the forward path, so the return leg adds the same
        accumulated latency; response transit is not subject to policies.
        """
        if outcome.kind == "dropped":
            return None
        responder = self.address_of(outcome.node)
        if not self._policy_allows(outcome.node, outcome.at_us):
            return None
        if outcome.kind == "delivered":
            data = icmp.reply_bytes_for_request(request, family, source=responder,
                                                destination=source_address)
        else:
            data = icmp.encode_time_exceeded(request, family, source=responder,
                                             destination=source_address)
        return outcome.at_us + outcome.latency_us, data, responder


class SimTransport:
    """probe.Transport implementation bound to one simulated source node."""

    def __init__(self, network: SimNetwork, clock: VirtualClock, source_address: str):
        self.network = network
        self.clock = clock
        self.source_address = source_address
        self.source_node = network.node_by_address(source_address)
        self.family = icmp.family_of(source_address)
        self.sent_log: list[SentProbe] = []
        self._inbox: list[tuple[int, int, bytes, str]] = []
        self._counter = itertools.count()
        self.fail_next_sends = 0  # test hook: raise on the next N sends

    def send(self, data: bytes, ttl: int, destination: str) -> int:
        if self.fail_next_sends > 0:
            self.fail_next_sends -= 1
            raise TransportFailure("injected send failure")
        now = self.clock.now_us()
        dest_node = self.network.node_by_address(destination)
        outcome = self.network.forward(data, ttl, self.source_node, dest_node, now)
        self.sent_log.append(SentProbe(now, self.source_address, destination,
                                       ttl, data, outcome))
        response = self.network.response_for(outcome, data, self.family,
                                             self.source_address)
        if response is not None:
            arrival, payload, responder = response
            heapq.heappush(self._inbox,
                           (arrival, next(self._counter), payload, responder))
        return now

    def peek_arrival(self) -> int | None:
        return self._inbox[0][0] if self._inbox else None

    def pop_due(self, now_us: int) -> list[tuple[bytes, str, int]]:
        out = []
        while self._inbox and self._inbox[0][0] <= now_us:
            arrival, _, data, responder = heapq.heappop(self._inbox)
            out.append((data, responder, arrival))
        return out

    def receive(self, deadline_us: int) -> tuple[bytes, str, int] | None:
        """Blocking-style receive: advances the virtual clock itself.

        Only for single-worker use; the scenario runner owns the clock and
        drains inboxes via pop_due instead.
        """
        if self._inbox and self._inbox[0][0] <= deadline_us:
            arrival, _, data, responder = heapq.heappop(self._inbox)
            if arrival > self.clock.now_us():
                self.clock.advance_to(arrival)
            return data, responder, arrival
        if deadline_us > self.clock.now_us():
            self.clock.advance_to(deadline_us)
        return None


def drive_workers(workers: list[SourceWorker], transports: list[SimTransport],
                  clock: VirtualClock) -> None:
    """Single-threaded event loop interleaving workers on the virtual clock.

    At each step the clock jumps to the earliest pending arrival or worker
    wakeup; arrivals are delivered before wakeups at the same instant, and
    workers are visited in construction order, so runs are reproducible.
    """
    while True:
        next_time: int | None = None
        for worker in workers:
            wakeup = worker.next_wakeup()
            if wakeup is not None and (next_time is None or wakeup < next_time):
                next_time = wakeup
        for transport in transports:
            arrival = transport.peek_arrival()
            if arrival is not None and (next_time is None or arrival < next_time):
                next_time = arrival
        if next_time is None:
            break
        if all(worker.done for worker in workers):
            break  # only stray arrivals for finished workers remain
        clock.advance_to(max(next_time, clock.now_us()))
        now = clock.now_us()
        for worker, transport in zip(workers, transports):
            for data, responder, t_us in transport.pop_due(now):
                worker.on_packet(data, responder, t_us)
        for worker in workers:
            wakeup = worker.next_wakeup()
            if wakeup is not None and wakeup <= now:
                worker.on_wakeup(now)


@dataclass(slots=True)
class ScenarioResult:
    records: list = field(default_factory=list)
    sent_probes: list[SentProbe] = field(default_factory=list)

    def append(self, record) -> None:  # RecordSink for workers
        self.records.append(record)


def run_scenario(topology: SimTopology, relations: list[RelationKey],
                 schedule: ProbeSchedule, duration_s: float, *, seed: int = 0,
                 sink=None) -> ScenarioResult:
    """Drive the probe engine against the simulator for a virtual duration.

    Deterministic: equal (topology, relations, schedule, duration, seed)
    produce identical record sets. Workers interleave on the shared virtual
    clock exactly as their wakeups and packet arrivals dictate.
    """
    result = ScenarioResult()
    record_sink = _TeeSink(result, sink) if sink is not None else result
    network = SimNetwork(topology)
    clock = VirtualClock(topology.start_us)
    end_us = topology.start_us + int(round(duration_s * 1_000_000))

    by_source: dict[str, list[RelationKey]] = {}
    for relation in relations:
        by_source.setdefault(relation.source_address, []).append(relation)

    workers: list[SourceWorker] = []
    transports: list[SimTransport] = []
    for source_address in sorted(by_source):
        transport = SimTransport(network, clock, source_address)
        worker = SourceWorker(by_source[source_address], schedule,
                              lambda t=transport: t, record_sink,
                              start_us=topology.start_us, end_us=end_us, seed=seed)
        workers.append(worker)
        transports.append(transport)

    drive_workers(workers, transports, clock)

    for transport in transports:
        result.sent_probes.extend(transport.sent_log)
    result.sent_probes.sort(key=lambda p: (p.t_us, p.source, p.destination, p.ttl))
    return result


class _TeeSink:
    """Sink fan-out: scenario result plus a caller-provided store."""

    def __init__(self, *sinks):
        self._sinks = [s for s in sinks if s is not None]

    def append(self, record) -> None:
        for sink in self._sinks:
            sink.append(record)
