import heapq

import pytest

from contrace import icmp
from contrace.icmp import Family
from contrace.probe import (ProbeSchedule, RelationKey, SourceWorker,
                            TransportFailure, run_ping_once, run_relation_worker,
                            run_traceroute)
from contrace.records import PingRecord, TracerouteRun
from contrace.sim import (SimNetwork, SimTransport, VirtualClock, drive_workers,
                          run_scenario, topology_from_dict)

from conftest import START_US, ecmp4_topology, linear_topology, relation_for


def _setup(topology, source="10.0.0.1"):
    net = SimNetwork(topology)
    clock = VirtualClock(topology.start_us)
    return net, clock, SimTransport(net, clock, source)


class TestRunPingOnce:
    def test_rtt_is_twice_one_way_latency(self):
        # one-way 5000 us -> rtt exactly 10000 us on the virtual clock
        topo = linear_topology(2, [1500, 2000, 1500])
        net, clock, transport = _setup(topo)
        record = run_ping_once(relation_for(topo), transport, clock)
        assert record.status == 255
        assert record.rtt == 10_000

    def test_silent_destination_times_out(self):
        topo = linear_topology(2, policies={"dst": "silent"})
        net, clock, transport = _setup(topo)
        record = run_ping_once(relation_for(topo), transport, clock,
                               reply_timeout_s=1.0)
        assert record.status == 0
        assert record.rtt is None
        assert clock.now_us() == START_US + 1_000_000

    def test_normal_reply_status_255(self):
        topo = linear_topology(1)
        net, clock, transport = _setup(topo)
        record = run_ping_once(relation_for(topo), transport, clock)
        assert record.status == 255

    def test_ttl_too_small_reports_time_exceeded(self):
        topo = linear_topology(3)
        net, clock, transport = _setup(topo)
        record = run_ping_once(relation_for(topo), transport, clock, ttl=2)
        assert record.status == 1
        assert record.rtt is None


class TestRunTraceroute:
    def test_five_hop_path_statuses(self):
        topo = linear_topology(4)  # 4 routers + destination = 5 hops
        net, clock, transport = _setup(topo)
        schedule = ProbeSchedule(max_ttl=20, reply_timeout_s=2.0)
        run = run_traceroute(relation_for(topo), schedule, transport, clock)
        assert [h.status for h in run.hops] == [1, 1, 1, 1, 255]
        assert [h.hop for h in run.hops] == [1, 2, 3, 4, 5]
        assert run.hops[-1].address == topo.routers["dst"].address

    def test_rate_limited_router_leaves_gap(self):
        topo = linear_topology(4, policies={"r3": {"rate_limit": 0}})
        net, clock, transport = _setup(topo)
        schedule = ProbeSchedule(max_ttl=20, reply_timeout_s=2.0)
        run = run_traceroute(relation_for(topo), schedule, transport, clock)
        assert [h.status for h in run.hops] == [1, 1, 0, 1, 255]
        assert run.hops[2].address is None

    def test_unreachable_destination_records_all_ttls(self):
        topo = linear_topology(2, policies={"dst": "silent"})
        net, clock, transport = _setup(topo)
        schedule = ProbeSchedule(max_ttl=6, reply_timeout_s=1.0)
        run = run_traceroute(relation_for(topo), schedule, transport, clock)
        assert len(run.hops) == 6
        assert [h.status for h in run.hops] == [1, 1, 0, 0, 0, 0]

    def test_hop_rtts_accumulate(self):
        topo = linear_topology(2, [1000, 2000, 3000])
        net, clock, transport = _setup(topo)
        schedule = ProbeSchedule(max_ttl=5, reply_timeout_s=2.0)
        run = run_traceroute(relation_for(topo), schedule, transport, clock)
        assert [h.rtt for h in run.hops] == [2000, 6000, 12000]

    def test_burst_send_timestamps_do_not_wait(self):
        topo = linear_topology(2)
        net, clock, transport = _setup(topo)
        schedule = ProbeSchedule(max_ttl=10, reply_timeout_s=2.0)
        run_traceroute(relation_for(topo), schedule, transport, clock)
        times = [p.t_us for p in transport.sent_log]
        assert max(times) - min(times) < schedule.reply_timeout_us

    def test_crafted_run_shares_prefix(self):
        topo = ecmp4_topology()
        net, clock, transport = _setup(topo)
        schedule = ProbeSchedule(max_ttl=10, reply_timeout_s=2.0)
        run_traceroute(relation_for(topo), schedule, transport, clock)
        prefixes = {icmp.hash_prefix(p.data) for p in transport.sent_log}
        assert len(prefixes) == 1


def _branches(run):
    """Branch ids of the ECMP fixture hops (addresses 10.3.<branch>.<pos>)."""
    out = set()
    for hop in run.hops:
        if hop.address and hop.address.startswith("10.3."):
            out.add(int(hop.address.split(".")[2]))
    return out


class TestEcmpPathInvariance:
    def test_crafted_runs_take_single_paths(self):
        topo = ecmp4_topology()
        relation = relation_for(topo)
        schedule = ProbeSchedule(traceroute_interval_s=10.0, traceroute_rounds=1,
                                 max_ttl=10, reply_timeout_s=1.0)
        result = run_scenario(topo, [relation], schedule, 1000, seed=42)
        runs = [r for r in result.records if isinstance(r, TracerouteRun)]
        assert len(runs) == 100
        assert all(len(_branches(r)) == 1 for r in runs)
        # different runs do spread over branches
        assert len(set(frozenset(_branches(r)) for r in runs)) >= 2

    def test_uncrafted_runs_mix_paths(self):
        topo = ecmp4_topology()
        relation = relation_for(topo)
        schedule = ProbeSchedule(traceroute_interval_s=10.0, traceroute_rounds=1,
                                 max_ttl=10, reply_timeout_s=1.0,
                                 craft_constant_checksum=False)
        result = run_scenario(topo, [relation], schedule, 1000, seed=42)
        runs = [r for r in result.records if isinstance(r, TracerouteRun)]
        assert len(runs) == 100
        assert any(len(_branches(r)) > 1 for r in runs)


class TestSourceWorker:
    def test_ping_bursts_every_interval(self):
        # 2 destinations, 10 simulated seconds -> 20 ping records in bursts
        doc = {
            "start_time": START_US,
            "routers": {
                "src": {"address": "10.0.0.1"},
                "d1": {"address": "10.1.0.1"},
                "d2": {"address": "10.2.0.1"},
            },
            "links": [
                {"from": "src", "to": "d1", "latency_us": 1000},
                {"from": "src", "to": "d2", "latency_us": 2000},
            ],
            "ecmp": {"src": {"d1": ["d1"], "d2": ["d2"]}},
        }
        topo = topology_from_dict(doc)
        relations = [
            RelationKey(Family.V4, "S", "D1", "10.0.0.1", "10.1.0.1"),
            RelationKey(Family.V4, "S", "D2", "10.0.0.1", "10.2.0.1"),
        ]
        schedule = ProbeSchedule(traceroute_interval_s=3600.0)
        result = run_scenario(topo, relations, schedule, 10, seed=1)
        pings = [r for r in result.records if isinstance(r, PingRecord)]
        assert len(pings) == 20
        ticks = sorted({p.timestamp for p in pings})
        assert ticks == [START_US + k * 1_000_000 for k in range(10)]
        for tick in ticks:
            assert {p.destination for p in pings if p.timestamp == tick} == \
                {"10.1.0.1", "10.2.0.1"}

    def test_traceroute_destinations_probed_sequentially(self):
        doc = {
            "start_time": START_US,
            "routers": {
                "src": {"address": "10.0.0.1"},
                "r": {"address": "10.9.0.1"},
                "d1": {"address": "10.1.0.1"},
                "d2": {"address": "10.2.0.1"},
            },
            "links": [
                {"from": "src", "to": "r", "latency_us": 1000},
                {"from": "r", "to": "d1", "latency_us": 1000},
                {"from": "r", "to": "d2", "latency_us": 1000},
            ],
            "ecmp": {"r": {"d1": ["d1"], "d2": ["d2"]}},
        }
        topo = topology_from_dict(doc)
        relations = [
            RelationKey(Family.V4, "S", "D1", "10.0.0.1", "10.1.0.1"),
            RelationKey(Family.V4, "S", "D2", "10.0.0.1", "10.2.0.1"),
        ]
        schedule = ProbeSchedule(ping_interval_s=3600.0, traceroute_interval_s=300.0,
                                 traceroute_rounds=3, max_ttl=5, reply_timeout_s=1.0)
        result = run_scenario(topo, relations, schedule, 290, seed=3)
        runs = [r for r in result.records if isinstance(r, TracerouteRun)]
        assert len(runs) == 6  # one cycle, 3 rounds x 2 destinations
        d1_runs = [r for r in runs if r.destination == "10.1.0.1"]
        d2_runs = [r for r in runs if r.destination == "10.2.0.1"]
        assert [r.round for r in d1_runs] == [0, 1, 2]
        # destination 2's first burst starts only after destination 1 finished
        assert min(r.timestamp for r in d2_runs) > max(r.timestamp for r in d1_runs)

    def test_workers_independent_under_stall(self):
        doc = {
            "start_time": START_US,
            "routers": {
                "s1": {"address": "10.0.1.1"},
                "s2": {"address": "10.0.2.1"},
                "d": {"address": "10.9.0.1"},
            },
            "links": [
                {"from": "s1", "to": "d", "latency_us": 1000},
                {"from": "s2", "to": "d", "latency_us": 1000},
            ],
        }
        topo = topology_from_dict(doc)
        net = SimNetwork(topo)
        clock = VirtualClock(START_US)
        schedule = ProbeSchedule(traceroute_interval_s=3600.0, reply_timeout_s=0.5)
        sink1, sink2 = [], []
        t1 = SimTransport(net, clock, "10.0.1.1")
        t2 = SimTransport(net, clock, "10.0.2.1")
        t1.fail_next_sends = 3  # stall worker 1 at startup
        end = START_US + 10_000_000
        w1 = SourceWorker([RelationKey(Family.V4, "A", "D", "10.0.1.1", "10.9.0.1")],
                          schedule, lambda: t1, sink1,
                          start_us=START_US, end_us=end, seed=1)
        w2 = SourceWorker([RelationKey(Family.V4, "B", "D", "10.0.2.1", "10.9.0.1")],
                          schedule, lambda: t2, sink2,
                          start_us=START_US, end_us=end, seed=1)
        drive_workers([w1, w2], [t1, t2], clock)
        # worker 2 ran its full schedule despite worker 1's stall
        assert len(sink2) == 10
        assert all(r.status == 255 for r in sink2)
        # worker 1 recovered after backoff and produced some records
        assert 0 < len(sink1) < 10

    def test_duplicate_replies_update_nothing(self):
        topo = linear_topology(2)
        net = SimNetwork(topo)
        clock = VirtualClock(START_US)

        class DuplicatingTransport(SimTransport):
            def send(self, data, ttl, destination):
                t = super().send(data, ttl, destination)
                if self._inbox:
                    arrival, _, payload, responder = self._inbox[0]
                    heapq.heappush(self._inbox,
                                   (arrival, next(self._counter), payload, responder))
                return t

        transport = DuplicatingTransport(net, clock, "10.0.0.1")
        relation = relation_for(topo)
        schedule = ProbeSchedule(traceroute_interval_s=3600.0)
        sink = []
        end = START_US + 5_000_000
        worker = SourceWorker([relation], schedule, lambda: transport,
                              sink, start_us=START_US, end_us=end, seed=2)
        drive_workers([worker], [transport], clock)
        assert len(sink) == 5  # one record per tick despite duplicated replies

    def test_worker_requires_single_source(self):
        schedule = ProbeSchedule()
        relations = [
            RelationKey(Family.V4, "A", "D", "10.0.1.1", "10.9.0.1"),
            RelationKey(Family.V4, "B", "D", "10.0.2.1", "10.9.0.1"),
        ]
        with pytest.raises(ValueError):
            SourceWorker(relations, schedule, lambda: None, [],
                         start_us=0, end_us=1)


class TestIpv6EndToEnd:
    def test_v6_ping_and_traceroute(self):
        doc = {
            "start_time": START_US,
            "routers": {
                "src": {"address": "fd00:1::10"},
                "r1": {"address": "fd00:2::1"},
                "dst": {"address": "fd00:3::10"},
            },
            "links": [
                {"from": "src", "to": "r1", "latency_us": 1000},
                {"from": "r1", "to": "dst", "latency_us": 2000},
            ],
        }
        topo = topology_from_dict(doc)
        net = SimNetwork(topo)
        clock = VirtualClock(START_US)
        transport = SimTransport(net, clock, "fd00:1::10")
        relation = RelationKey(Family.V6, "A", "B", "fd00:1::10", "fd00:3::10")
        record = run_ping_once(relation, transport, clock)
        assert record.status == 255
        assert record.rtt == 2 * 3000
        schedule = ProbeSchedule(max_ttl=6, reply_timeout_s=1.0)
        run = run_traceroute(relation, schedule, transport, clock)
        assert [h.status for h in run.hops] == [1, 255]
        assert run.hops[0].address == "fd00:2::1"
        # the v6 run is checksum-pinned too: constant 4-byte prefixes
        prefixes = {icmp.hash_prefix(p.data) for p in transport.sent_log
                    if p.ttl <= 6}
        assert len(prefixes) <= 2  # ping prefix plus the pinned run prefix


class TestBlockingDriver:
    def test_run_relation_worker_single_source(self):
        topo = linear_topology(2)
        net = SimNetwork(topo)
        clock = VirtualClock(START_US)
        transport = SimTransport(net, clock, "10.0.0.1")
        relation = relation_for(topo)
        schedule = ProbeSchedule(traceroute_interval_s=3600.0)
        sink = []
        worker = SourceWorker([relation], schedule, lambda: transport,
                              sink, start_us=START_US,
                              end_us=START_US + 3_000_000, seed=0)
        run_relation_worker(worker, clock)
        assert len([r for r in sink if isinstance(r, PingRecord)]) == 3


class TestScheduleValidation:
    def test_bad_intervals(self):
        with pytest.raises(ValueError):
            ProbeSchedule(ping_interval_s=0)
        with pytest.raises(ValueError):
            ProbeSchedule(traceroute_rounds=0)
        with pytest.raises(ValueError):
            ProbeSchedule(max_ttl=0)
        with pytest.raises(ValueError):
            ProbeSchedule(max_ttl=256)

    def test_relation_family_consistency(self):
        with pytest.raises(ValueError):
            RelationKey(Family.V4, "a", "b", "10.0.0.1", "2001:db8::1")
        with pytest.raises(ValueError):
            RelationKey(Family.V6, "a", "b", "10.0.0.1", "10.0.0.2")
