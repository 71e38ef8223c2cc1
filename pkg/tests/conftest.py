"""Shared fixtures: small topologies and relation builders."""

import pytest

from contrace.icmp import Family
from contrace.probe import ProbeSchedule, RelationKey
from contrace.sim import topology_from_dict

START_US = 1_609_459_200_000_000  # 2021-01-01T00:00:00Z


def linear_topology(n_routers: int, latencies=None, *, policies=None, events=None):
    """src -> r1 .. rN -> dst chain; latencies per link in order."""
    n_links = n_routers + 1
    latencies = latencies or [1000] * n_links
    assert len(latencies) == n_links
    names = ["src"] + [f"r{i}" for i in range(1, n_routers + 1)] + ["dst"]
    routers = {name: {"address": f"10.0.{i}.1"} for i, name in enumerate(names)}
    links = [{"from": a, "to": b, "latency_us": lat}
             for a, b, lat in zip(names, names[1:], latencies)]
    doc = {"start_time": START_US, "routers": routers, "links": links}
    if policies:
        doc["policies"] = policies
    if events:
        doc["events"] = events
    return topology_from_dict(doc)


def ecmp4_topology(branch_hops: int = 2):
    """src -> lb -> one of 4 parallel branches -> join -> dst.

    Branch routers carry addresses 10.3.<branch>.<position> so tests can
    recover which branch a hop belongs to.
    """
    routers = {
        "src": {"address": "10.0.0.1"},
        "lb": {"address": "10.1.0.1"},
        "join": {"address": "10.4.0.1"},
        "dst": {"address": "10.5.0.1"},
    }
    links = [{"from": "src", "to": "lb", "latency_us": 500}]
    branch_heads = []
    for b in range(4):
        prev = None
        for pos in range(1, branch_hops + 1):
            name = f"b{b}p{pos}"
            routers[name] = {"address": f"10.3.{b}.{pos}"}
            if pos == 1:
                branch_heads.append(name)
                links.append({"from": "lb", "to": name, "latency_us": 600})
            else:
                links.append({"from": prev, "to": name, "latency_us": 700})
            prev = name
        links.append({"from": prev, "to": "join", "latency_us": 900})
    links.append({"from": "join", "to": "dst", "latency_us": 400})
    return topology_from_dict({
        "start_time": START_US,
        "routers": routers,
        "links": links,
        "ecmp": {"lb": {"default": branch_heads}},
    })


def relation_for(topology, src_node="src", dst_node="dst",
                 src_label="SrcISP", dst_label="DstISP"):
    src = topology.routers[src_node].address
    dst = topology.routers[dst_node].address
    return RelationKey(Family.V4, src_label, dst_label, src, dst)


@pytest.fixture
def quick_schedule():
    return ProbeSchedule(ping_interval_s=1.0, traceroute_interval_s=300.0,
                         traceroute_rounds=3, max_ttl=20, reply_timeout_s=3.0)
