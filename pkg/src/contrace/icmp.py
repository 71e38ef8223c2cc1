"""ICMP/ICMPv6 echo codec and checksum-pinning payload crafting.

Per-packet load balancers hash the first four bytes of the transport
header; for ICMP echo these are the type, code and checksum fields. Keeping
the checksum constant across a traceroute run therefore keeps all probes of
the run on one forwarding path.

Payload layout: bytes 0-7 hold the send timestamp (microseconds, unsigned
big-endian), bytes 8-9 hold the compensation word that pins the checksum,
remaining bytes are zero.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

ICMP_HEADER = struct.Struct("!BBHHH")  # type, code, checksum, identifier, sequence
HEADER_LEN = ICMP_HEADER.size

DEFAULT_PAYLOAD_LEN = 16  # header + payload + IP header = 44 B (v4) / 64 B (v6)
MIN_PAYLOAD_LEN = 10      # timestamp (8 B) + compensation word (2 B)
PREFIX_LEN = 4            # the bytes load balancers hash on

ICMPV6_PROTOCOL = 58


class Family(str, Enum):
    """IP protocol family of an address or probe."""

    V4 = "v4"
    V6 = "v6"

    @property
    def display(self) -> str:
        return "IPv4" if self is Family.V4 else "IPv6"


def family_of(address: str) -> Family:
    """Family of an IP address string; raises ValueError for junk."""
    return Family.V4 if ipaddress.ip_address(address).version == 4 else Family.V6


class Kind(Enum):
    ECHO_REQUEST = "echo_request"
    ECHO_REPLY = "echo_reply"
    TIME_EXCEEDED = "time_exceeded"
    OTHER = "other"


ECHO_REQUEST_TYPE = {Family.V4: 8, Family.V6: 128}
ECHO_REPLY_TYPE = {Family.V4: 0, Family.V6: 129}
TIME_EXCEEDED_TYPE = {Family.V4: 11, Family.V6: 3}

_KIND_BY_TYPE = {
    (Family.V4, 8): Kind.ECHO_REQUEST,
    (Family.V4, 0): Kind.ECHO_REPLY,
    (Family.V4, 11): Kind.TIME_EXCEEDED,
    (Family.V6, 128): Kind.ECHO_REQUEST,
    (Family.V6, 129): Kind.ECHO_REPLY,
    (Family.V6, 3): Kind.TIME_EXCEEDED,
}


class CodecError(Exception):
    """Base class for codec failures."""


class Truncated(CodecError):
    """Message shorter than the minimal ICMP header."""


class PayloadTooSmall(CodecError):
    """Payload cannot hold the timestamp plus the compensation word."""


class MissingPseudoHeader(CodecError):
    """ICMPv6 checksums cover the pseudo-header; addresses are required."""


@dataclass(frozen=True, slots=True)
class EchoPacket:
    """One ICMP/ICMPv6 echo-family message (checksum field is derived)."""

    kind: Kind
    icmp_type: int
    icmp_code: int
    checksum: int
    identifier: int
    sequence: int
    payload: bytes


@dataclass(slots=True)
class DecodedMessage:
    """Result of decode_message; checksum_ok is a soft flag, never fatal."""

    kind: Kind
    icmp_type: int
    icmp_code: int
    checksum: int
    identifier: int | None
    sequence: int | None
    payload: bytes
    checksum_ok: bool
    inner: EchoPacket | None = None

    @property
    def match_key(self) -> tuple[int, int] | None:
        if self.identifier is None or self.sequence is None:
            return None
        return (self.identifier, self.sequence)


@lru_cache(maxsize=128)
def _word_struct(n: int) -> struct.Struct:
    return struct.Struct(f"!{n}H")


def _word_sum(data: bytes) -> int:
    """Sum of big-endian 16-bit words, zero-padded to even length."""
    if len(data) & 1:
        data = data + b"\x00"
    return sum(_word_struct(len(data) >> 1).unpack(data))


def _fold(total: int) -> int:
    """End-around-carry reduction of a word sum into 16 bits."""
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def internet_checksum(data: bytes) -> int:
    """One's-complement of the one's-complement sum of 16-bit words."""
    return ~_fold(_word_sum(data)) & 0xFFFF


def _pseudo_prefix(family: Family, source: str | None, destination: str | None,
                   message_len: int) -> bytes:
    """Checksum prefix: empty for v4, the ICMPv6 pseudo-header for v6."""
    if family is Family.V4:
        return b""
    if not source or not destination:
        raise MissingPseudoHeader("ICMPv6 checksum needs source and destination addresses")
    src = ipaddress.IPv6Address(source).packed
    dst = ipaddress.IPv6Address(destination).packed
    return src + dst + struct.pack("!I3xB", message_len, ICMPV6_PROTOCOL)


@lru_cache(maxsize=4096)
def _pseudo_word_sum(family: Family, source: str | None, destination: str | None,
                     message_len: int) -> int:
    if family is Family.V4:
        return 0
    return _word_sum(_pseudo_prefix(family, source, destination, message_len))


def _compensation(base_sum: int, target: int) -> int:
    # Solvability: the checksum is ~fold(S), and fold maps any S > 0 onto
    # 1..0xFFFF by its residue mod 0xFFFF (end-around carry). The fold we
    # need is C = ~target. Any target that is itself the checksum of a
    # message with at least one nonzero word has C >= 1, because C = 0
    # (target 0xFFFF) is only produced by the all-zero message. Adding
    # w = (C - S0) mod 0xFFFF makes the total congruent to C, and with
    # S0 + w > 0 the fold lands exactly on C. The one degenerate case,
    # S0 == 0 with C == 0xFFFF, is fixed by the other representative
    # w = 0xFFFF, which still fits 16 bits. No carry can escape: fold is
    # applied to the final sum, so intermediate carries are absorbed.
    c = (~target) & 0xFFFF
    if c == 0:
        raise CodecError("target checksum 0xffff is not the checksum of any nonzero message")
    w = (c - base_sum) % 0xFFFF
    if _fold(base_sum + w) != c:
        w = 0xFFFF
    return w


def plain_payload(timestamp_us: int, payload_len: int = DEFAULT_PAYLOAD_LEN) -> bytes:
    """Uncompensated payload: timestamp, zero compensation word, zero fill."""
    if payload_len < MIN_PAYLOAD_LEN:
        raise PayloadTooSmall(
            f"payload of {payload_len} B cannot hold timestamp and compensation word")
    return (timestamp_us & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "big") + bytes(payload_len - 8)


def _crafted_parts(family: Family, identifier: int, sequence: int,
                   target_checksum: int, timestamp_us: int, payload_len: int,
                   source: str | None, destination: str | None) -> tuple[bytes, bytes]:
    """(timestamp bytes, compensation word bytes) pinning the checksum.

    Only the header and timestamp words contribute to the base sum: the
    compensation slot and tail are zero, and zero words never change a
    one's-complement sum.
    """
    if payload_len < MIN_PAYLOAD_LEN:
        raise PayloadTooSmall(
            f"payload of {payload_len} B cannot hold timestamp and compensation word")
    if not 0 <= target_checksum <= 0xFFFF:
        raise ValueError("target checksum must be a 16-bit value")
    ts = (timestamp_us & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "big")
    base_sum = _word_sum(
        ICMP_HEADER.pack(ECHO_REQUEST_TYPE[family], 0, 0, identifier, sequence) + ts)
    base_sum += _pseudo_word_sum(family, source, destination,
                                 HEADER_LEN + payload_len)
    comp = _compensation(base_sum, target_checksum)
    return ts, comp.to_bytes(2, "big")


def craft_payload(identifier: int, sequence: int, target_checksum: int,
                  timestamp_us: int, payload_len: int = DEFAULT_PAYLOAD_LEN, *,
                  family: Family = Family.V4, source: str | None = None,
                  destination: str | None = None) -> bytes:
    """Payload making the assembled echo request checksum == target_checksum.

    For v6 the checksum covers the pseudo-header, so source and destination
    addresses take part in the compensation.
    """
    ts, comp = _crafted_parts(family, identifier, sequence, target_checksum,
                              timestamp_us, payload_len, source, destination)
    return ts + comp + bytes(payload_len - MIN_PAYLOAD_LEN)


def _checksum_for(family: Family, icmp_type: int, icmp_code: int, identifier: int,
                  sequence: int, payload: bytes, source: str | None,
                  destination: str | None) -> int:
    base = ICMP_HEADER.pack(icmp_type, icmp_code, 0, identifier, sequence) + payload
    prefix = _pseudo_prefix(family, source, destination, len(base))
    return internet_checksum(prefix + base)


def build_echo_request(family: Family, identifier: int, sequence: int, payload: bytes,
                       *, source: str | None = None,
                       destination: str | None = None) -> EchoPacket:
    icmp_type = ECHO_REQUEST_TYPE[family]
    cksum = _checksum_for(family, icmp_type, 0, identifier, sequence, payload,
                          source, destination)
    return EchoPacket(Kind.ECHO_REQUEST, icmp_type, 0, cksum, identifier, sequence, payload)


def build_echo_reply(family: Family, identifier: int, sequence: int, payload: bytes,
                     *, source: str | None = None,
                     destination: str | None = None) -> EchoPacket:
    icmp_type = ECHO_REPLY_TYPE[family]
    cksum = _checksum_for(family, icmp_type, 0, identifier, sequence, payload,
                          source, destination)
    return EchoPacket(Kind.ECHO_REPLY, icmp_type, 0, cksum, identifier, sequence, payload)


def encode_echo(packet: EchoPacket, family: Family, *, source: str | None = None,
                destination: str | None = None) -> bytes:
    """Serialize an echo packet; the emitted checksum is always recomputed."""
    cksum = _checksum_for(family, packet.icmp_type, packet.icmp_code,
                          packet.identifier, packet.sequence, packet.payload,
                          source, destination)
    return ICMP_HEADER.pack(packet.icmp_type, packet.icmp_code, cksum,
                            packet.identifier, packet.sequence) + packet.payload


def make_request_bytes(family: Family, identifier: int, sequence: int,
                       timestamp_us: int, *, target_checksum: int | None = None,
                       payload_len: int = DEFAULT_PAYLOAD_LEN,
                       source: str | None = None,
                       destination: str | None = None) -> bytes:
    """Assemble a ready-to-send echo request, optionally checksum-pinned."""
    if payload_len < MIN_PAYLOAD_LEN:
        raise PayloadTooSmall(
            f"payload of {payload_len} B cannot hold timestamp and compensation word")
    icmp_type = ECHO_REQUEST_TYPE[family]
    tail = bytes(payload_len - MIN_PAYLOAD_LEN)
    if target_checksum is None:
        ts = (timestamp_us & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "big")
        base_sum = _word_sum(ICMP_HEADER.pack(icmp_type, 0, 0, identifier,
                                              sequence) + ts)
        base_sum += _pseudo_word_sum(family, source, destination,
                                     HEADER_LEN + payload_len)
        cksum = ~_fold(base_sum) & 0xFFFF
        comp = b"\x00\x00"
    else:
        ts, comp = _crafted_parts(family, identifier, sequence, target_checksum,
                                  timestamp_us, payload_len, source, destination)
        cksum = target_checksum  # compensation lands the fold exactly there
    return ICMP_HEADER.pack(icmp_type, 0, cksum, identifier, sequence) \
        + ts + comp + tail


def reply_bytes_for_request(request: bytes, family: Family, *,
                            source: str | None = None,
                            destination: str | None = None) -> bytes:
    """Echo reply mirroring a request's identifier, sequence and payload."""
    if len(request) < HEADER_LEN:
        raise Truncated(f"{len(request)}-byte request below minimal header")
    _, _, _, identifier, sequence = ICMP_HEADER.unpack_from(request)
    reply = build_echo_reply(family, identifier, sequence, request[HEADER_LEN:],
                             source=source, destination=destination)
    return encode_echo(reply, family, source=source, destination=destination)


def encode_time_exceeded(original: bytes, family: Family, *,
                         source: str | None = None,
                         destination: str | None = None) -> bytes:
    """Time-exceeded error quoting the expired message after 4 unused bytes."""
    icmp_type = TIME_EXCEEDED_TYPE[family]
    base = struct.pack("!BBHI", icmp_type, 0, 0, 0) + original
    prefix = _pseudo_prefix(family, source, destination, len(base))
    cksum = internet_checksum(prefix + base)
    return struct.pack("!BBHI", icmp_type, 0, cksum, 0) + original


def _parse_quoted_request(quote: bytes, family: Family) -> EchoPacket | None:
    """Parse the packet quoted by a time-exceeded error.

    Live captures quote the full invoking packet including its IP header;
    the simulator quotes the bare ICMP message. Both are accepted.
    """
    rest = quote
    if rest:
        version = rest[0] >> 4
        if family is Family.V4 and version == 4 and len(rest) >= 20:
            rest = rest[(rest[0] & 0x0F) * 4:]
        elif family is Family.V6 and version == 6 and len(rest) >= 40:
            rest = rest[40:]
    if len(rest) < HEADER_LEN:
        return None
    icmp_type, code, cksum, identifier, sequence = ICMP_HEADER.unpack_from(rest)
    kind = _KIND_BY_TYPE.get((family, icmp_type), Kind.OTHER)
    return EchoPacket(kind, icmp_type, code, cksum, identifier, sequence,
                      rest[HEADER_LEN:])


def decode_message(data: bytes, family: Family, *, source: str | None = None,
                   destination: str | None = None) -> DecodedMessage:
    """Classify a received ICMP message and extract its matching key.

    Checksum mismatches are reported through checksum_ok, not raised:
    middleboxes rewrite packets and the message is still usable for
    topology. For v6 without addresses the checksum is unverifiable and
    reported as ok.
    """
    if len(data) < HEADER_LEN:
        raise Truncated(f"{len(data)}-byte message below minimal header")
    icmp_type, code, cksum, field1, field2 = ICMP_HEADER.unpack_from(data)
    kind = _KIND_BY_TYPE.get((family, icmp_type), Kind.OTHER)
    if family is Family.V4:
        checksum_ok = internet_checksum(data) == 0
    elif source and destination:
        checksum_ok = internet_checksum(
            _pseudo_prefix(family, source, destination, len(data)) + data) == 0
    else:
        checksum_ok = True
    payload = data[HEADER_LEN:]
    if kind is Kind.TIME_EXCEEDED:
        inner = _parse_quoted_request(payload, family)
        identifier = inner.identifier if inner else None
        sequence = inner.sequence if inner else None
        return DecodedMessage(kind, icmp_type, code, cksum, identifier, sequence,
                              payload, checksum_ok, inner)
    if kind in (Kind.ECHO_REQUEST, Kind.ECHO_REPLY):
        return DecodedMessage(kind, icmp_type, code, cksum, field1, field2,
                              payload, checksum_ok)
    return DecodedMessage(Kind.OTHER, icmp_type, code, cksum, None, None,
                          payload, checksum_ok)


def hash_prefix(data: bytes) -> bytes:
    """First 4 bytes of the transport header: what load balancers hash."""
    if len(data) < PREFIX_LEN:
        raise Truncated(f"{len(data)}-byte message has no 4-byte prefix")
    return data[:PREFIX_LEN]


def timestamp_from_payload(payload: bytes) -> int | None:
    """Send timestamp embedded at the start of an echo payload, if present."""
    if len(payload) < 8:
        return None
    return int.from_bytes(payload[:8], "big")
