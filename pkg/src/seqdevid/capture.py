"""Classic libpcap capture parsing and per-packet header decoding.

The parser reads the original tcpdump container only (magic a1 b2 c3 d4 in
either byte order); pcapng is out of scope. Decoding walks Ethernet, IPv4 or
IPv6, then TCP or UDP, and stops at the first layer it cannot finish: fields
below that point stay None rather than defaulting to zero, so downstream
feature code can tell "absent" from "zero". A truncated trailing record is
dropped and counted, never an error.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
ETH_ARP = 0x0806
PROTO_TCP = 6
PROTO_UDP = 17

FROM_DEVICE = "from_device"
TO_DEVICE = "to_device"
UNKNOWN = "unknown"
_DIRECTIONS = (FROM_DEVICE, TO_DEVICE, UNKNOWN)


class CaptureError(Exception):
    pass


class BadMagic(CaptureError):
    pass


class TruncatedHeader(CaptureError):
    pass


class MissingFile(CaptureError):
    pass


class DuplicateSession(CaptureError):
    pass


class EmptyCapture(CaptureError):
    pass


class BadManifest(CaptureError):
    pass


@dataclass(frozen=True)
class RawPacket:
    """One decoded frame. None means the field could not be decoded."""

    timestamp: float
    captured_len: int
    wire_len: int
    link_type: int
    eth_type: int | None = None
    ip_version: int | None = None
    ip_header_len: int | None = None
    ttl_or_hoplimit: int | None = None
    ip_proto: int | None = None
    src_port: int | None = None
    dst_port: int | None = None
    tcp_flags: int | None = None
    tcp_window: int | None = None
    payload_len: int | None = None
    is_broadcast: bool = False
    direction: str = UNKNOWN

    def __post_init__(self):
        if self.captured_len < 0 or self.captured_len > self.wire_len:
            raise ValueError(
                f"captured_len {self.captured_len} outside [0, wire_len={self.wire_len}]")
        if self.payload_len is not None and not 0 <= self.payload_len <= self.captured_len:
            raise ValueError(
                f"payload_len {self.payload_len} outside [0, captured_len={self.captured_len}]")
        if self.direction not in _DIRECTIONS:
            raise ValueError(f"direction {self.direction!r}")
        has_ports = self.src_port is not None or self.dst_port is not None
        if has_ports and self.ip_proto not in (PROTO_TCP, PROTO_UDP):
            raise ValueError("ports decoded for a non-TCP/UDP packet")
        has_tcp = self.tcp_flags is not None or self.tcp_window is not None
        if has_tcp and self.ip_proto != PROTO_TCP:
            raise ValueError("tcp fields decoded for a non-TCP packet")


@dataclass(frozen=True)
class SessionRecord:
    device_label: str
    session_id: str
    packets: tuple

    def __post_init__(self):
        if not self.packets:
            raise ValueError(f"session {self.device_label}/{self.session_id} has no packets")
        ts = [p.timestamp for p in self.packets]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(
                f"session {self.device_label}/{self.session_id} timestamps go backwards")


@dataclass
class CaptureFile:
    link_type: int
    records: list = field(default_factory=list)  # (timestamp, frame bytes, wire length)
    dropped_records: int = 0


def parse_capture(data):
    """Parse classic pcap bytes into timestamped frames.

    Byte order comes from the magic. A record cut off by the end of the file
    is dropped and counted in dropped_records.
    """
    if len(data) >= 4:
        (magic_be,) = struct.unpack_from(">I", data)
        (magic_le,) = struct.unpack_from("<I", data)
        if magic_be == PCAP_MAGIC:
            endian = ">"
        elif magic_le == PCAP_MAGIC:
            endian = "<"
        else:
            raise BadMagic(f"magic 0x{magic_be:08x} is not a classic pcap header")
    else:
        raise TruncatedHeader(f"{len(data)} bytes is too short for any capture")
    if len(data) < 24:
        raise TruncatedHeader(f"global header needs 24 bytes, file has {len(data)}")

    link_type = struct.unpack_from(endian + "I", data, 20)[0]
    out = CaptureFile(link_type=link_type)
    off = 24
    while off < len(data):
        if off + 16 > len(data):
            out.dropped_records += 1
            break
        ts_sec, ts_usec, incl_len, orig_len = struct.unpack_from(endian + "IIII", data, off)
        off += 16
        if off + incl_len > len(data):
            out.dropped_records += 1
            break
        out.records.append((ts_sec + ts_usec / 1e6, data[off:off + incl_len], orig_len))
        off += incl_len
    if out.dropped_records:
        logger.warning("dropped %d truncated trailing record(s)", out.dropped_records)
    return out


def _decode_transport(frame, proto, t_off, fields):
    """Fill port/flag fields when enough transport header was captured.

    Returns the offset one past the decoded headers, which is t_off itself
    when the transport header is missing or cut short.
    """
    captured = len(frame)
    if proto == PROTO_TCP:
        if captured < t_off + 20:
            return t_off
        header_len = (frame[t_off + 12] >> 4) * 4
        if header_len < 20:
            return t_off  # corrupt data offset; leave the layer undecoded
        fields["src_port"], fields["dst_port"] = struct.unpack_from("!HH", frame, t_off)
        fields["tcp_flags"] = frame[t_off + 13]
        (fields["tcp_window"],) = struct.unpack_from("!H", frame, t_off + 14)
        return min(t_off + header_len, captured)
    if proto == PROTO_UDP:
        if captured < t_off + 8:
            return t_off
        fields["src_port"], fields["dst_port"] = struct.unpack_from("!HH", frame, t_off)
        return t_off + 8
    return t_off


def decode_frame(frame, link_type, timestamp, wire_len=None, device_mac=None):
    """Decode one frame into a RawPacket. Never raises on strange bytes.

    payload_len is captured_len minus every fully decoded header, so it can
    only shrink as more layers decode and is never negative. device_mac (6
    raw bytes) resolves direction; without it direction stays unknown.
    """
    captured = len(frame)
    fields = {
        "timestamp": timestamp,
        "captured_len": captured,
        "wire_len": wire_len if wire_len is not None else captured,
        "link_type": link_type,
        "payload_len": captured,
        "direction": UNKNOWN,
    }
    if link_type != LINKTYPE_ETHERNET or captured < 14:
        return RawPacket(**fields)

    dst, src = frame[0:6], frame[6:12]
    fields["is_broadcast"] = dst == b"\xff\xff\xff\xff\xff\xff"
    if device_mac is not None:
        if src == device_mac:
            fields["direction"] = FROM_DEVICE
        elif dst == device_mac:
            fields["direction"] = TO_DEVICE
    (eth_type,) = struct.unpack_from("!H", frame, 12)
    fields["eth_type"] = eth_type
    consumed = 14

    if eth_type == ETH_IPV4 and captured >= 14 + 20:
        ihl = (frame[14] & 0x0F) * 4
        if frame[14] >> 4 == 4 and ihl >= 20 and captured >= 14 + ihl:
            fields["ip_version"] = 4
            fields["ip_header_len"] = ihl
            fields["ttl_or_hoplimit"] = frame[22]
            proto = frame[23]
            fields["ip_proto"] = proto
            consumed = _decode_transport(frame, proto, 14 + ihl, fields)
    elif eth_type == ETH_IPV6 and captured >= 14 + 40:
        if frame[14] >> 4 == 6:
            fields["ip_version"] = 6
            fields["ip_header_len"] = 40
            fields["ip_proto"] = frame[20]
            fields["ttl_or_hoplimit"] = frame[21]
            consumed = _decode_transport(frame, frame[20], 14 + 40, fields)

    fields["payload_len"] = captured - consumed
    return RawPacket(**fields)


def parse_device_mac(text):
    """aa:bb:cc:dd:ee:ff (or dashes, or bare hex) to 6 raw bytes; '' is None."""
    text = (text or "").strip()
    if not text:
        return None
    digits = text.replace(":", "").replace("-", "")
    try:
        mac = bytes.fromhex(digits)
    except ValueError as exc:
        raise BadManifest(f"bad device_mac {text!r}") from exc
    if len(mac) != 6:
        raise BadManifest(f"device_mac {text!r} is not 6 bytes")
    return mac


def ingest_sessions(manifest_path, capture_root=None):
    """Read a session manifest CSV and decode every listed capture.

    Columns: file, device, session and optional device_mac. Relative capture
    paths resolve against capture_root (default: the manifest's directory).
    Timestamps inside a session are clamped to the running maximum so the
    non-decreasing invariant holds without reordering the capture.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFile(str(manifest_path))
    root = Path(capture_root) if capture_root is not None else manifest_path.parent

    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = set(reader.fieldnames or [])
        if not {"file", "device", "session"} <= header:
            raise BadManifest(
                f"{manifest_path}: need columns file,device,session, got {sorted(header)}")
        rows = list(reader)

    sessions = []
    seen = set()
    for row in rows:
        key = (row["device"], row["session"])
        if key in seen:
            raise DuplicateSession(f"{key[0]}/{key[1]} listed twice")
        seen.add(key)

        path = root / row["file"]
        if not path.exists():
            raise MissingFile(str(path))
        parsed = parse_capture(path.read_bytes())
        if not parsed.records:
            raise EmptyCapture(f"{path} holds no complete records")
        mac = parse_device_mac(row.get("device_mac", ""))

        packets = []
        last_ts = -math.inf
        for ts, data, orig_len in parsed.records:
            ts = max(ts, last_ts)
            last_ts = ts
            packets.append(decode_frame(
                data, parsed.link_type, ts, wire_len=orig_len, device_mac=mac))
        sessions.append(SessionRecord(row["device"], row["session"], tuple(packets)))
    return sessions
