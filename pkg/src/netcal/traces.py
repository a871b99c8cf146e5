"""Packet and syscall trace records, the line-delimited trace format, and PID filtering."""

from __future__ import annotations

import ipaddress
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, TextIO, Union

logger = logging.getLogger(__name__)


class TraceKind(str, Enum):
    PACKET = "packet"
    SYSCALL = "syscall"


class Protocol(str, Enum):
    TCP = "TCP"
    UDP = "UDP"
    ICMP = "ICMP"


class Direction(str, Enum):
    INBOUND = "Inbound"
    OUTBOUND = "Outbound"


class TraceParseError(ValueError):
    """A trace line violates the record schema."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class PacketRecord:
    timestamp: float
    protocol: Protocol
    src_ip: str
    dst_ip: str
    size_bytes: int
    direction: Direction
    src_port: Optional[int] = None
    dst_port: Optional[int] = None
    pid: Optional[int] = None

    def __post_init__(self):
        has_ports = self.protocol in (Protocol.TCP, Protocol.UDP)
        for port in (self.src_port, self.dst_port):
            if has_ports and port is None:
                raise ValueError(f"{self.protocol.value} packet requires both ports")
            if not has_ports and port is not None:
                raise ValueError("ICMP packets carry no ports")
            if port is not None and not 0 <= port <= 65535:
                raise ValueError(f"port {port} outside 0-65535")
        if self.size_bytes < 0:
            raise ValueError(f"negative size {self.size_bytes}")
        if self.pid is not None and self.pid < 0:
            raise ValueError(f"negative pid {self.pid}")
        for addr in (self.src_ip, self.dst_ip):
            ipaddress.ip_address(addr)


@dataclass(frozen=True)
class SyscallRecord:
    timestamp: float
    name: str
    pid: Optional[int] = None
    category: Optional[str] = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("syscall name must be non-empty")
        if self.pid is not None and self.pid < 0:
            raise ValueError(f"negative pid {self.pid}")


Record = Union[PacketRecord, SyscallRecord]


@dataclass(frozen=True)
class Trace:
    """An ordered, homogeneous sequence of records.

    ``label`` is ``"benign"`` or ``"malware:<name>"``; it is metadata and is
    never read by any training routine.
    """

    kind: TraceKind
    records: tuple = ()
    label: str = "benign"
    malformed_lines: int = field(default=0, compare=False)

    def __post_init__(self):
        cls = PacketRecord if self.kind is TraceKind.PACKET else SyscallRecord
        prev = float("-inf")
        for rec in self.records:
            if not isinstance(rec, cls):
                raise TypeError(f"{type(rec).__name__} in a {self.kind.value} trace")
            if rec.timestamp < prev:
                raise ValueError("timestamps must be non-decreasing")
            prev = rec.timestamp

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    @property
    def is_benign(self) -> bool:
        return self.label == "benign"

    def pids(self) -> set:
        return {r.pid for r in self.records if r.pid is not None}


# ---------------------------------------------------------------------------
# line format
# ---------------------------------------------------------------------------

PACKET_KEYS = ("ts", "proto", "src_ip", "src_port", "dst_ip", "dst_port", "size", "dir", "pid")
SYSCALL_KEYS = ("ts", "name", "pid", "cat")


def _format_ts(ts: float) -> str:
    return f"{ts:.6f}"


def format_record(rec: Record) -> str:
    if isinstance(rec, PacketRecord):
        pairs = [
            ("ts", _format_ts(rec.timestamp)),
            ("proto", rec.protocol.value),
            ("src_ip", rec.src_ip),
            ("src_port", rec.src_port),
            ("dst_ip", rec.dst_ip),
            ("dst_port", rec.dst_port),
            ("size", rec.size_bytes),
            ("dir", rec.direction.value),
            ("pid", rec.pid),
        ]
    else:
        pairs = [
            ("ts", _format_ts(rec.timestamp)),
            ("name", rec.name),
            ("pid", rec.pid),
            ("cat", rec.category),
        ]
    return "\t".join(f"{k}={v}" for k, v in pairs if v is not None)


def _int_field(fields: dict, key: str, lineno: int) -> Optional[int]:
    if key not in fields:
        return None
    try:
        return int(fields[key])
    except ValueError:
        raise TraceParseError(lineno, f"{key}={fields[key]!r} is not an integer") from None


def parse_record(line: str, kind: TraceKind, lineno: int = 1) -> Record:
    fields = {}
    allowed = PACKET_KEYS if kind is TraceKind.PACKET else SYSCALL_KEYS
    for part in line.split("\t"):
        key, sep, value = part.partition("=")
        if not sep:
            raise TraceParseError(lineno, f"field {part!r} is not key=value")
        if key not in allowed:
            raise TraceParseError(lineno, f"unknown key {key!r}")
        if key in fields:
            raise TraceParseError(lineno, f"duplicate key {key!r}")
        fields[key] = value
    if "ts" not in fields:
        raise TraceParseError(lineno, "missing ts")
    try:
        ts = float(fields["ts"])
    except ValueError:
        raise TraceParseError(lineno, f"ts={fields['ts']!r} is not a number") from None
    pid = _int_field(fields, "pid", lineno)
    try:
        if kind is TraceKind.PACKET:
            for key in ("proto", "src_ip", "dst_ip", "size", "dir"):
                if key not in fields:
                    raise TraceParseError(lineno, f"missing {key}")
            return PacketRecord(
                timestamp=ts,
                protocol=Protocol(fields["proto"]),
                src_ip=fields["src_ip"],
                src_port=_int_field(fields, "src_port", lineno),
                dst_ip=fields["dst_ip"],
                dst_port=_int_field(fields, "dst_port", lineno),
                size_bytes=_int_field(fields, "size", lineno),
                direction=Direction(fields["dir"]),
                pid=pid,
            )
        if "name" not in fields:
            raise TraceParseError(lineno, "missing name")
        return SyscallRecord(timestamp=ts, name=fields["name"], pid=pid, category=fields.get("cat"))
    except TraceParseError:
        raise
    except ValueError as exc:
        raise TraceParseError(lineno, str(exc)) from None


def iter_records(lines: Iterable[str], kind: TraceKind, skipped: Optional[list] = None) -> Iterator[Record]:
    """Parse records lazily; blank lines are skipped, ordering is checked.

    With ``skipped`` given, malformed lines are appended to it as
    ``(lineno, message)`` instead of raising.
    """
    prev = float("-inf")
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        try:
            rec = parse_record(line, kind, lineno)
            if rec.timestamp < prev:
                raise TraceParseError(lineno, f"timestamp {rec.timestamp} precedes {prev}")
        except TraceParseError as exc:
            if skipped is None:
                raise
            skipped.append((lineno, str(exc)))
            continue
        prev = rec.timestamp
        yield rec


def load_trace(
    path: Union[str, Path], kind: Union[TraceKind, str], label: str = "benign", strict: bool = True
) -> Trace:
    """Read a trace file. Non-strict loading drops malformed lines and counts them."""
    kind = TraceKind(kind)
    skipped: Optional[list] = None if strict else []
    with open(path, encoding="utf-8") as fh:
        records = tuple(iter_records(fh, kind, skipped))
    bad = len(skipped or ())
    if bad:
        logger.warning("%s: skipped %d malformed lines (first: %s)", path, bad, skipped[0][1])
    logger.info("loaded %d %s records from %s", len(records), kind.value, path)
    return Trace(kind=kind, records=records, label=label, malformed_lines=bad)


def write_trace(trace: Trace, dest: Union[str, Path, TextIO]) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            write_trace(trace, fh)
        return
    for rec in trace.records:
        dest.write(format_record(rec) + "\n")


def filter_by_pids(trace: Trace, pids: Iterable[int]) -> Trace:
    """Keep records whose pid is in ``pids``; unattributed records are dropped."""
    keep = set(pids)
    records = tuple(r for r in trace.records if r.pid is not None and r.pid in keep)
    return Trace(kind=trace.kind, records=records, label=trace.label)


def merge_traces(traces: Sequence[Trace], label: str = "benign") -> Trace:
    """Interleave traces of one kind by timestamp (stable on ties)."""
    kinds = {t.kind for t in traces}
    if len(kinds) != 1:
        raise ValueError("cannot merge traces of different kinds")
    tagged = [(r.timestamp, i, j, r) for i, t in enumerate(traces) for j, r in enumerate(t.records)]
    tagged.sort(key=lambda x: x[:3])
    return Trace(kind=kinds.pop(), records=tuple(x[3] for x in tagged), label=label)
