"""Packet abstraction language: header fields -> categorical buckets -> one token per packet.

Tokens have the fixed form::

    PROTO|Src<IPCAT>|SrcPort<BUCKET>|Dst<IPCAT>|DstPort<BUCKET>|Size<BUCKET>|Dir<DIRECTION>

ICMP packets carry ``PortNone`` in both port slots.
"""

from __future__ import annotations

import ipaddress
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .traces import Direction, PacketRecord, Protocol, SyscallRecord

UNK = "<UNK>"
PORT_NONE = "PortNone"

IP_CATEGORY_ORDER = ("Private", "Loopback", "LinkLocal", "Multicast", "Documentation", "Public")

DEFAULT_IP_CATEGORIES: Tuple[Tuple[str, Tuple[str, ...]], ...] = (
    ("Private", ("10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16", "fc00::/7")),
    ("Loopback", ("127.0.0.0/8", "::1/128")),
    ("LinkLocal", ("169.254.0.0/16", "fe80::/10")),
    ("Multicast", ("224.0.0.0/4", "ff00::/8")),
    ("Documentation", ("192.0.2.0/24", "198.51.100.0/24", "203.0.113.0/24", "2001:db8::/32")),
)

DEFAULT_PORT_BUCKETS: Tuple[Tuple[str, int, int], ...] = (
    ("WellKnown", 0, 1023),
    ("Registered", 1024, 49151),
    ("Dynamic", 49152, 65535),
)


class RulesError(ValueError):
    pass


@dataclass
class AbstractionRules:
    """Bucketing tables. IP categories are tried in order; ``public`` is the fallback."""

    ip_categories: List[Tuple[str, List[str]]] = field(
        default_factory=lambda: [(n, list(c)) for n, c in DEFAULT_IP_CATEGORIES]
    )
    public: str = "Public"
    port_buckets: List[Tuple[str, int, int]] = field(default_factory=lambda: list(DEFAULT_PORT_BUCKETS))
    small_max: int = 128
    medium_max: int = 1024

    def __post_init__(self):
        if not 0 <= self.small_max < self.medium_max:
            raise RulesError("size thresholds must be strictly increasing")
        spans = sorted((lo, hi) for _, lo, hi in self.port_buckets)
        expect = 0
        for lo, hi in spans:
            if lo != expect or hi < lo:
                raise RulesError("port buckets must partition 0-65535")
            expect = hi + 1
        if expect != 65536:
            raise RulesError("port buckets must partition 0-65535")
        self._networks = [
            (name, [ipaddress.ip_network(c) for c in cidrs]) for name, cidrs in self.ip_categories
        ]

    @property
    def ip_names(self) -> List[str]:
        return [n for n, _ in self.ip_categories] + [self.public]

    @property
    def port_names(self) -> List[str]:
        return [n for n, _, _ in self.port_buckets]

    def to_dict(self) -> dict:
        return {
            "ip_categories": [{"name": n, "cidrs": list(c)} for n, c in self.ip_categories],
            "public": self.public,
            "port_buckets": [{"name": n, "lo": lo, "hi": hi} for n, lo, hi in self.port_buckets],
            "size": {"small_max": self.small_max, "medium_max": self.medium_max},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AbstractionRules":
        kw = {}
        if "ip_categories" in d:
            kw["ip_categories"] = [(c["name"], list(c["cidrs"])) for c in d["ip_categories"]]
        if "public" in d:
            kw["public"] = d["public"]
        if "port_buckets" in d:
            kw["port_buckets"] = [(b["name"], int(b["lo"]), int(b["hi"])) for b in d["port_buckets"]]
        if "size" in d:
            kw["small_max"] = int(d["size"]["small_max"])
            kw["medium_max"] = int(d["size"]["medium_max"])
        return cls(**kw)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AbstractionRules":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


DEFAULT_RULES = AbstractionRules()


def abstract_ip(addr: str, rules: AbstractionRules = DEFAULT_RULES) -> str:
    ip = ipaddress.ip_address(addr)
    for name, nets in rules._networks:
        if any(ip.version == net.version and ip in net for net in nets):
            return name
    return rules.public


def abstract_port(port: int, rules: AbstractionRules = DEFAULT_RULES) -> str:
    if not 0 <= port <= 65535:
        raise ValueError(f"port {port} outside 0-65535")
    for name, lo, hi in rules.port_buckets:
        if lo <= port <= hi:
            return name
    raise AssertionError("unreachable: port buckets partition the range")


def abstract_size(size: int, rules: AbstractionRules = DEFAULT_RULES) -> str:
    if size < 0:
        raise ValueError(f"negative size {size}")
    if size <= rules.small_max:
        return "Small"
    if size <= rules.medium_max:
        return "Medium"
    return "Large"


def tokenize_packet(rec: PacketRecord, rules: AbstractionRules = DEFAULT_RULES) -> str:
    if rec.protocol is Protocol.ICMP:
        sport = dport = PORT_NONE
    else:
        sport = "SrcPort" + abstract_port(rec.src_port, rules)
        dport = "DstPort" + abstract_port(rec.dst_port, rules)
    return "|".join(
        (
            rec.protocol.value,
            "Src" + abstract_ip(rec.src_ip, rules),
            sport,
            "Dst" + abstract_ip(rec.dst_ip, rules),
            dport,
            "Size" + abstract_size(rec.size_bytes, rules),
            "Dir" + rec.direction.value,
        )
    )


def tokenize_syscall(rec: SyscallRecord, table: Optional[Mapping[str, str]] = None) -> str:
    """Map a syscall to its category token; pre-mapped categories win, unknown names pass through."""
    if rec.category:
        return rec.category
    if table and rec.name in table:
        return table[rec.name]
    return rec.name


def tokenize(records: Iterable, rules: AbstractionRules = DEFAULT_RULES, table=None) -> List[str]:
    out = []
    for rec in records:
        if isinstance(rec, PacketRecord):
            out.append(tokenize_packet(rec, rules))
        else:
            out.append(tokenize_syscall(rec, table))
    return out


def load_syscall_table(path: Union[str, Path]) -> Dict[str, str]:
    """Read a ``name<TAB>category`` (or whitespace separated) mapping file."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise RulesError(f"{path}:{lineno}: expected 'name category'")
            table[parts[0]] = parts[1]
    return table


def token_space(rules: AbstractionRules = DEFAULT_RULES) -> List[str]:
    """Every token the grammar can produce, in a fixed enumeration order."""
    ips = rules.ip_names
    ports = rules.port_names
    sizes = ("Small", "Medium", "Large")
    dirs = [d.value for d in Direction]
    out = []
    for proto in Protocol:
        if proto is Protocol.ICMP:
            sp = dp = [PORT_NONE]
        else:
            sp = ["SrcPort" + p for p in ports]
            dp = ["DstPort" + p for p in ports]
        for s_ip, s_p, d_ip, d_p, size, d in itertools.product(ips, sp, ips, dp, sizes, dirs):
            out.append("|".join((proto.value, "Src" + s_ip, s_p, "Dst" + d_ip, d_p, "Size" + size, "Dir" + d)))
    return out


def token_space_bound(rules: AbstractionRules = DEFAULT_RULES) -> int:
    """Loose bound 3 * ips * (ports+1) * ips * (ports+1) * 3 * 2 (port axis includes PortNone)."""
    n_ip = len(rules.ip_names)
    n_port = len(rules.port_buckets) + 1
    return len(Protocol) * n_ip * n_port * n_ip * n_port * 3 * len(Direction)


class Vocabulary:
    """Distinct token texts with dense ids in first-seen order.

    Unseen text resolves to the reserved UNK id ``len(vocab)``.
    """

    def __init__(self, tokens: Sequence[str] = ()):
        self.tokens: List[str] = []
        self.index: Dict[str, int] = {}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token == UNK:
            raise ValueError("UNK is reserved")
        if "\n" in token:
            raise ValueError("token text may not contain newlines")
        idx = self.index.get(token)
        if idx is None:
            idx = self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return idx

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def unk_id(self) -> int:
        return len(self.tokens)

    @property
    def size_with_unk(self) -> int:
        return len(self.tokens) + 1

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def text_of(self, idx: int) -> str:
        if idx == self.unk_id:
            return UNK
        return self.tokens[idx]

    def encode(self, tokens: Iterable[str]) -> List[int]:
        unk = self.unk_id
        get = self.index.get
        return [get(t, unk) for t in tokens]

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def build_vocabulary(tokens: Iterable[str]) -> Vocabulary:
    return Vocabulary(tokens)
