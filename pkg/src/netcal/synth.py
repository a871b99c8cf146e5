"""Synthetic benign/anomalous event sources standing in for a live router.

A source is an order-1 Markov chain (or an i.i.d. categorical) over token
symbols, emitting events as a Poisson process. Packet sources realise each
token text as a concrete packet whose abstraction is that token; syscall
sources emit the symbol as the syscall name.
"""

from __future__ import annotations

import dataclasses
import ipaddress
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .lang import DEFAULT_RULES, PORT_NONE, AbstractionRules, abstract_ip, token_space
from .traces import Direction, PacketRecord, Protocol, SyscallRecord, Trace, TraceKind

DEFAULT_SYSCALLS = (
    "read", "write", "openat", "close", "fstat", "mmap", "munmap", "brk", "socket", "connect",
    "sendto", "recvfrom", "poll", "epoll_wait", "futex", "clone", "execve", "wait4", "getpid",
    "ioctl", "lseek", "stat", "unlink", "rename", "chmod", "kill", "nanosleep", "accept",
)

_PUBLIC_POOL = ("8.8.8.8", "1.1.1.1", "93.184.216.34", "151.101.1.69", "52.94.236.248", "17.253.144.10")


@dataclass
class SourceModel:
    """One event source. ``matrix`` is row-stochastic for Markov, ``probs`` for IID."""

    symbols: List[str]
    rate: float
    pid: int
    kind: str = "markov"
    matrix: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    seed: int = 0
    duty: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if not self.symbols:
            raise ValueError("source needs at least one symbol")
        n = len(self.symbols)
        if self.kind == "markov":
            if self.matrix is None:
                raise ValueError("markov source needs a transition matrix")
            self.matrix = np.asarray(self.matrix, dtype=np.float64)
            if self.matrix.shape != (n, n) or np.any(self.matrix < 0):
                raise ValueError("transition matrix must be square, non-negative, one row per symbol")
            if np.any(np.abs(self.matrix.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError("transition rows must sum to 1")
        elif self.kind == "iid":
            if self.probs is None:
                raise ValueError("iid source needs a probability vector")
            self.probs = np.asarray(self.probs, dtype=np.float64)
            if self.probs.shape != (n,) or np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
                raise ValueError("probabilities must be non-negative, sum to 1, one per symbol")
        else:
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.duty is not None:
            active, sleep = self.duty
            if active <= 0 or sleep < 0:
                raise ValueError("duty cycle needs active > 0 and sleep >= 0")

    def active_intervals(self, start: float, end: float) -> List[Tuple[float, float]]:
        """Half-open emission intervals inside [start, end), phase-aligned to ``start``."""
        if end <= start:
            return []
        if self.duty is None or self.duty[1] == 0:
            return [(start, end)]
        active, sleep = self.duty
        out, t = [], start
        while t < end:
            out.append((t, min(t + active, end)))
            t += active + sleep
        return out

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "symbols": list(self.symbols), "rate": self.rate, "pid": self.pid, "seed": self.seed}
        if self.matrix is not None:
            d["matrix"] = self.matrix.tolist()
        if self.probs is not None:
            d["probs"] = self.probs.tolist()
        if self.duty is not None:
            d["duty_cycle"] = {"active": self.duty[0], "sleep": self.duty[1]}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SourceModel":
        symbols = list(d["symbols"])
        kind = d.get("kind", "markov")
        matrix = d.get("matrix")
        if kind == "markov" and matrix is None:
            rng = np.random.default_rng(d.get("matrix_seed", 0))
            matrix = random_markov_matrix(len(symbols), rng, d.get("concentration", 0.5))
        duty = d.get("duty_cycle")
        return cls(
            symbols=symbols, rate=float(d["rate"]), pid=int(d["pid"]), kind=kind,
            matrix=matrix, probs=d.get("probs"), seed=int(d.get("seed", 0)),
            duty=(float(duty["active"]), float(duty["sleep"])) if duty else None,
        )


def duty_cycle_source(active_secs: float, sleep_secs: float, base: SourceModel) -> SourceModel:
    """Emit as ``base`` for ``active_secs``, then stay silent for ``sleep_secs``, repeating."""
    if active_secs <= 0:
        raise ValueError("active period must be positive")
    if sleep_secs < 0:
        raise ValueError("sleep period must be non-negative")
    return dataclasses.replace(base, duty=(float(active_secs), float(sleep_secs)))


def random_markov_matrix(n: int, rng, concentration: float = 0.5) -> np.ndarray:
    """Dirichlet rows; small ``concentration`` gives peaked, strongly structured chains."""
    rng = np.random.default_rng(rng)
    m = rng.dirichlet(np.full(n, concentration), size=n)
    # keep every row a valid distribution despite Dirichlet underflow
    m = np.maximum(m, 0.0)
    return m / m.sum(axis=1, keepdims=True)


def packet_symbols(count: int, rng, rules: AbstractionRules = DEFAULT_RULES) -> List[str]:
    space = token_space(rules)
    rng = np.random.default_rng(rng)
    return [space[i] for i in rng.choice(len(space), size=count, replace=False)]


@dataclass
class Scenario:
    benign_sources: List[SourceModel]
    duration: float
    anomaly_source: Optional[SourceModel] = None
    injection_time: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.anomaly_source is not None and not 0 <= self.injection_time < self.duration:
            raise ValueError("injection_time must fall inside the scenario")

    def reseeded(self, seed: int) -> "Scenario":
        return dataclasses.replace(self, seed=seed)

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "duration": self.duration,
            "injection_time": self.injection_time,
            "benign": [s.to_dict() for s in self.benign_sources],
        }
        if self.anomaly_source is not None:
            d["anomaly"] = self.anomaly_source.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        anomaly = d.get("anomaly")
        return cls(
            benign_sources=[SourceModel.from_dict(s) for s in d.get("benign", [])],
            duration=float(d["duration"]),
            anomaly_source=SourceModel.from_dict(anomaly) if anomaly else None,
            injection_time=float(d.get("injection_time", 0.0)),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def _arrivals(source: SourceModel, start: float, end: float, rng) -> np.ndarray:
    times = []
    for lo, hi in source.active_intervals(start, end):
        count = rng.poisson(source.rate * (hi - lo))
        times.append(np.sort(rng.uniform(lo, hi, size=count)))
    if not times:
        return np.empty(0)
    # microsecond grid so traces survive the text format unchanged
    return np.round(np.concatenate(times), 6)


def _symbol_indices(source: SourceModel, count: int, rng) -> np.ndarray:
    n = len(source.symbols)
    if source.kind == "iid":
        return rng.choice(n, size=count, p=source.probs)
    cum = np.cumsum(source.matrix, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(count)
    out = np.empty(count, dtype=np.int64)
    state = int(rng.integers(n))
    for i in range(count):
        out[i] = state
        state = int(np.searchsorted(cum[state], u[i], side="right"))
    return out


def _random_ip(category: str, rng, rules: AbstractionRules) -> str:
    if category == rules.public:
        return _PUBLIC_POOL[int(rng.integers(len(_PUBLIC_POOL)))]
    cidrs = dict(rules.ip_categories)[category]
    nets = [ipaddress.ip_network(c) for c in cidrs]
    nets = [n for n in nets if n.version == 4] or nets
    net = nets[int(rng.integers(len(nets)))]
    for _ in range(32):
        offset = int(rng.integers(1, max(2, min(net.num_addresses - 1, 2 ** 24))))
        addr = str(net.network_address + offset)
        if abstract_ip(addr, rules) == category:
            return addr
    raise ValueError(f"cannot realise an address for {category}")


def _random_port(bucket: str, rng, rules: AbstractionRules) -> int:
    for name, lo, hi in rules.port_buckets:
        if name == bucket:
            return int(rng.integers(lo, hi + 1))
    raise ValueError(f"unknown port bucket {bucket!r}")


def _random_size(bucket: str, rng, rules: AbstractionRules) -> int:
    lo, hi = {
        "Small": (0, rules.small_max),
        "Medium": (rules.small_max + 1, rules.medium_max),
        "Large": (rules.medium_max + 1, max(1500, rules.medium_max + 1)),
    }[bucket]
    return int(rng.integers(lo, hi + 1))


def realize_packet(token: str, timestamp: float, pid: Optional[int], rng,
                   rules: AbstractionRules = DEFAULT_RULES) -> PacketRecord:
    """A concrete packet whose abstraction is exactly ``token``."""
    try:
        proto, src, sport, dst, dport, size, direction = token.split("|")
    except ValueError:
        raise ValueError(f"not a packet token: {token!r}") from None

    def port(slot, prefix):
        return None if slot == PORT_NONE else _random_port(slot[len(prefix):], rng, rules)

    return PacketRecord(
        timestamp=timestamp,
        protocol=Protocol(proto),
        src_ip=_random_ip(src[3:], rng, rules),
        src_port=port(sport, "SrcPort"),
        dst_ip=_random_ip(dst[3:], rng, rules),
        dst_port=port(dport, "DstPort"),
        size_bytes=_random_size(size[4:], rng, rules),
        direction=Direction(direction[3:]),
        pid=pid,
    )


def generate_source(source: SourceModel, start: float, end: float, kind: TraceKind, scenario_seed: int = 0,
                    rules: AbstractionRules = DEFAULT_RULES) -> list:
    rng = np.random.default_rng([scenario_seed, source.seed, source.pid])
    times = _arrivals(source, start, end, rng)
    symbols = _symbol_indices(source, len(times), rng)
    if kind is TraceKind.SYSCALL:
        return [SyscallRecord(float(t), source.symbols[s], pid=source.pid) for t, s in zip(times, symbols)]
    return [realize_packet(source.symbols[s], float(t), source.pid, rng, rules) for t, s in zip(times, symbols)]


def generate(scenario: Scenario, kind: Union[TraceKind, str] = TraceKind.PACKET,
             rules: AbstractionRules = DEFAULT_RULES) -> Trace:
    """Interleave all sources by timestamp; the anomaly source starts at ``injection_time``."""
    kind = TraceKind(kind)
    streams = [generate_source(s, 0.0, scenario.duration, kind, scenario.seed, rules)
               for s in scenario.benign_sources]
    label = "benign"
    if scenario.anomaly_source is not None:
        streams.append(generate_source(scenario.anomaly_source, scenario.injection_time,
                                       scenario.duration, kind, scenario.seed, rules))
        label = f"malware:pid{scenario.anomaly_source.pid}"
    tagged = [(r.timestamp, i, j, r) for i, recs in enumerate(streams) for j, r in enumerate(recs)]
    tagged.sort(key=lambda x: x[:3])
    return Trace(kind=kind, records=tuple(x[3] for x in tagged), label=label)
